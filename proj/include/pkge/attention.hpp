#pragma once

// Single-layer self-attention relation extractor: positional embedding,
// point-wise FFN, scaled dot-product attention with masked-mean pooling,
// and the sequence-to-target negative-sampling loss with full backprop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pkge/common.hpp"
#include "pkge/embedding.hpp"

namespace pkge {

/// Positional matrix plus the FFN shared by the query and key branches.
/// One set per task. Also used as the gradient container.
struct AttentionParams {
  Matrix positions;  // l x d
  Matrix theta1;     // d x d
  Matrix theta2;     // d x d
  Vec bias1;
  Vec bias2;

  std::size_t max_len() const { return positions.rows(); }
  std::size_t dim() const { return positions.cols(); }

  static AttentionParams zeros(std::size_t max_len, std::size_t dim) {
    return {Matrix(max_len, dim), Matrix(dim, dim), Matrix(dim, dim), Vec(dim, 0.0), Vec(dim, 0.0)};
  }

  /// P ~ U(-0.5/d, 0.5/d); Theta ~ I + U(-s, s) with s = 0.1/sqrt(d); b = 0.
  static AttentionParams init(std::size_t max_len, std::size_t dim, std::uint64_t seed) {
    if (max_len == 0 || dim == 0) throw UsageError("attention needs nonzero length and dim");
    auto p = zeros(max_len, dim);
    Rng rng(seed);
    const double half = 0.5 / static_cast<double>(dim);
    for (auto& v : p.positions.flat()) v = rng.uniform(-half, half);
    const double s = 0.1 / std::sqrt(static_cast<double>(dim));
    for (auto* m : {&p.theta1, &p.theta2}) {
      for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) (*m)(i, j) = (i == j ? 1.0 : 0.0) + rng.uniform(-s, s);
      }
    }
    return p;
  }

  /// Flat views over every parameter block, in a fixed order.
  std::vector<std::span<double>> blocks() {
    return {positions.flat(), theta1.flat(), theta2.flat(), bias1, bias2};
  }
  std::vector<std::span<const double>> blocks() const {
    return {positions.flat(), theta1.flat(), theta2.flat(), bias1, bias2};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto b : blocks()) n += b.size();
    return n;
  }

  friend bool operator==(const AttentionParams&, const AttentionParams&) = default;
};

/// Padded, masked id sequences with one target each. Rows are left-aligned;
/// sequences longer than l keep their most recent l entries.
struct SequenceBatch {
  std::size_t max_len = 0;
  std::vector<Index> ids;      // batch x l, PAD-filled
  std::vector<std::uint8_t> mask;  // batch x l
  std::vector<Index> targets;
  std::string task;

  std::size_t size() const { return targets.size(); }

  void add(std::span<const Index> sequence, Index target) {
    if (target == kPad) throw UsageError("sequence target is PAD");
    const std::size_t keep = std::min(sequence.size(), max_len);
    const auto tail = sequence.subspan(sequence.size() - keep);
    std::size_t used = 0;
    for (std::size_t k = 0; k < max_len; ++k) {
      const bool on = k < keep && tail[k] != kPad;
      ids.push_back(on ? tail[k] : kPad);
      mask.push_back(on ? 1 : 0);
      used += on;
    }
    if (used == 0) throw UsageError("sequence has no unmasked position");
    targets.push_back(target);
  }

  /// Unmasked ids of row b, in order.
  std::vector<Index> row(std::size_t b) const {
    std::vector<Index> out;
    for (std::size_t k = 0; k < max_len; ++k) {
      if (mask[b * max_len + k]) out.push_back(ids[b * max_len + k]);
    }
    return out;
  }
};

/// E_k = z_{e_k} + P_k for k < ids.size().
inline Matrix embed_with_positions(std::span<const Index> ids, const EmbeddingTable& table,
                                   const AttentionParams& params) {
  if (ids.size() > params.max_len()) throw UsageError("sequence longer than max length");
  Matrix e(ids.size(), table.dim());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] == kPad || ids[k] >= table.rows()) {
      throw UsageError("entity id " + std::to_string(ids[k]) + " out of range for " + table.name);
    }
    auto z = table.row(ids[k]);
    auto p = params.positions.row(k);
    auto out = e.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = z[j] + p[j];
  }
  return e;
}

struct FfnCache {
  Matrix pre;     // E Theta1 + b1
  Matrix hidden;  // ReLU(pre)
  Matrix out;     // hidden Theta2 + b2
};

namespace detail {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> as_eigen(Matrix& m) {
  return {m.flat().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<const RowMajor> as_eigen(const Matrix& m) {
  return {m.flat().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<const Eigen::RowVectorXd> as_eigen(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

// out = in * w + b, row-wise.
inline void affine(const Matrix& in, const Matrix& w, std::span<const double> b, Matrix& out) {
  out = Matrix(in.rows(), w.cols());
  auto o = as_eigen(out);
  o.noalias() = as_eigen(in) * as_eigen(w);
  o.rowwise() += as_eigen(b);
}
}  // namespace detail

/// F_i = ReLU(E_i Theta1 + b1) Theta2 + b2, independently per row.
inline FfnCache ffn_forward(const Matrix& e, const AttentionParams& params) {
  if (e.cols() != params.dim()) throw UsageError("ffn input width mismatch");
  FfnCache c;
  detail::affine(e, params.theta1, params.bias1, c.pre);
  c.hidden = c.pre;
  for (auto& v : c.hidden.flat()) v = v > 0.0 ? v : 0.0;
  detail::affine(c.hidden, params.theta2, params.bias2, c.out);
  return c;
}

/// Accumulates FFN parameter gradients into `grads`; returns dL/dE.
inline Matrix ffn_backward(const Matrix& e, const FfnCache& cache, const Matrix& d_out,
                           const AttentionParams& params, AttentionParams& grads) {
  using detail::as_eigen;
  const auto g = as_eigen(d_out);
  for (std::size_t i = 0; i < d_out.rows(); ++i) axpy(1.0, d_out.row(i), grads.bias2);
  as_eigen(grads.theta2).noalias() += as_eigen(cache.hidden).transpose() * g;
  // d_hidden = g Theta2^T, gated by ReLU
  Matrix d_pre(e.rows(), params.dim());
  auto dp = as_eigen(d_pre);
  dp.noalias() = g * as_eigen(params.theta2).transpose();
  dp.array() *= (as_eigen(cache.pre).array() > 0.0).cast<double>();
  for (std::size_t i = 0; i < d_pre.rows(); ++i) axpy(1.0, d_pre.row(i), grads.bias1);
  as_eigen(grads.theta1).noalias() += as_eigen(e).transpose() * dp;
  Matrix d_e(e.rows(), params.dim());
  as_eigen(d_e).noalias() = dp * as_eigen(params.theta1).transpose();
  return d_e;
}

struct AttentionOutput {
  Matrix output;   // H = alpha V
  Matrix weights;  // alpha, row-stochastic over unmasked keys
};

/// H = softmax(Q K^T / sqrt(d)) V with masked keys forced to weight 0.
/// An empty key mask means every key is visible.
inline AttentionOutput scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                            std::span<const std::uint8_t> key_mask = {}) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || (!key_mask.empty() && key_mask.size() != k.rows())) {
    throw UsageError("attention shape mismatch");
  }
  const std::size_t lq = q.rows();
  const std::size_t lk = k.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  auto visible = [&](std::size_t j) { return key_mask.empty() || key_mask[j] != 0; };
  bool any = false;
  for (std::size_t j = 0; j < lk; ++j) any = any || visible(j);
  if (!any) throw UsageError("attention: every key is masked");

  AttentionOutput r{Matrix(lq, v.cols()), Matrix(lq, lk)};
  for (std::size_t i = 0; i < lq; ++i) {
    auto a = r.weights.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lk; ++j) {
      if (!visible(j)) continue;
      a[j] = dot(q.row(i), k.row(j)) * scale;
      mx = std::max(mx, a[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < lk; ++j) {
      a[j] = visible(j) ? std::exp(a[j] - mx) : 0.0;
      z += a[j];
    }
    for (std::size_t j = 0; j < lk; ++j) {
      a[j] /= z;
      if (a[j] != 0.0) axpy(a[j], v.row(j), r.output.row(i));
    }
  }
  return r;
}

struct AttentionGrads {
  Matrix d_q;
  Matrix d_k;
  Matrix d_v;
};

inline AttentionGrads scaled_dot_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                                    const Matrix& weights, const Matrix& d_out) {
  const std::size_t lq = q.rows();
  const std::size_t lk = k.rows();
  const std::size_t d = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionGrads g{Matrix(lq, d), Matrix(lk, d), Matrix(lk, v.cols())};
  Vec d_alpha(lk);
  for (std::size_t i = 0; i < lq; ++i) {
    auto a = weights.row(i);
    auto dh = d_out.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < lk; ++j) {
      d_alpha[j] = dot(dh, v.row(j));
      s += a[j] * d_alpha[j];
      if (a[j] != 0.0) axpy(a[j], dh, g.d_v.row(j));
    }
    for (std::size_t j = 0; j < lk; ++j) {
      if (a[j] == 0.0) continue;
      const double d_logit = a[j] * (d_alpha[j] - s) * scale;
      axpy(d_logit, k.row(j), g.d_q.row(i));
      axpy(d_logit, q.row(i), g.d_k.row(j));
    }
  }
  return g;
}

/// Forward state of one context aggregation, kept for backprop.
struct ContextForward {
  std::vector<Index> ids;
  Matrix e_in;   // E^I
  Matrix e_key;  // E^O
  FfnCache f_in;
  FfnCache f_key;
  AttentionOutput attn;
  Vec context;   // masked mean of H rows

  /// Effective weight of each position in the context, mean_i alpha_ij.
  Vec pooled_weights() const {
    const std::size_t m = attn.weights.rows();
    Vec w(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) axpy(1.0 / static_cast<double>(m), attn.weights.row(i), w);
    return w;
  }
};

/// Q = FFN(E^I), K = FFN(E^O), V = E^I; the context is the mean of H's rows.
/// `ids` holds only unmasked entries.
inline ContextForward aggregate_context(std::span<const Index> ids, const EmbeddingTable& input,
                                        const EmbeddingTable& key, const AttentionParams& params) {
  if (ids.empty()) throw UsageError("empty context sequence");
  ContextForward f;
  f.ids.assign(ids.begin(), ids.end());
  f.e_in = embed_with_positions(ids, input, params);
  f.e_key = embed_with_positions(ids, key, params);
  f.f_in = ffn_forward(f.e_in, params);
  f.f_key = ffn_forward(f.e_key, params);
  f.attn = scaled_dot_attention(f.f_in.out, f.f_key.out, f.e_in);
  const std::size_t m = ids.size();
  f.context.assign(params.dim(), 0.0);
  if (m == 1) {
    // alpha is exactly 1; copy to keep the singleton identity exact.
    auto e = f.e_in.row(0);
    std::copy(e.begin(), e.end(), f.context.begin());
  } else {
    for (std::size_t i = 0; i < m; ++i) axpy(1.0 / static_cast<double>(m), f.attn.output.row(i), f.context);
  }
  return f;
}

/// Backprop from dL/dc into tables and attention parameters.
inline void aggregate_context_backward(const ContextForward& f, std::span<const double> d_context,
                                       const EmbeddingTable& input, const EmbeddingTable& key,
                                       const AttentionParams& params, TableGradSet& table_grads,
                                       AttentionParams& param_grads) {
  const std::size_t m = f.ids.size();
  const std::size_t d = params.dim();
  Matrix d_h(m, d);
  for (std::size_t i = 0; i < m; ++i) axpy(1.0 / static_cast<double>(m), d_context, d_h.row(i));
  auto ag = scaled_dot_attention_backward(f.f_in.out, f.f_key.out, f.e_in, f.attn.weights, d_h);
  Matrix d_e_in = ffn_backward(f.e_in, f.f_in, ag.d_q, params, param_grads);
  Matrix d_e_key = ffn_backward(f.e_key, f.f_key, ag.d_k, params, param_grads);
  auto& gin = table_grads.for_table(input.name);
  for (std::size_t k = 0; k < m; ++k) {
    auto row = d_e_in.row(k);
    axpy(1.0, ag.d_v.row(k), row);
    gin.add(f.ids[k], row);
    axpy(1.0, row, param_grads.positions.row(k));
  }
  auto& gkey = table_grads.for_table(key.name);
  for (std::size_t k = 0; k < m; ++k) {
    gkey.add(f.ids[k], d_e_key.row(k));
    axpy(1.0, d_e_key.row(k), param_grads.positions.row(k));
  }
}

/// Which table plays each role for one sequence task.
struct SequenceTables {
  const EmbeddingTable& input;  // queries and values
  const EmbeddingTable& key;
  const EmbeddingTable& score;  // target table
};

struct SequenceLoss {
  double loss = 0.0;
  TableGradSet table_grads;
  AttentionParams param_grads;
  Vec context;
  Vec pooled_weights;
};

/// Negative-sampling loss of the target given the attention-aggregated
/// context, with gradients for every touched parameter.
inline SequenceLoss sequence_logprob(std::span<const Index> ids, Index target,
                                     std::span<const Index> negatives, const SequenceTables& tables,
                                     const AttentionParams& params) {
  if (target == kPad) throw UsageError("PAD target");
  auto fwd = aggregate_context(ids, tables.input, tables.key, params);
  auto ns = sampled_softmax_loss_grad(fwd.context, tables.score, target, negatives);
  SequenceLoss r{ns.loss, TableGradSet(params.dim()),
                 AttentionParams::zeros(params.max_len(), params.dim()), fwd.context,
                 fwd.pooled_weights()};
  auto& gs = r.table_grads.for_table(tables.score.name);
  for (std::size_t k = 0; k < ns.grad_table.size(); ++k) gs.add(ns.grad_table.rows()[k], ns.grad_table.grad(k));
  aggregate_context_backward(fwd, ns.grad_query, tables.input, tables.key, params, r.table_grads,
                             r.param_grads);
  return r;
}

struct SequenceItem {
  std::span<const Index> ids;
  Index target = kPad;
  std::span<const Index> negatives;
};

/// Sum of sequence_logprob over a minibatch sharing one parameter set. The
/// feed-forward layer runs once over every row of every example; context
/// and pooled_weights are left empty.
inline SequenceLoss sequence_logprob_batch(std::span<const SequenceItem> batch, const SequenceTables& tables,
                                           const AttentionParams& params) {
  const std::size_t d = params.dim();
  std::vector<std::size_t> offset{0};
  for (const auto& b : batch) {
    if (b.ids.empty()) throw UsageError("empty context sequence");
    if (b.target == kPad) throw UsageError("PAD target");
    offset.push_back(offset.back() + 2 * b.ids.size());
  }
  // Rows [o, o+m) hold E^I of an example, [o+m, o+2m) its E^O.
  Matrix e(offset.back(), d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto m = batch[b].ids.size();
    auto in = embed_with_positions(batch[b].ids, tables.input, params);
    auto key = embed_with_positions(batch[b].ids, tables.key, params);
    std::copy(in.flat().begin(), in.flat().end(), e.row(offset[b]).begin());
    std::copy(key.flat().begin(), key.flat().end(), e.row(offset[b] + m).begin());
  }
  const auto cache = ffn_forward(e, params);

  auto rows = [d](const Matrix& src, std::size_t from, std::size_t n) {
    Matrix out(n, d);
    std::copy_n(src.row(from).begin(), n * d, out.flat().begin());
    return out;
  };
  SequenceLoss r{0.0, TableGradSet(d), AttentionParams::zeros(params.max_len(), d), {}, {}};
  auto& gs = r.table_grads.for_table(tables.score.name);
  Matrix d_f(e.rows(), d), d_v(e.rows(), d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto m = batch[b].ids.size();
    const auto o = offset[b];
    const auto q = rows(cache.out, o, m), k = rows(cache.out, o + m, m), v = rows(e, o, m);
    const auto attn = scaled_dot_attention(q, k, v);
    Vec context(d, 0.0);
    if (m == 1) {
      std::copy(v.row(0).begin(), v.row(0).end(), context.begin());
    } else {
      for (std::size_t i = 0; i < m; ++i) axpy(1.0 / static_cast<double>(m), attn.output.row(i), context);
    }
    auto ns = sampled_softmax_loss_grad(context, tables.score, batch[b].target, batch[b].negatives);
    r.loss += ns.loss;
    for (std::size_t j = 0; j < ns.grad_table.size(); ++j) gs.add(ns.grad_table.rows()[j], ns.grad_table.grad(j));
    Matrix d_h(m, d);
    for (std::size_t i = 0; i < m; ++i) axpy(1.0 / static_cast<double>(m), ns.grad_query, d_h.row(i));
    auto ag = scaled_dot_attention_backward(q, k, v, attn.weights, d_h);
    std::copy(ag.d_q.flat().begin(), ag.d_q.flat().end(), d_f.row(o).begin());
    std::copy(ag.d_k.flat().begin(), ag.d_k.flat().end(), d_f.row(o + m).begin());
    std::copy(ag.d_v.flat().begin(), ag.d_v.flat().end(), d_v.row(o).begin());
  }

  const Matrix d_e = ffn_backward(e, cache, d_f, params, r.param_grads);
  auto& gin = r.table_grads.for_table(tables.input.name);
  auto& gkey = r.table_grads.for_table(tables.key.name);
  Vec row(d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto m = batch[b].ids.size();
    const auto o = offset[b];
    for (std::size_t k = 0; k < m; ++k) {
      std::copy(d_e.row(o + k).begin(), d_e.row(o + k).end(), row.begin());
      axpy(1.0, d_v.row(o + k), row);
      gin.add(batch[b].ids[k], row);
      axpy(1.0, row, r.param_grads.positions.row(k));
    }
    for (std::size_t k = 0; k < m; ++k) {
      gkey.add(batch[b].ids[k], d_e.row(o + m + k));
      axpy(1.0, d_e.row(o + m + k), r.param_grads.positions.row(k));
    }
  }
  return r;
}

/// Writes "position<TAB>weight" rows (1-based positions).
inline void export_attention_weights(std::span<const double> weights, const std::filesystem::path& file) {
  std::ofstream out(file);
  out << "position\tweight\n";
  char buf[32];
  for (std::size_t k = 0; k < weights.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.9g", weights[k]);
    out << k + 1 << '\t' << buf << '\n';
  }
}

}  // namespace pkge
