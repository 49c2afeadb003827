#pragma once

// Dense embedding tables, the smoothed-unigram negative sampler, full and
// negative-sampling softmax losses, sparse row gradients, SGD and the
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "pkge/common.hpp"
#include "pkge/data_model.hpp"

namespace pkge {

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  // Fixed alignment keeps vectorized reductions in the same order every run.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

enum class Geometry { euclidean, poincare };

inline const char* to_string(Geometry g) {
  return g == Geometry::euclidean ? "euclidean" : "poincare";
}

/// An entity-by-dimension parameter matrix. Row 0 is the PAD row and stays
/// zero.
struct EmbeddingTable {
  std::string name;
  Geometry geometry = Geometry::euclidean;
  Matrix values;

  std::size_t rows() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
  std::span<double> row(Index i) { return values.row(i); }
  std::span<const double> row(Index i) const { return values.row(i); }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

/// Euclidean tables draw U(-0.5/d, 0.5/d), Poincare tables U(-1e-3, 1e-3).
inline EmbeddingTable init_table(std::string name, std::size_t rows, std::size_t dim,
                                 Geometry geometry, std::uint64_t seed) {
  if (rows == 0 || dim == 0) {
    throw UsageError("table '" + name + "' needs nonzero rows and dim");
  }
  EmbeddingTable t{std::move(name), geometry, Matrix(rows, dim)};
  Rng rng(seed);
  const double half = geometry == Geometry::euclidean ? 0.5 / static_cast<double>(dim) : 1e-3;
  for (std::size_t r = 1; r < rows; ++r) {
    for (auto& v : t.values.row(r)) v = rng.uniform(-half, half);
  }
  return t;
}

/// Per-row sparse gradient for one table; row indices are unique.
class GradSlice {
 public:
  GradSlice() = default;
  explicit GradSlice(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const std::vector<Index>& rows() const { return rows_; }

  std::span<double> grad(std::size_t k) { return {data_.data() + k * dim_, dim_}; }
  std::span<const double> grad(std::size_t k) const { return {data_.data() + k * dim_, dim_}; }

  /// Returns the gradient row for `row`, creating it zeroed if needed.
  std::span<double> at(Index row) {
    auto [it, inserted] = pos_.try_emplace(row, rows_.size());
    if (inserted) {
      rows_.push_back(row);
      data_.resize(data_.size() + dim_, 0.0);
    }
    return grad(it->second);
  }

  void add(Index row, std::span<const double> g, double scale = 1.0) {
    axpy(scale, g, at(row));
  }

  const double* find(Index row) const {
    auto it = pos_.find(row);
    return it == pos_.end() ? nullptr : data_.data() + it->second * dim_;
  }

  void clear() {
    rows_.clear();
    data_.clear();
    pos_.clear();
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Index> rows_;
  std::vector<double> data_;
  std::unordered_map<Index, std::size_t> pos_;
};

/// row <- row - lr * grad for every slice entry. Euclidean tables only.
inline void sgd_update(EmbeddingTable& table, const GradSlice& grads, double lr) {
  if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
  if (table.geometry != Geometry::euclidean) {
    throw UsageError("sgd_update on non-euclidean table '" + table.name + "'");
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    const Index r = grads.rows()[k];
    auto g = grads.grad(k);
    if (!all_finite(g)) {
      throw NumericalError("non-finite gradient for table '" + table.name + "' row " +
                           std::to_string(r));
    }
    axpy(-lr, g, table.row(r));
  }
}

// Dense counterpart used for attention and baseline parameters.
inline void sgd_update(std::span<double> params, std::span<const double> grads, double lr,
                       const std::string& name) {
  if (!all_finite(grads)) throw NumericalError("non-finite gradient for '" + name + "'");
  axpy(-lr, grads, params);
}

/// Gradient slices for several tables, keyed by table name. Two roles bound
/// to the same table share one slice.
class TableGradSet {
 public:
  explicit TableGradSet(std::size_t dim = 0) : dim_(dim) {}

  GradSlice& for_table(const std::string& name) {
    for (auto& [n, s] : entries_) {
      if (n == name) return s;
    }
    entries_.emplace_back(name, GradSlice(dim_));
    return entries_.back().second;
  }

  const GradSlice* find(const std::string& name) const {
    for (const auto& [n, s] : entries_) {
      if (n == name) return &s;
    }
    return nullptr;
  }

  void merge(const TableGradSet& other, double scale = 1.0) {
    for (const auto& [n, s] : other.entries_) {
      auto& dst = for_table(n);
      for (std::size_t k = 0; k < s.size(); ++k) dst.add(s.rows()[k], s.grad(k), scale);
    }
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::size_t dim_ = 0;
  std::vector<std::pair<std::string, GradSlice>> entries_;
};

// ---------------------------------------------------------------------------
// Negative sampling.

/// Draws ids with probability proportional to count^exponent using an alias
/// table. PAD (id 0) is never drawn.
class NegativeSampler {
 public:
  NegativeSampler() = default;

  NegativeSampler(std::vector<double> counts, double exponent = 0.75) : exponent_(exponent) {
    if (counts.size() < 2) throw DataError("negative sampler needs at least one entity");
    counts[kPad] = 0.0;
    probs_.resize(counts.size());
    double total = 0.0;
    for (std::size_t i = 1; i < counts.size(); ++i) {
      probs_[i] = counts[i] > 0 ? std::pow(counts[i], exponent) : 0.0;
      total += probs_[i];
    }
    if (total <= 0.0) {
      // No counts at all: fall back to uniform over real entities.
      std::fill(probs_.begin() + 1, probs_.end(), 1.0);
      total = static_cast<double>(counts.size() - 1);
    }
    for (auto& p : probs_) p /= total;
    build_alias();
  }

  static NegativeSampler uniform(std::size_t vocab_size) {
    return NegativeSampler(std::vector<double>(vocab_size, 1.0), 1.0);
  }

  std::size_t vocab_size() const { return probs_.size(); }
  double probability(Index id) const { return probs_.at(id); }
  double exponent() const { return exponent_; }

  Index draw(Rng& rng) const {
    const auto n = probs_.size();
    const auto i = static_cast<Index>(rng.below(n));
    return rng.uniform() < accept_[i] ? i : alias_[i];
  }

  /// k draws avoiding `exclude`. Collisions are resampled up to a bound,
  /// after which the draw falls back to uniform rejection over the table.
  std::vector<Index> sample(std::size_t k, std::span<const Index> exclude, Rng& rng) const {
    if (k == 0) throw UsageError("negative sample count must be >= 1");
    auto excluded = [&](Index id) {
      return id == kPad || std::find(exclude.begin(), exclude.end(), id) != exclude.end();
    };
    std::vector<Index> out;
    out.reserve(k);
    for (std::size_t s = 0; s < k; ++s) {
      Index id = kPad;
      bool found = false;
      for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
        id = draw(rng);
        if (!excluded(id)) {
          found = true;
          break;
        }
      }
      if (!found) {
        std::vector<Index> allowed;
        for (Index i = 1; i < probs_.size(); ++i) {
          if (!excluded(i)) allowed.push_back(i);
        }
        if (allowed.empty()) throw DataError("negative sampling: exclusions cover the vocabulary");
        id = allowed[rng.below(allowed.size())];
      }
      out.push_back(id);
    }
    return out;
  }

 private:
  static constexpr int kMaxRetries = 32;

  void build_alias() {
    const std::size_t n = probs_.size();
    accept_.assign(n, 0.0);
    alias_.assign(n, 0);
    std::vector<double> scaled(n);
    std::vector<Index> small, large;
    for (std::size_t i = 0; i < n; ++i) {
      scaled[i] = probs_[i] * static_cast<double>(n);
      (scaled[i] < 1.0 ? small : large).push_back(static_cast<Index>(i));
    }
    while (!small.empty() && !large.empty()) {
      Index s = small.back();
      small.pop_back();
      Index l = large.back();
      accept_[s] = scaled[s];
      alias_[s] = l;
      scaled[l] = (scaled[l] + scaled[s]) - 1.0;
      if (scaled[l] < 1.0) {
        large.pop_back();
        small.push_back(l);
      }
    }
    for (auto i : large) accept_[i] = 1.0;
    for (auto i : small) accept_[i] = 1.0;
  }

  double exponent_ = 0.75;
  std::vector<double> probs_;
  std::vector<double> accept_;
  std::vector<Index> alias_;
};

// ---------------------------------------------------------------------------
// Losses.

/// log p(target | query) under the full softmax over all non-PAD rows.
/// Desk-scale oracle for the sampled objective.
inline double softmax_logprob_full(std::span<const double> query, const EmbeddingTable& output,
                                   Index target) {
  if (target == kPad || target >= output.rows()) throw UsageError("invalid softmax target");
  if (!all_finite(query)) throw NumericalError("non-finite softmax query");
  double max_logit = -std::numeric_limits<double>::infinity();
  std::vector<double> logits(output.rows());
  for (Index k = 1; k < output.rows(); ++k) {
    logits[k] = dot(query, output.row(k));
    max_logit = std::max(max_logit, logits[k]);
  }
  if (!std::isfinite(max_logit)) throw NumericalError("non-finite softmax logits");
  double z = 0.0;
  for (Index k = 1; k < output.rows(); ++k) z += std::exp(logits[k] - max_logit);
  return logits[target] - max_logit - std::log(z);
}

/// Result of the logistic negative-sampling objective
///   -log s(q.z_t) - sum_n log s(-q.z_n).
struct NsLoss {
  double loss = 0.0;
  Vec grad_query;       // d loss / d q
  GradSlice grad_table; // d loss / d z for target and negatives
};

inline NsLoss sampled_softmax_loss_grad(std::span<const double> query, const EmbeddingTable& output,
                                        Index target, std::span<const Index> negatives) {
  const std::size_t d = query.size();
  if (std::find(negatives.begin(), negatives.end(), target) != negatives.end()) {
    throw UsageError("target appears among negatives");
  }
  NsLoss r{0.0, Vec(d, 0.0), GradSlice(d)};
  auto term = [&](Index id, double label) {
    auto z = output.row(id);
    const double s = dot(query, z);
    // label=+1: -log s(x); label=-1: -log s(-x). d/dx = -label * s(-label * x)
    r.loss += softplus_neg(label * s);
    const double g = -label * sigmoid(-label * s);
    axpy(g, z, r.grad_query);
    r.grad_table.add(id, query, g);
  };
  term(target, 1.0);
  for (auto n : negatives) term(n, -1.0);
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checking.

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double tolerance = Tolerances::kGradCheckTol;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double eps = Tolerances::kGradCheckEps;
  double tol = Tolerances::kGradCheckTol;
  std::size_t max_coords = 0;  // 0 checks every coordinate
  std::uint64_t seed = 7;
  double abs_floor = 1e-6;     // denominator floor for near-zero gradients
};

/// Compares `analytic` against central differences of `loss` around
/// `theta`. `loss` must be deterministic.
inline GradCheckReport grad_check(const std::function<double(std::span<const double>)>& loss,
                                  std::span<const double> theta, std::span<const double> analytic,
                                  GradCheckOptions opt = {}) {
  GradCheckReport rep;
  rep.tolerance = opt.tol;
  std::vector<std::size_t> coords(theta.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (opt.max_coords && opt.max_coords < coords.size()) {
    Rng rng(opt.seed);
    rng.shuffle(coords);
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
  }
  Vec x(theta.begin(), theta.end());
  for (auto i : coords) {
    const double saved = x[i];
    x[i] = saved + opt.eps;
    const double fp = loss(x);
    x[i] = saved - opt.eps;
    const double fm = loss(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * opt.eps);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.abs_floor});
    const double rel = std::abs(numeric - analytic[i]) / denom;
    if (rel > rep.max_rel_error || !std::isfinite(rel)) {
      rep.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
      rep.worst_index = i;
    }
    ++rep.checked;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Export.

/// Writes "# table=<name> geometry=<g>", then "entity<TAB>d", then one row
/// per non-PAD entity with `digits` significant digits (17 round-trips).
inline void export_table(const EmbeddingTable& t, const Vocabulary& vocab,
                         const std::filesystem::path& file, int digits = 9) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "# table=" << t.name << " geometry=" << to_string(t.geometry) << '\n';
  out << "entity\t" << t.dim() << '\n';
  char buf[32];
  for (Index r = 1; r < t.rows(); ++r) {
    out << (r < vocab.size() ? vocab.key(r) : std::to_string(r)) << '\t';
    auto row = t.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.*g", digits, row[j]);
      if (j) out << ' ';
      out << buf;
    }
    out << '\n';
  }
}

/// Reads a table written by export_table; rows are placed by vocabulary id.
inline EmbeddingTable import_table(const std::filesystem::path& file, const Vocabulary& vocab) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::string meta, header, line;
  std::getline(in, meta);
  std::getline(in, header);
  EmbeddingTable t;
  auto field = [&](const std::string& key) {
    auto p = meta.find(key + "=");
    if (p == std::string::npos) throw DataError(file.string() + ": missing " + key);
    auto e = meta.find(' ', p);
    return meta.substr(p + key.size() + 1, e == std::string::npos ? e : e - p - key.size() - 1);
  };
  t.name = field("table");
  t.geometry = field("geometry") == "poincare" ? Geometry::poincare : Geometry::euclidean;
  auto tab = header.find('\t');
  if (header.substr(0, tab) != "entity" || tab == std::string::npos) {
    throw DataError(file.string() + ": bad header");
  }
  const auto dim = static_cast<std::size_t>(std::stoul(header.substr(tab + 1)));
  t.values = Matrix(vocab.size(), dim);
  std::size_t n = 2;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    if (f.size() != 2) throw DataError(detail::where(file, n) + "bad row");
    auto id = vocab.find(f[0]);
    if (!id) throw DataError(detail::where(file, n) + "unknown entity '" + f[0] + "'");
    std::istringstream vs(f[1]);
    auto row = t.values.row(*id);
    for (std::size_t j = 0; j < dim; ++j) {
      if (!(vs >> row[j])) throw DataError(detail::where(file, n) + "short row");
    }
  }
  return t;
}

}  // namespace pkge
