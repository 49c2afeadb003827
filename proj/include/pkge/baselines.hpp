#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pkge/data_model.hpp"
#include "pkge/embedding.hpp"
#include "pkge/prg.hpp"

namespace pkge {

enum class KgVariant { transE, transH, transR, transD, rescal, distmult, hole, complex };

inline constexpr std::array<KgVariant, 8> kAllKgVariants = {
    KgVariant::transE, KgVariant::transH,   KgVariant::transR, KgVariant::transD,
    KgVariant::rescal, KgVariant::distmult, KgVariant::hole,   KgVariant::complex};

inline const char* to_string(KgVariant v) {
  switch (v) {
    case KgVariant::transE: return "transE";
    case KgVariant::transH: return "transH";
    case KgVariant::transR: return "transR";
    case KgVariant::transD: return "transD";
    case KgVariant::rescal: return "rescal";
    case KgVariant::distmult: return "distmult";
    case KgVariant::hole: return "hole";
    case KgVariant::complex: return "complex";
  }
  return "?";
}

inline KgVariant kg_variant_from_string(const std::string& s) {
  for (auto v : kAllKgVariants) {
    if (s == to_string(v)) return v;
  }
  throw UsageError("unknown KG variant '" + s + "'");
}

inline bool is_translational(KgVariant v) {
  return v == KgVariant::transE || v == KgVariant::transH || v == KgVariant::transR || v == KgVariant::transD;
}

enum class KgNorm { l1, l2 };

/// Entity and relation parameters. Complex tables interleave (re, im) per
/// dimension, so their rows are 2d wide.
struct KgModel {
  KgVariant variant = KgVariant::transE;
  std::size_t dim = 0;
  KgNorm norm = KgNorm::l2;
  std::vector<std::string> relations;
  Matrix ent;
  Matrix rel;
  Matrix ent_proj;    // transD
  Matrix rel_proj;    // transD
  Matrix rel_normal;  // transH
  Matrix rel_matrix;  // transR, rescal: d*d per relation, row-major

  std::size_t entities() const { return ent.rows(); }
  std::size_t width() const { return variant == KgVariant::complex ? 2 * dim : dim; }

  std::size_t relation_index(const std::string& name) const {
    for (std::size_t k = 0; k < relations.size(); ++k) {
      if (relations[k] == name) return k;
    }
    throw UsageError("unknown relation '" + name + "'");
  }

  std::vector<std::pair<std::string, Matrix*>> blocks() {
    return {{"ent", &ent},           {"rel", &rel},         {"ent_proj", &ent_proj},
            {"rel_proj", &rel_proj}, {"rel_normal", &rel_normal}, {"rel_matrix", &rel_matrix}};
  }
  Matrix& block(const std::string& name) {
    for (auto& [n, m] : blocks()) {
      if (n == name) return *m;
    }
    throw UsageError("unknown KG block '" + name + "'");
  }

  friend bool operator==(const KgModel&, const KgModel&) = default;
};

inline KgModel init_kg(KgVariant variant, std::size_t entities, std::vector<std::string> relations, std::size_t dim,
                       std::uint64_t seed, KgNorm norm = KgNorm::l2) {
  if (entities == 0 || dim == 0 || relations.empty()) throw UsageError("KG model needs entities, relations and dim");
  KgModel m{variant, dim, norm, std::move(relations), {}, {}, {}, {}, {}, {}};
  const std::size_t nr = m.relations.size();
  const std::size_t w = m.width();
  Rng rng(seed);
  const double bound = is_translational(variant) ? 6.0 / std::sqrt(static_cast<double>(dim))
                                                 : 1.0 / std::sqrt(static_cast<double>(dim));
  auto fill = [&](Matrix& x, double b) {
    for (auto& v : x.flat()) v = rng.uniform(-b, b);
  };
  m.ent = Matrix(entities, w);
  m.rel = Matrix(nr, w);
  fill(m.ent, bound);
  fill(m.rel, bound);
  if (variant == KgVariant::transH) {
    m.rel_normal = Matrix(nr, dim);
    fill(m.rel_normal, bound);
    for (std::size_t r = 0; r < nr; ++r) {
      auto n = m.rel_normal.row(r);
      const double len = pkge::norm(n);
      for (auto& v : n) v /= len;
    }
  }
  if (variant == KgVariant::transD) {
    m.ent_proj = Matrix(entities, dim);
    m.rel_proj = Matrix(nr, dim);
    fill(m.ent_proj, 0.1 * bound);
    fill(m.rel_proj, 0.1 * bound);
  }
  if (variant == KgVariant::transR || variant == KgVariant::rescal) {
    m.rel_matrix = Matrix(nr, dim * dim);
    for (std::size_t r = 0; r < nr; ++r) {
      for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
          m.rel_matrix(r, i * dim + j) = (i == j ? 1.0 : 0.0) + rng.uniform(-0.1, 0.1) * bound;
        }
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Scores.

/// Gradients keyed by block name; each slice has the block's row width.
class KgGrads {
 public:
  GradSlice& slice(const std::string& block, std::size_t width) {
    auto it = slices_.find(block);
    if (it == slices_.end()) it = slices_.emplace(block, GradSlice(width)).first;
    return it->second;
  }
  const std::map<std::string, GradSlice>& slices() const { return slices_; }

 private:
  std::map<std::string, GradSlice> slices_;
};

/// Circular correlation (a * b)_k = sum_i a_i b_{(i+k) mod d}.
inline Vec circular_correlation(std::span<const double> a, std::span<const double> b) {
  const std::size_t d = a.size();
  Vec out(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < d; ++i) out[k] += a[i] * b[(i + k) % d];
  }
  return out;
}

namespace detail {

inline double distance_score(std::span<const double> v, KgNorm kind, std::span<double> dv) {
  // score = -||v||; dv receives d score / d v.
  if (kind == KgNorm::l1) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      s += std::abs(v[i]);
      if (!dv.empty()) dv[i] = v[i] > 0 ? -1.0 : v[i] < 0 ? 1.0 : 0.0;
    }
    return -s;
  }
  const double n = norm(v);
  if (!dv.empty()) {
    for (std::size_t i = 0; i < v.size(); ++i) dv[i] = n > 0 ? -v[i] / n : 0.0;
  }
  return -n;
}

}  // namespace detail

/// Score of (h, r, t), higher meaning more plausible. With `grads`, adds
/// coef * d score / d params for the touched rows.
inline double kg_score(const KgModel& m, Index h, std::size_t r, Index t, KgGrads* grads = nullptr,
                       double coef = 1.0) {
  const std::size_t d = m.dim;
  if (h >= m.entities() || t >= m.entities() || r >= m.relations.size()) throw UsageError("triple out of range");
  auto hv = m.ent.row(h);
  auto tv = m.ent.row(t);
  auto rv = m.rel.row(r);
  auto add = [&](const char* block, std::size_t row, std::span<const double> g) {
    if (grads) grads->slice(block, g.size()).add(static_cast<Index>(row), g, coef);
  };

  switch (m.variant) {
    case KgVariant::transE: {
      Vec v(d), g(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = hv[i] + rv[i] - tv[i];
      const double s = detail::distance_score(v, m.norm, g);
      if (grads) {
        add("ent", h, g);
        add("rel", r, g);
        for (auto& x : g) x = -x;
        add("ent", t, g);
      }
      return s;
    }
    case KgVariant::transH: {
      auto w = m.rel_normal.row(r);
      Vec u(d), v(d), g(d);
      for (std::size_t i = 0; i < d; ++i) u[i] = hv[i] - tv[i];
      const double a = dot(w, u);
      for (std::size_t i = 0; i < d; ++i) v[i] = u[i] - a * w[i] + rv[i];
      const double s = detail::distance_score(v, m.norm, g);
      if (grads) {
        const double wg = dot(w, g);
        Vec du(d), dw(d);
        for (std::size_t i = 0; i < d; ++i) {
          du[i] = g[i] - wg * w[i];
          dw[i] = -wg * u[i] - a * g[i];
        }
        add("ent", h, du);
        add("rel", r, g);
        add("rel_normal", r, dw);
        for (auto& x : du) x = -x;
        add("ent", t, du);
      }
      return s;
    }
    case KgVariant::transR: {
      auto M = m.rel_matrix.row(r);
      Vec u(d), v(d, 0.0), g(d);
      for (std::size_t i = 0; i < d; ++i) u[i] = hv[i] - tv[i];
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) v[i] += M[i * d + j] * u[j];
        v[i] += rv[i];
      }
      const double s = detail::distance_score(v, m.norm, g);
      if (grads) {
        Vec du(d, 0.0), dM(d * d);
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            du[j] += M[i * d + j] * g[i];
            dM[i * d + j] = g[i] * u[j];
          }
        }
        add("ent", h, du);
        add("rel", r, g);
        add("rel_matrix", r, dM);
        for (auto& x : du) x = -x;
        add("ent", t, du);
      }
      return s;
    }
    case KgVariant::transD: {
      // M_rh = r_p h_p^T + I, M_rt = r_p t_p^T + I.
      auto hp = m.ent_proj.row(h);
      auto tp = m.ent_proj.row(t);
      auto rp = m.rel_proj.row(r);
      const double a = dot(hp, hv), b = dot(tp, tv);
      Vec v(d), g(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = hv[i] + rp[i] * a + rv[i] - tv[i] - rp[i] * b;
      const double s = detail::distance_score(v, m.norm, g);
      if (grads) {
        const double rg = dot(rp, g);
        Vec dh(d), dhp(d), dt(d), dtp(d), drp(d);
        for (std::size_t i = 0; i < d; ++i) {
          dh[i] = g[i] + hp[i] * rg;
          dhp[i] = rg * hv[i];
          dt[i] = -g[i] - tp[i] * rg;
          dtp[i] = -rg * tv[i];
          drp[i] = g[i] * (a - b);
        }
        add("ent", h, dh);
        add("ent_proj", h, dhp);
        add("ent", t, dt);
        add("ent_proj", t, dtp);
        add("rel", r, g);
        add("rel_proj", r, drp);
      }
      return s;
    }
    case KgVariant::rescal: {
      auto M = m.rel_matrix.row(r);
      Vec mt(d, 0.0), mh(d, 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          mt[i] += M[i * d + j] * tv[j];
          mh[j] += M[i * d + j] * hv[i];
        }
      }
      const double s = dot(hv, mt);
      if (grads) {
        Vec dM(d * d);
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < d; ++j) dM[i * d + j] = hv[i] * tv[j];
        }
        add("ent", h, mt);
        add("ent", t, mh);
        add("rel_matrix", r, dM);
      }
      return s;
    }
    case KgVariant::distmult: {
      double s = 0.0;
      Vec dh(d), dt(d), dr(d);
      for (std::size_t i = 0; i < d; ++i) {
        s += hv[i] * rv[i] * tv[i];
        dh[i] = rv[i] * tv[i];
        dt[i] = hv[i] * rv[i];
        dr[i] = hv[i] * tv[i];
      }
      if (grads) {
        add("ent", h, dh);
        add("ent", t, dt);
        add("rel", r, dr);
      }
      return s;
    }
    case KgVariant::hole: {
      auto corr = circular_correlation(hv, tv);
      const double s = dot(rv, corr);
      if (grads) {
        Vec dh(d, 0.0), dt(d, 0.0);
        for (std::size_t k = 0; k < d; ++k) {
          for (std::size_t i = 0; i < d; ++i) {
            dh[i] += rv[k] * tv[(i + k) % d];
            dt[(i + k) % d] += rv[k] * hv[i];
          }
        }
        add("ent", h, dh);
        add("ent", t, dt);
        add("rel", r, corr);
      }
      return s;
    }
    case KgVariant::complex: {
      // Re(sum h r conj(t)) with h = a+bi, r = c+di, t = e+fi.
      double s = 0.0;
      Vec dh(2 * d), dt(2 * d), dr(2 * d);
      for (std::size_t k = 0; k < d; ++k) {
        const double a = hv[2 * k], b = hv[2 * k + 1];
        const double c = rv[2 * k], dd = rv[2 * k + 1];
        const double e = tv[2 * k], f = tv[2 * k + 1];
        s += (a * c - b * dd) * e + (a * dd + b * c) * f;
        dh[2 * k] = c * e + dd * f;
        dh[2 * k + 1] = -dd * e + c * f;
        dr[2 * k] = a * e + b * f;
        dr[2 * k + 1] = -b * e + a * f;
        dt[2 * k] = a * c - b * dd;
        dt[2 * k + 1] = a * dd + b * c;
      }
      if (grads) {
        add("ent", h, dh);
        add("ent", t, dt);
        add("rel", r, dr);
      }
      return s;
    }
  }
  throw UsageError("unknown KG variant");
}

// ---------------------------------------------------------------------------
// Losses.

struct KgTriple {
  Index head = kPad;
  std::size_t relation = 0;
  Index tail = kPad;
  friend bool operator==(const KgTriple&, const KgTriple&) = default;
};

struct KgLoss {
  double loss = 0.0;
  KgGrads grads;
};

/// Translational variants: sum_neg max(0, gamma - s(pos) + s(neg)).
/// Semantic-matching variants: -log s(s(pos)) - sum_neg log s(-s(neg)).
inline KgLoss margin_loss(const KgModel& m, const KgTriple& pos, std::span<const KgTriple> negatives, double gamma) {
  KgLoss out;
  if (is_translational(m.variant)) {
    if (!(gamma > 0.0)) throw UsageError("margin gamma must be positive");
    const double sp = kg_score(m, pos.head, pos.relation, pos.tail);
    for (const auto& n : negatives) {
      const double sn = kg_score(m, n.head, n.relation, n.tail);
      const double l = gamma - sp + sn;
      if (l <= 0.0) continue;
      out.loss += l;
      kg_score(m, pos.head, pos.relation, pos.tail, &out.grads, -1.0);
      kg_score(m, n.head, n.relation, n.tail, &out.grads, 1.0);
    }
    return out;
  }
  const double sp = kg_score(m, pos.head, pos.relation, pos.tail);
  out.loss += softplus_neg(sp);
  kg_score(m, pos.head, pos.relation, pos.tail, &out.grads, -sigmoid(-sp));
  for (const auto& n : negatives) {
    const double sn = kg_score(m, n.head, n.relation, n.tail);
    out.loss += softplus_neg(-sn);
    kg_score(m, n.head, n.relation, n.tail, &out.grads, sigmoid(sn));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.

/// Valid corruption range [begin, end) for a relation's head and tail.
struct SlotRange {
  Index begin = 1;
  Index end = 1;
};

struct RelationSlots {
  SlotRange head;
  SlotRange tail;
};

struct KgConfig {
  double lr = 0.01;
  double margin = 1.0;
  std::size_t negatives = 3;
  std::size_t epochs = 100;
  std::size_t patience = 5;
  std::size_t validate_every = 1;
  std::size_t validation_queries = 300;
  std::uint64_t seed = 7;
};

/// Replaces head or tail (equal odds) with a uniform entity from the slot's
/// range, retrying until the triple differs from the positive.
inline KgTriple corrupt(const KgTriple& t, const RelationSlots& slots, Rng& rng) {
  const bool head = rng.bernoulli(0.5);
  const auto& range = head ? slots.head : slots.tail;
  const auto n = range.end - range.begin;
  if (n < 2) return t;
  KgTriple c = t;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const auto e = static_cast<Index>(range.begin + rng.below(n));
    (head ? c.head : c.tail) = e;
    if (!(c == t)) return c;
  }
  return c;
}

/// Rescales rows to norm <= 1 (translational constraint).
inline void clip_rows(Matrix& m, std::span<const Index> rows) {
  for (auto r : rows) {
    auto v = m.row(r);
    const double n = std::sqrt(dot(v, v));
    if (n > 1.0) {
      for (auto& x : v) x /= n;
    }
  }
}

inline void kg_apply(KgModel& m, const KgGrads& g, double lr) {
  for (const auto& [name, slice] : g.slices()) {
    auto& block = m.block(name);
    for (std::size_t k = 0; k < slice.size(); ++k) {
      const Index row = slice.rows()[k];
      auto grad = slice.grad(k);
      if (!all_finite(grad)) throw NumericalError("non-finite KG gradient in block '" + name + "'");
      axpy(-lr, grad, block.row(row));
    }
  }
  if (is_translational(m.variant)) {
    if (auto it = g.slices().find("ent"); it != g.slices().end()) clip_rows(m.ent, it->second.rows());
  }
  if (m.variant == KgVariant::transE || m.variant == KgVariant::transH) {
    if (auto it = g.slices().find("rel"); it != g.slices().end()) clip_rows(m.rel, it->second.rows());
  }
  if (m.variant == KgVariant::transH) {
    // Hyperplane normals stay unit length.
    if (auto it = g.slices().find("rel_normal"); it != g.slices().end()) {
      for (auto r : it->second.rows()) {
        auto w = m.rel_normal.row(r);
        const double n = std::sqrt(dot(w, w));
        if (n > 0) {
          for (auto& x : w) x /= n;
        }
      }
    }
  }
}

/// 1-based rank of the gold tail among the tail slot, ties to smaller id.
inline std::size_t kg_tail_rank(const KgModel& m, const KgTriple& t, const SlotRange& tails,
                                std::span<const Index> exclude = {}) {
  const double g = kg_score(m, t.head, t.relation, t.tail);
  std::size_t rank = 1;
  for (Index c = tails.begin; c < tails.end; ++c) {
    if (c == t.tail || std::find(exclude.begin(), exclude.end(), c) != exclude.end()) continue;
    const double s = kg_score(m, t.head, t.relation, c);
    if (s > g || (s == g && c < t.tail)) ++rank;
  }
  return rank;
}

struct KgTrainResult {
  KgModel model;
  std::vector<double> epoch_loss;
  std::vector<double> validation_hit;
  std::size_t best_epoch = 0;
};

inline double kg_hit_rate(const KgModel& m, std::span<const KgTriple> triples, std::span<const RelationSlots> slots,
                          std::size_t cutoff, std::size_t max_queries) {
  if (triples.empty()) return 0.0;
  const auto n = triples.size();
  const auto q = std::min(n, std::max<std::size_t>(max_queries, 1));
  std::size_t hits = 0;
  for (std::size_t k = 0; k < q; ++k) {
    const auto& t = triples[k * n / q];
    const Index excl[] = {t.head};
    hits += kg_tail_rank(m, t, slots[t.relation].tail, excl) <= cutoff;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

/// Per-triple SGD with `negatives` corruptions, shuffled every epoch. With
/// validation triples, stops after `patience` evaluations without a HIT@10
/// gain and returns the best model.
inline KgTrainResult train_kg(KgModel model, std::span<const KgTriple> triples, std::span<const RelationSlots> slots,
                              const KgConfig& cfg, std::span<const KgTriple> validation = {}) {
  if (triples.empty()) throw DataError("train_kg: no training triples");
  if (slots.size() != model.relations.size()) throw UsageError("train_kg: one slot range per relation");
  if (!(cfg.lr > 0.0)) throw UsageError("lr must be positive");
  if (is_translational(model.variant) && !(cfg.margin > 0.0)) throw UsageError("margin gamma must be positive");
  Rng rng(derive_seed(cfg.seed, 0xb45e));
  std::vector<std::size_t> order(triples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  KgTrainResult res{model, {}, {}, 0};
  double best = validation.empty() ? 0.0 : kg_hit_rate(model, validation, slots, 10, cfg.validation_queries);
  std::size_t stale = 0;
  std::vector<KgTriple> negs;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (auto i : order) {
      const auto& t = triples[i];
      negs.clear();
      for (std::size_t k = 0; k < cfg.negatives; ++k) negs.push_back(corrupt(t, slots[t.relation], rng));
      auto l = margin_loss(model, t, negs, cfg.margin);
      if (!std::isfinite(l.loss)) {
        throw NumericalError(std::string("KG training diverged (") + to_string(model.variant) + ", epoch " +
                             std::to_string(epoch) + ")");
      }
      total += l.loss;
      kg_apply(model, l.grads, cfg.lr);
    }
    res.epoch_loss.push_back(total / static_cast<double>(triples.size()));
    if (validation.empty()) {
      res.model = model;
      res.best_epoch = epoch;
      continue;
    }
    if (epoch % std::max<std::size_t>(cfg.validate_every, 1) != 0 && epoch != cfg.epochs) continue;
    const double h = kg_hit_rate(model, validation, slots, 10, cfg.validation_queries);
    res.validation_hit.push_back(h);
    if (h > best + Tolerances::kImproveDelta) {
      best = h;
      res.model = model;
      res.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Triples from data.

/// Unified entity ids: items keep their ids, words and categories follow.
struct EntitySpace {
  std::size_t n_items = 1;
  std::size_t n_words = 1;
  std::size_t n_categories = 1;

  std::size_t size() const { return n_items + n_words + n_categories; }
  Index item(Index i) const { return i; }
  Index word(Index w) const { return static_cast<Index>(n_items + w); }
  Index category(Index c) const { return static_cast<Index>(n_items + n_words + c); }
  SlotRange items() const { return {1, static_cast<Index>(n_items)}; }
  SlotRange words() const { return {static_cast<Index>(n_items + 1), static_cast<Index>(n_items + n_words)}; }
  SlotRange categories() const {
    return {static_cast<Index>(n_items + n_words + 1), static_cast<Index>(size())};
  }
};

/// PRG triples: every relation is item -> item.
inline std::vector<KgTriple> prg_triples(std::span<const RelationGraph> graphs, std::vector<std::string>& relations) {
  std::vector<KgTriple> out;
  for (const auto& g : graphs) {
    std::size_t r = relations.size();
    for (std::size_t k = 0; k < relations.size(); ++k) {
      if (relations[k] == g.relation) r = k;
    }
    if (r == relations.size()) relations.push_back(g.relation);
    for (const auto& t : to_triples(g)) out.push_back({t.head, r, t.tail});
  }
  return out;
}

/// Keeps a uniform sample of at most `cap` items from a stream.
template <typename T>
class Reservoir {
 public:
  Reservoir(std::size_t cap, std::uint64_t seed) : cap_(cap), rng_(seed) {}

  void offer(const T& x) {
    ++seen_;
    if (items_.size() < cap_) {
      items_.push_back(x);
      return;
    }
    const auto j = rng_.below(seen_);
    if (j < cap_) items_[j] = x;
  }

  const std::vector<T>& items() const { return items_; }
  std::size_t seen() const { return seen_; }

 private:
  std::size_t cap_;
  Rng rng_;
  std::size_t seen_ = 0;
  std::vector<T> items_;
};

/// Raw-data triples with a per-relation reservoir cap: complement and
/// co_view pair every earlier session item with every later one, substitute
/// is added in both directions, search and describe link words to items,
/// isa links items to their category labels.
inline std::vector<KgTriple> raw_triples(const Dataset& ds, const EntitySpace& space, std::size_t cap_per_relation,
                                         std::uint64_t seed, std::vector<std::string>& relations,
                                         std::vector<RelationSlots>& slots) {
  relations = {"complement", "co_view", "substitute", "search", "describe", "isa"};
  slots = {{space.items(), space.items()},      {space.items(), space.items()},
           {space.items(), space.items()},      {space.words(), space.items()},
           {space.words(), space.items()},      {space.items(), space.categories()}};
  std::vector<Reservoir<KgTriple>> res;
  for (std::size_t r = 0; r < relations.size(); ++r) res.emplace_back(cap_per_relation, derive_seed(seed, r));
  auto sessions = [&](const std::vector<SessionSequence>& ss, std::size_t rel) {
    for (const auto& s : ss) {
      for (std::size_t i = 0; i < s.items.size(); ++i) {
        for (std::size_t j = i + 1; j < s.items.size(); ++j) {
          if (s.items[i] != s.items[j]) res[rel].offer({space.item(s.items[i]), rel, space.item(s.items[j])});
        }
      }
    }
  };
  sessions(ds.buy, 0);
  sessions(ds.view, 1);
  for (const auto& p : ds.substitutions) {
    res[2].offer({space.item(p.accepted_for), 2, space.item(p.substitute)});
    res[2].offer({space.item(p.substitute), 2, space.item(p.accepted_for)});
  }
  for (const auto& q : ds.searches) {
    for (auto w : q.query_words) res[3].offer({space.word(w), 3, space.item(q.clicked_item)});
  }
  for (const auto& c : ds.catalog) {
    for (auto w : c.description) res[4].offer({space.word(w), 4, space.item(c.item)});
    for (auto l : c.category_path) res[5].offer({space.item(c.item), 5, space.category(l)});
  }
  std::vector<KgTriple> out;
  for (const auto& r : res) out.insert(out.end(), r.items().begin(), r.items().end());
  return out;
}

inline void export_kg(const KgModel& m, const std::filesystem::path& dir, int digits = 9) {
  std::filesystem::create_directories(dir);
  char buf[32];
  auto write = [&](const std::string& name, const Matrix& x) {
    if (x.empty()) return;
    std::ofstream out(dir / (name + ".tsv"));
    if (!out) throw DataError("cannot write " + (dir / (name + ".tsv")).string());
    out << "# table=" << name << " variant=" << to_string(m.variant) << '\n';
    for (std::size_t r = 0; r < x.rows(); ++r) {
      out << r;
      auto row = x.row(r);
      for (std::size_t k = 0; k < row.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.*g", digits, row[k]);
        out << (k ? ' ' : '\t') << buf;
      }
      out << '\n';
    }
  };
  for (auto& [name, block] : const_cast<KgModel&>(m).blocks()) write(name, *block);
  std::ofstream rel(dir / "relations.tsv");
  for (std::size_t k = 0; k < m.relations.size(); ++k) rel << k << '\t' << m.relations[k] << '\n';
}

}  // namespace pkge
