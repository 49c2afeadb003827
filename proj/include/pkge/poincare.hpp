#pragma once

// Poincare-ball geometry: distance and its gradient, the metric-scaled
// update with boundary projection, category-hierarchy pre-training and the
// IsA item-to-category loss.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "pkge/common.hpp"
#include "pkge/data_model.hpp"
#include "pkge/embedding.hpp"

namespace pkge {

struct BallConfig {
  double boundary_eps = 1e-5;
  std::size_t epochs = 50;
  std::size_t burn_in_epochs = 10;  // run at lr / 10
  double lr = 0.3;
  std::size_t negatives = 10;
  bool transitive_closure = true;   // train on (descendant, ancestor) pairs
  std::uint64_t seed = 7;

  void validate() const {
    if (!(boundary_eps > 0.0 && boundary_eps < 1.0)) throw UsageError("boundary_eps must be in (0,1)");
    if (!(lr > 0.0)) throw UsageError("poincare lr must be positive");
  }
};

inline double poincare_distance(std::span<const double> x, std::span<const double> y) {
  const double nx = squared_norm(x);
  const double ny = squared_norm(y);
  if (!(nx < 1.0) || !(ny < 1.0)) throw NumericalError("poincare distance: point outside the unit ball");
  double diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) diff += (x[i] - y[i]) * (x[i] - y[i]);
  const double gamma = 1.0 + 2.0 * diff / ((1.0 - nx) * (1.0 - ny));
  return std::acosh(gamma);
}

/// Distance plus its Euclidean gradient with respect to both arguments.
/// The gradient is set to zero at x == y where arcosh is not differentiable.
inline double poincare_distance_grad(std::span<const double> u, std::span<const double> v,
                                     std::span<double> du, std::span<double> dv) {
  const double nu = squared_norm(u);
  const double nv = squared_norm(v);
  if (!(nu < 1.0) || !(nv < 1.0)) throw NumericalError("poincare distance: point outside the unit ball");
  const double a = 1.0 - nu;
  const double b = 1.0 - nv;
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
  const double gamma = 1.0 + 2.0 * s / (a * b);
  const double root = std::sqrt(std::max(gamma * gamma - 1.0, 0.0));
  std::fill(du.begin(), du.end(), 0.0);
  std::fill(dv.begin(), dv.end(), 0.0);
  if (root < 1e-12) return std::acosh(std::max(gamma, 1.0));
  const double c = 1.0 / root;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double diff = u[i] - v[i];
    du[i] = c * (4.0 * diff / (a * b) + 4.0 * s * u[i] / (a * a * b));
    dv[i] = c * (-4.0 * diff / (a * b) + 4.0 * s * v[i] / (a * b * b));
  }
  return std::acosh(gamma);
}

/// Inverse-metric scaling factor (1 - |x|^2)^2 / 4.
inline double poincare_metric_factor(std::span<const double> row) {
  const double r = 1.0 - squared_norm(row);
  return r * r / 4.0;
}

inline void project_to_ball(std::span<double> row, double boundary_eps) {
  const double n = norm(row);
  const double limit = 1.0 - boundary_eps;
  if (n >= limit) {
    const double s = limit / n;
    for (auto& v : row) v *= s;
  }
}

/// row <- row - lr * ((1 - |row|^2)^2 / 4) * grad, then projection so that
/// |row| <= 1 - eps.
inline void riemannian_update(std::span<double> row, std::span<const double> euclidean_grad, double lr,
                              const BallConfig& config) {
  if (!all_finite(euclidean_grad)) throw NumericalError("non-finite poincare gradient");
  const double factor = poincare_metric_factor(row);
  axpy(-lr * factor, euclidean_grad, row);
  project_to_ball(row, config.boundary_eps);
}

inline void riemannian_update(EmbeddingTable& table, const GradSlice& grads, double lr, const BallConfig& config) {
  if (table.geometry != Geometry::poincare) throw UsageError("riemannian_update on euclidean table");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    riemannian_update(table.row(grads.rows()[k]), grads.grad(k), lr, config);
  }
}

// ---------------------------------------------------------------------------
// Category hierarchy.

/// Parent map of a category forest; rejects multiple parents and cycles.
class CategoryForest {
 public:
  CategoryForest(std::size_t vocab_size, std::span<const CategoryEdge> edges)
      : parent_(vocab_size, kPad), size_(vocab_size) {
    for (const auto& e : edges) {
      if (e.child == kPad || e.parent == kPad || e.child >= vocab_size || e.parent >= vocab_size) {
        throw DataError("category edge references an invalid id");
      }
      if (e.child == e.parent) throw DataError("category cycle: self edge");
      if (parent_[e.child] != kPad && parent_[e.child] != e.parent) {
        throw DataError("category has two parents: id " + std::to_string(e.child));
      }
      parent_[e.child] = e.parent;
    }
    for (Index c = 1; c < vocab_size; ++c) {
      std::size_t steps = 0;
      for (Index x = parent_[c]; x != kPad; x = parent_[x]) {
        if (++steps > vocab_size) throw DataError("category cycle detected");
      }
    }
  }

  Index parent(Index c) const { return parent_[c]; }
  std::size_t vocab_size() const { return size_; }

  std::vector<Index> ancestors(Index c) const {
    std::vector<Index> out;
    for (Index x = parent_[c]; x != kPad; x = parent_[x]) out.push_back(x);
    return out;
  }

  std::size_t depth(Index c) const { return ancestors(c).size(); }

  /// (descendant, ancestor) pairs; direct edges only unless `closure`.
  std::vector<CategoryEdge> training_pairs(bool closure) const {
    std::vector<CategoryEdge> out;
    for (Index c = 1; c < size_; ++c) {
      if (closure) {
        for (auto a : ancestors(c)) out.push_back({c, a});
      } else if (parent_[c] != kPad) {
        out.push_back({c, parent_[c]});
      }
    }
    return out;
  }

 private:
  std::vector<Index> parent_;
  std::size_t size_;
};

/// -sum log p(child | parent) with the exact softmax over all categories of
/// -d(c, parent). Oracle for the sampled training objective.
inline double hierarchy_loss_full(std::span<const CategoryEdge> pairs, const EmbeddingTable& table) {
  double total = 0.0;
  for (const auto& e : pairs) {
    std::vector<double> logits;
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 1; c < table.rows(); ++c) {
      logits.push_back(-poincare_distance(table.row(c), table.row(e.parent)));
      mx = std::max(mx, logits.back());
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total -= logits[e.child - 1] - mx - std::log(z);
  }
  return total;
}

struct PairLoss {
  double loss = 0.0;
  GradSlice grads;
};

/// Sampled softmax over {child} and negatives of -d(., parent):
///   d(child, parent) + log sum_x exp(-d(x, parent)).
inline PairLoss hierarchy_pair_loss(const EmbeddingTable& table, CategoryEdge pair,
                                    std::span<const Index> negatives) {
  const std::size_t d = table.dim();
  std::vector<Index> cand{pair.child};
  cand.insert(cand.end(), negatives.begin(), negatives.end());
  std::vector<double> dist(cand.size());
  std::vector<Vec> dx(cand.size(), Vec(d)), dp(cand.size(), Vec(d));
  for (std::size_t k = 0; k < cand.size(); ++k) {
    dist[k] = poincare_distance_grad(table.row(cand[k]), table.row(pair.parent), dx[k], dp[k]);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : dist) mx = std::max(mx, -v);
  double z = 0.0;
  for (double v : dist) z += std::exp(-v - mx);
  PairLoss r{dist[0] + mx + std::log(z), GradSlice(d)};
  for (std::size_t k = 0; k < cand.size(); ++k) {
    const double w = std::exp(-dist[k] - mx) / z;
    const double coef = (k == 0 ? 1.0 : 0.0) - w;  // d loss / d dist_k
    r.grads.add(cand[k], dx[k], coef);
    r.grads.add(pair.parent, dp[k], coef);
  }
  return r;
}

struct PretrainReport {
  std::vector<double> epoch_loss;
};

/// Trains a Poincare category table on the forest; the result is meant to be
/// frozen before joint training.
inline PretrainReport hierarchy_pretrain(std::span<const CategoryEdge> edges, EmbeddingTable& table,
                                         const BallConfig& config) {
  config.validate();
  if (table.geometry != Geometry::poincare) throw UsageError("hierarchy_pretrain needs a poincare table");
  CategoryForest forest(table.rows(), edges);
  auto pairs = forest.training_pairs(config.transitive_closure);
  PretrainReport rep;
  if (pairs.empty()) return rep;

  // Negatives for an ancestor are categories that are not its descendants.
  std::map<Index, std::set<Index>> positives;
  for (const auto& p : pairs) positives[p.parent].insert(p.child);
  Rng rng(derive_seed(config.seed, 0x9041));
  const std::size_t n_cat = table.rows() - 1;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = epoch < config.burn_in_epochs ? config.lr / 10.0 : config.lr;
    rng.shuffle(pairs);
    double total = 0.0;
    for (const auto& p : pairs) {
      const auto& pos = positives[p.parent];
      std::vector<Index> negs;
      if (pos.size() + 1 < n_cat) {
        while (negs.size() < config.negatives) {
          auto c = static_cast<Index>(1 + rng.below(n_cat));
          if (c != p.parent && !pos.contains(c)) negs.push_back(c);
        }
      }
      auto r = hierarchy_pair_loss(table, p, negs);
      if (!std::isfinite(r.loss)) throw NumericalError("hierarchy pre-training diverged");
      total += r.loss;
      riemannian_update(table, r.grads, lr, config);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(pairs.size()));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// IsA.

/// Read-only view of a table whose parameters receive no gradient.
class FrozenTable {
 public:
  explicit FrozenTable(const EmbeddingTable& t) : table_(&t) {}
  std::span<const double> row(Index i) const { return table_->row(i); }
  std::size_t rows() const { return table_->rows(); }
  std::size_t dim() const { return table_->dim(); }

 private:
  const EmbeddingTable* table_;
};

/// Loss and gradient for the item row only; categories stay frozen.
struct IsaLoss {
  double loss = 0.0;
  Vec grad_item;
};

/// Negative-sampling form of sum_j log softmax(C_j . z) over the item's
/// labels; negatives[j] are the corrupted categories for label j.
inline IsaLoss isa_loss(std::span<const double> item_row, std::span<const Index> labels,
                        const FrozenTable& categories, std::span<const std::vector<Index>> negatives) {
  if (labels.empty()) throw UsageError("isa_loss: empty label set");
  if (negatives.size() != labels.size()) throw UsageError("isa_loss: one negative list per label");
  IsaLoss r{0.0, Vec(item_row.size(), 0.0)};
  auto term = [&](Index c, double label) {
    auto cv = categories.row(c);
    const double s = dot(cv, item_row);
    r.loss += softplus_neg(label * s);
    axpy(-label * sigmoid(-label * s), cv, r.grad_item);
  };
  for (std::size_t j = 0; j < labels.size(); ++j) {
    term(labels[j], 1.0);
    for (auto n : negatives[j]) term(n, -1.0);
  }
  return r;
}

/// Uniform category negatives avoiding the item's own labels.
inline std::vector<std::vector<Index>> isa_negatives(std::span<const Index> labels, std::size_t category_rows,
                                                     std::size_t k, Rng& rng) {
  std::vector<std::vector<Index>> out(labels.size());
  const std::size_t n = category_rows - 1;
  if (n <= labels.size()) return out;
  for (auto& negs : out) {
    while (negs.size() < k) {
      auto c = static_cast<Index>(1 + rng.below(n));
      if (std::find(labels.begin(), labels.end(), c) == labels.end()) negs.push_back(c);
    }
  }
  return out;
}

}  // namespace pkge
