#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pkge/common.hpp"
#include "pkge/data_model.hpp"

namespace pkge {

/// Sparse symmetric graph; neighbor lists are sorted by id.
struct WeightedGraph {
  struct Edge {
    Index to;
    double weight;
    friend bool operator==(const Edge&, const Edge&) = default;
  };
  std::vector<std::vector<Edge>> adj;

  explicit WeightedGraph(std::size_t nodes = 0) : adj(nodes) {}

  std::size_t nodes() const { return adj.size(); }

  double weight(Index a, Index b) const {
    const auto& row = adj.at(a);
    auto it = std::lower_bound(row.begin(), row.end(), b, [](const Edge& e, Index v) { return e.to < v; });
    return it != row.end() && it->to == b ? it->weight : 0.0;
  }

  bool has_edge(Index a, Index b) const { return weight(a, b) != 0.0; }

  double degree(Index a) const {
    double d = 0.0;
    for (const auto& e : adj.at(a)) d += e.weight;
    return d;
  }

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& row : adj) n += row.size();
    return n / 2;
  }

  friend bool operator==(const WeightedGraph&, const WeightedGraph&) = default;
};

namespace detail {

inline WeightedGraph from_counts(std::size_t nodes, const std::map<std::pair<Index, Index>, double>& counts) {
  WeightedGraph g(nodes);
  for (const auto& [key, w] : counts) {
    g.adj[key.first].push_back({key.second, w});
    g.adj[key.second].push_back({key.first, w});
  }
  for (auto& row : g.adj) std::sort(row.begin(), row.end(), [](auto& a, auto& b) { return a.to < b.to; });
  return g;
}

}  // namespace detail

/// A_ij = number of sessions containing both i and j (set semantics inside
/// a session). `nodes` is the item vocabulary size including PAD.
inline WeightedGraph build_adjacency(const std::vector<std::vector<Index>>& sessions, std::size_t nodes) {
  std::map<std::pair<Index, Index>, double> counts;
  for (const auto& s : sessions) {
    std::vector<Index> u(s.begin(), s.end());
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    for (auto id : u) {
      if (id == kPad || id >= nodes) throw DataError("session references invalid item id " + std::to_string(id));
    }
    for (std::size_t a = 0; a < u.size(); ++a) {
      for (std::size_t b = a + 1; b < u.size(); ++b) counts[{u[a], u[b]}] += 1.0;
    }
  }
  return detail::from_counts(nodes, counts);
}

inline WeightedGraph build_adjacency(const std::vector<SessionSequence>& sessions, std::size_t nodes) {
  std::vector<std::vector<Index>> items;
  items.reserve(sessions.size());
  for (const auto& s : sessions) items.push_back(s.items);
  return build_adjacency(items, nodes);
}

/// Substitution records as two-item sessions.
inline WeightedGraph build_adjacency(const std::vector<SubstitutionPair>& pairs, std::size_t nodes) {
  std::vector<std::vector<Index>> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back({p.accepted_for, p.substitute});
  return build_adjacency(items, nodes);
}

/// D^{-1/2} A D^{-1/2}; isolated nodes keep an empty row.
inline WeightedGraph normalize_adjacency(const WeightedGraph& a) {
  std::vector<double> deg(a.nodes());
  for (Index i = 0; i < a.nodes(); ++i) deg[i] = a.degree(i);
  WeightedGraph out(a.nodes());
  for (Index i = 0; i < a.nodes(); ++i) {
    for (const auto& e : a.adj[i]) {
      if (e.weight < 0.0) throw DataError("negative adjacency weight");
      out.adj[i].push_back({e.to, e.weight / std::sqrt(deg[i] * deg[e.to])});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Second-order random walks.

struct WalkConfig {
  std::size_t walks_per_node = 10;
  std::size_t walk_length = 10;
  double p = 1.0;  // return
  double q = 1.0;  // in-out
  std::uint64_t seed = 7;

  void validate() const {
    if (!(p > 0.0) || !(q > 0.0)) throw UsageError("walk parameters p and q must be positive");
  }
};

/// Next-step distribution from `cur` having arrived from `prev` (kPad for the
/// first step): weight w(cur, x) scaled by 1/p if x == prev, 1 if x is a
/// neighbor of prev, 1/q otherwise. Probabilities sum to 1.
inline std::vector<std::pair<Index, double>> transition_probabilities(const WeightedGraph& g, Index prev, Index cur,
                                                                      double p, double q) {
  std::vector<std::pair<Index, double>> out;
  double total = 0.0;
  for (const auto& e : g.adj.at(cur)) {
    double w = e.weight;
    if (prev != kPad) {
      if (e.to == prev) {
        w /= p;
      } else if (!g.has_edge(prev, e.to)) {
        w /= q;
      }
    }
    out.emplace_back(e.to, w);
    total += w;
  }
  if (total > 0.0) {
    for (auto& [id, w] : out) w /= total;
  }
  return out;
}

/// visits[source][node] = times node was visited by walks from source,
/// excluding the source itself.
using VisitCounts = std::vector<std::map<Index, std::size_t>>;

inline std::vector<Index> random_walk(const WeightedGraph& g, Index source, const WalkConfig& cfg, Rng& rng) {
  std::vector<Index> walk{source};
  Index prev = kPad;
  Index cur = source;
  while (walk.size() < cfg.walk_length + 1) {
    auto probs = transition_probabilities(g, prev, cur, cfg.p, cfg.q);
    if (probs.empty()) break;
    double u = rng.uniform();
    Index next = probs.back().first;
    for (const auto& [id, pr] : probs) {
      u -= pr;
      if (u < 0.0) {
        next = id;
        break;
      }
    }
    walk.push_back(next);
    prev = cur;
    cur = next;
  }
  return walk;
}

/// Walks from every node with an independent RNG stream per source, so
/// results do not depend on traversal order.
inline VisitCounts biased_random_walk(const WeightedGraph& g, const WalkConfig& cfg) {
  cfg.validate();
  VisitCounts visits(g.nodes());
  for (Index s = 1; s < g.nodes(); ++s) {
    if (g.adj[s].empty()) continue;
    Rng rng(derive_seed(cfg.seed, s));
    for (std::size_t w = 0; w < cfg.walks_per_node; ++w) {
      auto walk = random_walk(g, s, cfg, rng);
      for (std::size_t k = 1; k < walk.size(); ++k) {
        if (walk[k] != s) ++visits[s][walk[k]];
      }
    }
  }
  return visits;
}

// ---------------------------------------------------------------------------
// Relation graphs.

struct Neighbor {
  Index id;
  double score;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct RelationGraph {
  std::string relation;
  std::vector<std::vector<Neighbor>> neighbors;  // indexed by node

  friend bool operator==(const RelationGraph&, const RelationGraph&) = default;
};

inline constexpr std::size_t kDefaultTopK = 20;

/// Per node, the K most visited nodes; ties go to the smaller id.
inline RelationGraph topk_neighbors(const VisitCounts& visits, std::string relation, std::size_t k = kDefaultTopK) {
  if (k == 0) throw UsageError("top-K needs K >= 1");
  RelationGraph g{std::move(relation), std::vector<std::vector<Neighbor>>(visits.size())};
  for (Index s = 0; s < visits.size(); ++s) {
    std::vector<Neighbor> cand;
    for (const auto& [id, n] : visits[s]) {
      if (id != s) cand.push_back({id, static_cast<double>(n)});
    }
    std::sort(cand.begin(), cand.end(),
              [](const Neighbor& a, const Neighbor& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; });
    if (cand.size() > k) cand.resize(k);
    g.neighbors[s] = std::move(cand);
  }
  return g;
}

struct Triple {
  Index head = kPad;
  std::string relation;
  Index tail = kPad;
  friend bool operator==(const Triple&, const Triple&) = default;
};

inline std::vector<Triple> to_triples(const RelationGraph& g) {
  std::vector<Triple> out;
  for (Index h = 0; h < g.neighbors.size(); ++h) {
    for (const auto& n : g.neighbors[h]) out.push_back({h, g.relation, n.id});
  }
  return out;
}

/// head<TAB>relation<TAB>tail with item keys, one line per neighbor fact.
inline void export_prg(std::span<const RelationGraph> graphs, const Vocabulary& items,
                       const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& g : graphs) {
    for (const auto& t : to_triples(g)) out << items.key(t.head) << '\t' << t.relation << '\t' << items.key(t.tail) << '\n';
  }
}

inline std::vector<Triple> read_triples(const std::filesystem::path& file, const Vocabulary& items) {
  std::vector<Triple> out;
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    if (f.size() != 3) throw DataError(detail::where(file, n) + ": expected head<TAB>relation<TAB>tail");
    auto h = items.find(f[0]), t = items.find(f[2]);
    if (!h || !t) throw DataError(detail::where(file, n) + ": unknown item");
    out.push_back({*h, f[1], *t});
  }
  return out;
}

/// Largest |eigenvalue| of a symmetric graph operator by power iteration.
inline double spectral_radius(const WeightedGraph& g, std::size_t iterations = 500, std::uint64_t seed = 1) {
  Rng rng(seed);
  Vec x(g.nodes());
  for (auto& v : x) v = rng.uniform(0.5, 1.0);
  double lambda = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    Vec y(g.nodes(), 0.0);
    for (Index i = 0; i < g.nodes(); ++i) {
      for (const auto& e : g.adj[i]) y[i] += e.weight * x[e.to];
    }
    const double n = norm(y);
    if (n == 0.0) return 0.0;
    lambda = n / norm(x);
    for (std::size_t i = 0; i < y.size(); ++i) x[i] = y[i] / n;
  }
  return lambda;
}

// ---------------------------------------------------------------------------
// Walk parameter tuning.

/// Hit rate of held-out edges: fraction of (u, v) whose v is in u's top-10.
inline double link_hit_rate(const RelationGraph& g, std::span<const std::pair<Index, Index>> holdout,
                            std::size_t cutoff = 10) {
  if (holdout.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [u, v] : holdout) {
    const auto& ns = g.neighbors.at(u);
    for (std::size_t k = 0; k < std::min(cutoff, ns.size()); ++k) {
      if (ns[k].id == v) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(holdout.size());
}

struct WalkTuning {
  double p = 1.0;
  double q = 1.0;
  double hit_rate = 0.0;
};

/// Grid search over (p, q) by hold-out link prediction; the first best
/// grid point wins ties.
inline WalkTuning tune_walk(const WeightedGraph& train_graph, std::span<const std::pair<Index, Index>> holdout,
                            std::span<const double> grid, WalkConfig cfg, std::size_t k = kDefaultTopK) {
  WalkTuning best{cfg.p, cfg.q, -1.0};
  auto norm_graph = normalize_adjacency(train_graph);
  for (double p : grid) {
    for (double q : grid) {
      cfg.p = p;
      cfg.q = q;
      auto g = topk_neighbors(biased_random_walk(norm_graph, cfg), "tune", k);
      const double h = link_hit_rate(g, holdout);
      if (h > best.hit_rate) best = {p, q, h};
    }
  }
  return best;
}

struct PrgConfig {
  WalkConfig walk;
  std::size_t top_k = kDefaultTopK;
};

inline constexpr const char* kRelComplement = "complement";
inline constexpr const char* kRelCoView = "co_view";
inline constexpr const char* kRelSubstitute = "substitute";

/// G_buy, G_view, G_subs from the (training) records.
inline std::vector<RelationGraph> build_prg(const std::vector<SessionSequence>& buy,
                                            const std::vector<SessionSequence>& view,
                                            const std::vector<SubstitutionPair>& subs, std::size_t n_items,
                                            const PrgConfig& cfg = {}) {
  std::vector<RelationGraph> out;
  auto one = [&](const WeightedGraph& a, const char* rel) {
    out.push_back(topk_neighbors(biased_random_walk(normalize_adjacency(a), cfg.walk), rel, cfg.top_k));
  };
  one(build_adjacency(buy, n_items), kRelComplement);
  one(build_adjacency(view, n_items), kRelCoView);
  one(build_adjacency(subs, n_items), kRelSubstitute);
  return out;
}

}  // namespace pkge
