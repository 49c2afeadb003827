#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pkge/baselines.hpp"
#include "pkge/prg.hpp"
#include "pkge/trainer.hpp"

namespace pkge {

enum class Relation { substitute, complement, co_view, search, describe, isa, recommend };

inline constexpr std::array<Relation, 7> kAllRelations = {Relation::substitute, Relation::complement,
                                                          Relation::co_view,    Relation::search,
                                                          Relation::describe,   Relation::isa,
                                                          Relation::recommend};

inline const char* to_string(Relation r) {
  switch (r) {
    case Relation::substitute: return "substitute";
    case Relation::complement: return "complement";
    case Relation::co_view: return "co_view";
    case Relation::search: return "search";
    case Relation::describe: return "describe";
    case Relation::isa: return "isa";
    case Relation::recommend: return "recommend";
  }
  return "?";
}

inline Relation relation_from_string(const std::string& s) {
  for (auto r : kAllRelations) {
    if (s == to_string(r)) return r;
  }
  throw UsageError("unknown relation '" + s + "'");
}

// ---------------------------------------------------------------------------
// Ranking.

inline constexpr double kNoScore = -std::numeric_limits<double>::infinity();

struct RankingResult {
  std::string query;
  std::vector<Index> ids;  // best first
  Vec scores;
  std::vector<Index> gold;
  std::vector<std::size_t> gold_ranks;  // 1-based, one per gold
};

/// Every non-PAD item id not in `exclude`.
inline std::vector<Index> item_candidates(std::size_t n_items, std::span<const Index> exclude = {}) {
  std::vector<Index> out;
  for (Index i = 1; i < n_items; ++i) {
    if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) out.push_back(i);
  }
  return out;
}

/// Orders `candidates` by score (indexed by id), ties by ascending id.
inline RankingResult rank_candidates(std::span<const double> scores_by_id, std::vector<Index> candidates,
                                     std::vector<Index> gold, std::string query = {}) {
  for (auto c : candidates) {
    if (c >= scores_by_id.size()) throw UsageError("candidate id out of range");
  }
  std::sort(candidates.begin(), candidates.end(), [&](Index a, Index b) {
    const double sa = scores_by_id[a], sb = scores_by_id[b];
    return sa > sb || (sa == sb && a < b);
  });
  RankingResult r{std::move(query), std::move(candidates), {}, std::move(gold), {}};
  r.scores.reserve(r.ids.size());
  for (auto c : r.ids) r.scores.push_back(scores_by_id[c]);
  for (auto g : r.gold) {
    auto it = std::find(r.ids.begin(), r.ids.end(), g);
    if (it == r.ids.end()) throw UsageError("gold id " + std::to_string(g) + " is not a candidate");
    r.gold_ranks.push_back(static_cast<std::size_t>(it - r.ids.begin()) + 1);
  }
  return r;
}

namespace detail {

inline Vec scores_against(std::span<const double> q, const EmbeddingTable& table) {
  Vec s(table.rows(), kNoScore);
  for (Index c = 1; c < table.rows(); ++c) s[c] = dot(q, table.row(c));
  return s;
}

inline void check_head(std::span<const Index> head, std::size_t rows, const char* what) {
  if (head.empty()) throw UsageError(std::string("empty ") + what + " head");
  for (auto h : head) {
    if (h == kPad || h >= rows) throw UsageError(std::string("unknown ") + what + " id " + std::to_string(h));
  }
}

}  // namespace detail

/// Scores of every item as the tail of (head, rel, ?), indexed by item id.
/// Single-entity relations take one id; search/describe take word ids and
/// recommend takes a session prefix of kind `kind`.
inline Vec pkg_scores(const PkgModel& m, Relation rel, std::span<const Index> head,
                      SessionKind kind = SessionKind::buy) {
  auto single = [&](const EmbeddingTable& source, const char* what) {
    detail::check_head(head, source.rows(), what);
    if (head.size() != 1) throw UsageError(std::string(to_string(rel)) + " takes a single head");
    return source.row(head[0]);
  };
  switch (rel) {
    case Relation::substitute: return detail::scores_against(single(m.z_in, "item"), m.z_in);
    case Relation::complement: return detail::scores_against(single(m.z_in, "item"), m.z_buy_out);
    case Relation::co_view: return detail::scores_against(single(m.z_in, "item"), m.z_view_out);
    case Relation::isa: return detail::scores_against(single(m.categories, "category"), m.z_in);
    case Relation::search:
    case Relation::describe: {
      detail::check_head(head, m.words.rows(), "word");
      const Task t = rel == Relation::search ? Task::search : Task::describe;
      auto c = aggregate_context(head, m.words, m.words, m.attention(t)).context;
      return detail::scores_against(c, m.z_in);
    }
    case Relation::recommend: {
      detail::check_head(head, m.z_in.rows(), "item");
      const Task t = kind == SessionKind::buy ? Task::complement : Task::co_view;
      auto c = aggregate_context(head, m.z_in, m.table(wiring(t).key), m.attention(t)).context;
      Vec s(m.z_in.rows(), kNoScore);
      for (Index i = 1; i < m.z_in.rows(); ++i) s[i] = dot(c, m.z_buy_out.row(i)) + dot(c, m.z_view_out.row(i));
      return s;
    }
  }
  throw UsageError("unknown relation");
}

inline RankingResult rank_tail(const PkgModel& m, Relation rel, std::span<const Index> head, std::vector<Index> gold,
                               std::span<const Index> exclude = {}, SessionKind kind = SessionKind::buy) {
  auto s = pkg_scores(m, rel, head, kind);
  return rank_candidates(s, item_candidates(m.z_in.rows(), exclude), std::move(gold), to_string(rel));
}

/// KG tail scores over `tails`, indexed by entity id.
inline Vec kg_scores(const KgModel& m, std::size_t relation, Index head, SlotRange tails) {
  Vec s(tails.end, kNoScore);
  for (Index t = tails.begin; t < tails.end; ++t) s[t] = kg_score(m, head, relation, t);
  return s;
}

/// Scores for a head given as the average of several entities (word
/// queries). Row 0 of `scratch` (the unused PAD entity) holds the average.
inline Vec kg_average_scores(KgModel& scratch, std::size_t relation, std::span<const Index> heads, SlotRange tails) {
  if (heads.empty()) throw UsageError("empty averaged head");
  auto avg = [&](Matrix& table) {
    if (table.empty()) return;
    auto row = table.row(0);
    std::fill(row.begin(), row.end(), 0.0);
    for (auto h : heads) axpy(1.0 / static_cast<double>(heads.size()), table.row(h), row);
  };
  avg(scratch.ent);
  avg(scratch.ent_proj);
  return kg_scores(scratch, relation, 0, tails);
}

// ---------------------------------------------------------------------------
// Metrics.

struct RankingMetrics {
  double hit = 0.0;
  double ndcg = 0.0;
  double recall = 0.0;
  double map = 0.0;
  std::size_t queries = 0;
};

/// HIT@K, NDCG@K, R@K, MAP@K averaged over queries. With one gold NDCG is
/// 1/log2(rank + 1) and MAP is 1/rank inside the cutoff.
inline RankingMetrics ranking_metrics(std::span<const RankingResult> results, int k = 10) {
  if (k <= 0) throw UsageError("metric cutoff K must be positive");
  if (results.empty()) throw UsageError("ranking_metrics: no results");
  const auto K = static_cast<std::size_t>(k);
  RankingMetrics m;
  for (const auto& r : results) {
    if (r.gold_ranks.empty()) throw UsageError("query without gold");
    std::vector<std::size_t> ranks = r.gold_ranks;
    std::sort(ranks.begin(), ranks.end());
    double dcg = 0.0, idcg = 0.0, ap = 0.0;
    std::size_t in_top = 0;
    for (std::size_t j = 0; j < ranks.size(); ++j) {
      if (j < K) idcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
      if (ranks[j] > K) continue;
      ++in_top;
      dcg += 1.0 / std::log2(static_cast<double>(ranks[j]) + 1.0);
      ap += static_cast<double>(in_top) / static_cast<double>(ranks[j]);
    }
    m.hit += ranks.front() <= K ? 1.0 : 0.0;
    m.ndcg += dcg / idcg;
    m.recall += static_cast<double>(in_top) / static_cast<double>(ranks.size());
    m.map += ap / static_cast<double>(std::min(ranks.size(), K));
  }
  const auto n = static_cast<double>(results.size());
  m.hit /= n;
  m.ndcg /= n;
  m.recall /= n;
  m.map /= n;
  m.queries = results.size();
  return m;
}

/// Ground-truth scoring: every (head, gold) pair is one query, the head is
/// not a candidate and the other golds stay in the list.
inline RankingMetrics truth_metrics(const std::function<Vec(Index)>& scores, const std::map<Index, std::vector<Index>>& truth,
                                    std::size_t n_items, int k = 10, std::size_t max_heads = 0) {
  std::vector<RankingResult> results;
  std::size_t heads = 0;
  for (const auto& [h, golds] : truth) {
    if (golds.empty()) continue;
    if (max_heads && heads++ >= max_heads) break;
    auto s = scores(h);
    const Index excl[] = {h};
    auto cands = item_candidates(n_items, excl);
    std::sort(cands.begin(), cands.end(), [&](Index a, Index b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    for (auto g : golds) {
      if (g == h) continue;
      RankingResult r;
      r.gold = {g};
      r.gold_ranks = {static_cast<std::size_t>(std::find(cands.begin(), cands.end(), g) - cands.begin()) + 1};
      results.push_back(std::move(r));
    }
  }
  if (results.empty()) return {};
  return ranking_metrics(results, k);
}

// ---------------------------------------------------------------------------
// Classification probe.

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<std::string> warnings;
};

/// Micro-F1 from global TP/FP/FN; macro-F1 averages per-class F1 over the
/// classes seen in gold or predictions, minus those absent from training.
inline F1Scores f1_scores(std::span<const Index> gold, std::span<const Index> pred, const std::set<Index>& train_classes) {
  if (gold.size() != pred.size()) throw UsageError("gold and prediction sizes differ");
  std::map<Index, std::array<std::size_t, 3>> c;  // tp, fp, fn
  std::size_t tp = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == pred[i]) {
      ++c[gold[i]][0];
      ++tp;
    } else {
      ++c[pred[i]][1];
      ++c[gold[i]][2];
    }
  }
  F1Scores out;
  const std::size_t n = gold.size();
  // Single-label: FP total = FN total = n - TP.
  out.micro = n ? static_cast<double>(2 * tp) / static_cast<double>(2 * tp + 2 * (n - tp)) : 0.0;
  double sum = 0.0;
  std::size_t classes = 0;
  for (const auto& [label, v] : c) {
    if (!train_classes.count(label)) {
      out.warnings.push_back("class " + std::to_string(label) + " absent from training; excluded from macro-F1");
      continue;
    }
    const double denom = static_cast<double>(2 * v[0] + v[1] + v[2]);
    sum += denom > 0 ? 2.0 * static_cast<double>(v[0]) / denom : 0.0;
    ++classes;
  }
  out.macro = classes ? sum / static_cast<double>(classes) : 0.0;
  return out;
}

struct LabeledRow {
  Index item = kPad;
  Index label = kPad;
};

struct ProbeConfig {
  double lambda = 1e-4;
  double lr = 0.5;
  std::size_t iterations = 300;
};

/// Multinomial logistic regression on standardized rows of `features`,
/// full-batch gradient descent with L2 on the weights. Rows are sorted by
/// (item, label) first so input order does not change the result.
inline F1Scores classification_probe(const Matrix& features, std::vector<LabeledRow> train, std::vector<LabeledRow> test,
                                     const ProbeConfig& cfg = {}) {
  if (train.empty() || test.empty()) throw DataError("classification probe needs train and test rows");
  auto by_item = [](const LabeledRow& a, const LabeledRow& b) { return a.item < b.item || (a.item == b.item && a.label < b.label); };
  std::sort(train.begin(), train.end(), by_item);
  std::sort(test.begin(), test.end(), by_item);
  const std::size_t d = features.cols();

  std::set<Index> class_set;
  for (const auto& r : train) class_set.insert(r.label);
  const std::vector<Index> classes(class_set.begin(), class_set.end());
  std::map<Index, std::size_t> cls;
  for (std::size_t k = 0; k < classes.size(); ++k) cls[classes[k]] = k;
  const std::size_t C = classes.size();

  Vec mean(d, 0.0), sd(d, 0.0);
  for (const auto& r : train) axpy(1.0, features.row(r.item), mean);
  for (auto& v : mean) v /= static_cast<double>(train.size());
  for (const auto& r : train) {
    auto x = features.row(r.item);
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
  }
  for (auto& v : sd) v = std::sqrt(v / static_cast<double>(train.size())) + 1e-12;
  auto standardized = [&](Index item) {
    Vec x(d + 1, 1.0);  // trailing bias feature
    auto f = features.row(item);
    for (std::size_t j = 0; j < d; ++j) x[j] = (f[j] - mean[j]) / sd[j];
    return x;
  };
  std::vector<Vec> xs;
  for (const auto& r : train) xs.push_back(standardized(r.item));

  Matrix w(C, d + 1);
  Matrix grad(C, d + 1);
  Vec p(C);
  auto probs = [&](const Vec& x) {
    double mx = kNoScore;
    for (std::size_t k = 0; k < C; ++k) mx = std::max(mx, p[k] = dot(w.row(k), x));
    double z = 0.0;
    for (auto& v : p) z += (v = std::exp(v - mx));
    for (auto& v : p) v /= z;
  };
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    grad.fill(0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      probs(xs[i]);
      p[cls[train[i].label]] -= 1.0;
      for (std::size_t k = 0; k < C; ++k) axpy(p[k] / static_cast<double>(xs.size()), xs[i], grad.row(k));
    }
    for (std::size_t k = 0; k < C; ++k) {
      auto wr = w.row(k);
      auto gr = grad.row(k);
      for (std::size_t j = 0; j < d; ++j) gr[j] += cfg.lambda * wr[j];
      axpy(-cfg.lr, gr, wr);
    }
  }

  std::vector<Index> gold, pred;
  for (const auto& r : test) {
    probs(standardized(r.item));
    std::size_t best = 0;
    for (std::size_t k = 1; k < C; ++k) {
      if (p[k] > p[best]) best = k;
    }
    gold.push_back(r.label);
    pred.push_back(classes[best]);
  }
  return f1_scores(gold, pred, class_set);
}

// ---------------------------------------------------------------------------
// PRG edge split and leakage guard.

struct EdgeSplit {
  std::vector<Triple> train;
  std::vector<Triple> validation;
  std::vector<Triple> test;
  std::size_t moved = 0;  // held-out edges returned to train
};

/// Seeded 80/10/10 split of the triples. A node that appears only in held-out
/// edges gets its smallest (head, tail) held-out edge moved back to train,
/// node by node in ascending id order.
inline EdgeSplit split_edges(std::vector<Triple> triples, SplitFractions f, std::uint64_t seed) {
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) throw UsageError("split fractions must sum to 1");
  auto key = [](const Triple& t) { return std::tuple(t.head, t.tail, t.relation); };
  std::sort(triples.begin(), triples.end(), [&](const Triple& a, const Triple& b) { return key(a) < key(b); });
  Rng rng(derive_seed(seed, 0xed9e));
  rng.shuffle(triples);
  const auto n = triples.size();
  const auto n_val = static_cast<std::size_t>(std::floor(f.validation * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(f.test * static_cast<double>(n) + 1e-9));
  EdgeSplit s;
  s.train.assign(triples.begin(), triples.end() - static_cast<std::ptrdiff_t>(n_val + n_test));
  s.validation.assign(triples.end() - static_cast<std::ptrdiff_t>(n_val + n_test),
                      triples.end() - static_cast<std::ptrdiff_t>(n_test));
  s.test.assign(triples.end() - static_cast<std::ptrdiff_t>(n_test), triples.end());

  std::map<Index, std::size_t> degree;
  for (const auto& t : s.train) {
    ++degree[t.head];
    ++degree[t.tail];
  }
  std::set<Index> held_nodes;
  for (const auto* part : {&s.validation, &s.test}) {
    for (const auto& t : *part) {
      held_nodes.insert(t.head);
      held_nodes.insert(t.tail);
    }
  }
  for (auto node : held_nodes) {
    if (degree[node] > 0) continue;
    std::vector<Triple>* from = nullptr;
    std::size_t pos = 0;
    for (auto* part : {&s.validation, &s.test}) {
      for (std::size_t i = 0; i < part->size(); ++i) {
        const auto& t = (*part)[i];
        if (t.head != node && t.tail != node) continue;
        if (!from || key(t) < key((*from)[pos])) {
          from = part;
          pos = i;
        }
      }
    }
    const Triple t = (*from)[pos];
    from->erase(from->begin() + static_cast<std::ptrdiff_t>(pos));
    ++degree[t.head];
    ++degree[t.tail];
    s.train.push_back(t);
    ++s.moved;
  }
  return s;
}

struct LeakReport {
  std::size_t buy_sessions = 0;
  std::size_t view_sessions = 0;
  std::size_t substitutions = 0;
};

/// Drops training records that reveal a held-out edge: buy (view) sessions
/// holding both ends of a complement (co_view) edge, and substitution
/// records of a held-out substitute pair in either direction.
inline Dataset guard_leaks(Dataset ds, std::span<const Triple> held_out, LeakReport* report = nullptr) {
  std::set<std::pair<Index, Index>> comp, view, sub;
  for (const auto& t : held_out) {
    auto e = std::minmax(t.head, t.tail);
    if (t.relation == kRelComplement) comp.insert(e);
    else if (t.relation == kRelCoView) view.insert(e);
    else if (t.relation == kRelSubstitute) sub.insert(e);
  }
  auto reveals = [](const SessionSequence& s, const std::set<std::pair<Index, Index>>& edges) {
    if (edges.empty()) return false;
    std::set<Index> items(s.items.begin(), s.items.end());
    for (auto a : items) {
      for (auto it = edges.lower_bound({a, 0}); it != edges.end() && it->first == a; ++it) {
        if (items.count(it->second)) return true;
      }
    }
    return false;
  };
  LeakReport r;
  r.buy_sessions = std::erase_if(ds.buy, [&](const SessionSequence& s) { return reveals(s, comp); });
  r.view_sessions = std::erase_if(ds.view, [&](const SessionSequence& s) { return reveals(s, view); });
  r.substitutions = std::erase_if(ds.substitutions, [&](const SubstitutionPair& p) {
    return sub.count(std::minmax(p.accepted_for, p.substitute)) > 0;
  });
  if (report) *report = r;
  return ds;
}

// ---------------------------------------------------------------------------
// Full protocol.

struct ReportRow {
  std::string model;
  std::string task;
  std::string metric;
  std::optional<double> value;  // absent when the task has no test queries
  std::size_t queries = 0;
};

struct MetricsReport {
  std::uint64_t seed = 0;
  std::vector<ReportRow> rows;

  std::optional<double> find(const std::string& model, const std::string& task, const std::string& metric) const {
    for (const auto& r : rows) {
      if (r.model == model && r.task == task && r.metric == metric) return r.value;
    }
    return std::nullopt;
  }
};

struct EvalConfig {
  int k = 10;
  std::size_t max_queries = 0;  // 0: every test query
  std::uint64_t seed = 7;
  ProbeConfig probe;
};

/// Everything evaluation reads. Either model may be absent; `kg_space` maps
/// items and words into the KG entity ids.
struct EvalInputs {
  const TrainingData* data = nullptr;
  std::vector<Triple> prg_test;  // item-level held-out PRG edges
  const PkgModel* pkg = nullptr;
  const KgModel* kg = nullptr;
  std::string kg_name = "transE";
  EntitySpace kg_space;
};

namespace detail {

template <typename T>
std::vector<T> evenly(const std::vector<T>& v, std::size_t max) {
  if (!max || v.size() <= max) return v;
  std::vector<T> out;
  for (std::size_t q = 0; q < max; ++q) out.push_back(v[q * v.size() / max]);
  return out;
}

inline void add_metrics(MetricsReport& rep, const std::string& model, const std::string& task,
                        const std::vector<RankingResult>& results, int k) {
  const std::string K = std::to_string(k);
  if (results.empty()) {
    for (const char* m : {"HIT@", "NDCG@", "R@", "MAP@"}) rep.rows.push_back({model, task, m + K, std::nullopt, 0});
    return;
  }
  auto m = ranking_metrics(results, k);
  rep.rows.push_back({model, task, "HIT@" + K, m.hit, m.queries});
  rep.rows.push_back({model, task, "NDCG@" + K, m.ndcg, m.queries});
  rep.rows.push_back({model, task, "R@" + K, m.recall, m.queries});
  rep.rows.push_back({model, task, "MAP@" + K, m.map, m.queries});
}

inline std::vector<Index> sorted_words(std::vector<Index> w) {
  std::sort(w.begin(), w.end());
  return w;
}

}  // namespace detail

/// Knowledge completion on held-out PRG edges, search split into encountered
/// and new queries, next-impression recommendation over buy and view test
/// sessions, and the IsA classification probe on the held-out catalog.
inline MetricsReport evaluate_all(const EvalInputs& in, const EvalConfig& cfg = {}) {
  if (!in.data) throw DataError("evaluation needs training data (run ingest first)");
  if (!in.pkg && !in.kg) throw DataError("no trained model found: run `train` or `train-baseline` first");
  MetricsReport rep;
  rep.seed = cfg.seed;
  const auto& data = *in.data;
  const std::size_t n_items = data.n_items;

  std::map<std::string, std::vector<Triple>> edges;
  for (const auto& t : in.prg_test) edges[t.relation].push_back(t);
  for (auto& [rel, v] : edges) v = detail::evenly(v, cfg.max_queries);

  // Search queries: encountered iff the word multiset occurred in training.
  std::set<std::vector<Index>> seen;
  for (const auto& e : data.at(Task::search).train.sequences) seen.insert(detail::sorted_words(e.context));
  std::vector<SeqExample> encountered, fresh;
  for (const auto& e : data.at(Task::search).test.sequences) {
    (seen.count(detail::sorted_words(e.context)) ? encountered : fresh).push_back(e);
  }
  encountered = detail::evenly(encountered, cfg.max_queries);
  fresh = detail::evenly(fresh, cfg.max_queries);

  std::vector<LabeledRow> isa_train, isa_test;
  for (const auto& e : data.at(Task::isa).train.labels) isa_train.push_back({e.item, e.labels.front()});
  for (const auto& e : data.at(Task::isa).test.labels) isa_test.push_back({e.item, e.labels.front()});

  if (in.pkg) {
    const auto& m = *in.pkg;
    const std::string name = "pkge";
    for (auto rel : {Relation::complement, Relation::co_view, Relation::substitute}) {
      std::vector<RankingResult> res;
      for (const auto& t : edges[to_string(rel)]) {
        const Index head[] = {t.head};
        res.push_back(rank_tail(m, rel, head, {t.tail}, head));
      }
      detail::add_metrics(rep, name, to_string(rel), res, cfg.k);
    }
    for (auto [label, part] : {std::pair{"search_encountered", &encountered}, std::pair{"search_new", &fresh}}) {
      std::vector<RankingResult> res;
      for (const auto& e : *part) res.push_back(rank_tail(m, Relation::search, e.context, {e.target}));
      detail::add_metrics(rep, name, label, res, cfg.k);
    }
    std::vector<RankingResult> rec;
    for (auto [task, kind] : {std::pair{Task::complement, SessionKind::buy}, std::pair{Task::co_view, SessionKind::view}}) {
      for (const auto& e : detail::evenly(data.at(task).test.sequences, cfg.max_queries)) {
        rec.push_back(rank_tail(m, Relation::recommend, e.context, {e.target}, {}, kind));
      }
    }
    detail::add_metrics(rep, name, "recommend", rec, cfg.k);
    if (!isa_train.empty() && !isa_test.empty()) {
      auto f1 = classification_probe(m.z_in.values, isa_train, isa_test, cfg.probe);
      rep.rows.push_back({name, "isa", "micro_F1", f1.micro, isa_test.size()});
      rep.rows.push_back({name, "isa", "macro_F1", f1.macro, isa_test.size()});
    } else {
      rep.rows.push_back({name, "isa", "micro_F1", std::nullopt, 0});
      rep.rows.push_back({name, "isa", "macro_F1", std::nullopt, 0});
    }
  }

  if (in.kg) {
    const auto& kg = *in.kg;
    const auto& sp = in.kg_space;
    auto rel_of = [&](const std::string& r) -> std::optional<std::size_t> {
      for (std::size_t k = 0; k < kg.relations.size(); ++k) {
        if (kg.relations[k] == r) return k;
      }
      return std::nullopt;
    };
    for (auto rel : {Relation::complement, Relation::co_view, Relation::substitute}) {
      std::vector<RankingResult> res;
      if (auto r = rel_of(to_string(rel))) {
        for (const auto& t : edges[to_string(rel)]) {
          auto s = kg_scores(kg, *r, sp.item(t.head), sp.items());
          const Index excl[] = {t.head};
          res.push_back(rank_candidates(s, item_candidates(n_items, excl), {t.tail}, to_string(rel)));
        }
      }
      detail::add_metrics(rep, in.kg_name, to_string(rel), res, cfg.k);
    }
    auto search = rel_of("search");
    KgModel scratch = search ? kg : KgModel{};
    for (auto [label, part] : {std::pair{"search_encountered", &encountered}, std::pair{"search_new", &fresh}}) {
      std::vector<RankingResult> res;
      if (search) {
        for (const auto& e : *part) {
          std::vector<Index> heads;
          for (auto w : e.context) heads.push_back(sp.word(w));
          auto s = kg_average_scores(scratch, *search, heads, sp.items());
          res.push_back(rank_candidates(s, item_candidates(n_items), {e.target}, label));
        }
      }
      detail::add_metrics(rep, in.kg_name, label, res, cfg.k);
    }
    if (!isa_train.empty() && !isa_test.empty()) {
      auto f1 = classification_probe(kg.ent, isa_train, isa_test, cfg.probe);
      rep.rows.push_back({in.kg_name, "isa", "micro_F1", f1.micro, isa_test.size()});
      rep.rows.push_back({in.kg_name, "isa", "macro_F1", f1.macro, isa_test.size()});
    }
  }
  return rep;
}

/// report.tsv: model, task, metric, value ("NA" when absent), queries.
/// summary.txt: one block per model with values in percent.
inline void write_report(const MetricsReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream tsv(dir / "report.tsv");
  std::ofstream sum(dir / "summary.txt");
  if (!tsv || !sum) throw DataError("cannot write report to " + dir.string());
  char buf[64];
  tsv << "model\ttask\tmetric\tvalue\tqueries\n";
  std::string model;
  for (const auto& r : rep.rows) {
    if (r.value) std::snprintf(buf, sizeof buf, "%.6f", *r.value);
    tsv << r.model << '\t' << r.task << '\t' << r.metric << '\t' << (r.value ? buf : "NA") << '\t' << r.queries << '\n';
    if (r.model != model) {
      model = r.model;
      sum << (sum.tellp() > 0 ? "\n" : "") << "== " << model << " (seed " << rep.seed << ") ==\n";
    }
    if (r.value) std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * *r.value);
    std::string cell = r.task + " " + r.metric;
    cell.resize(std::max<std::size_t>(cell.size(), 32), ' ');
    sum << cell << (r.value ? buf : "    NA") << '\n';
  }
}

}  // namespace pkge
