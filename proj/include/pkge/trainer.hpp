#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pkge/attention.hpp"
#include "pkge/data_model.hpp"
#include "pkge/embedding.hpp"
#include "pkge/poincare.hpp"

namespace pkge {

enum class Task { substitute, complement, co_view, search, describe, isa };

inline constexpr std::array<Task, 6> kAllTasks = {Task::substitute, Task::complement, Task::co_view,
                                                  Task::search,     Task::describe,   Task::isa};

inline const char* to_string(Task t) {
  switch (t) {
    case Task::substitute: return "substitute";
    case Task::complement: return "complement";
    case Task::co_view: return "co_view";
    case Task::search: return "search";
    case Task::describe: return "describe";
    case Task::isa: return "isa";
  }
  return "?";
}

inline Task task_from_string(const std::string& s) {
  for (auto t : kAllTasks) {
    if (s == to_string(t)) return t;
  }
  throw UsageError("unknown task '" + s + "'");
}

inline bool is_sequence_task(Task t) {
  return t == Task::complement || t == Task::co_view || t == Task::search || t == Task::describe;
}

enum class LossKind { pair_ns, sequence_ns, isa_ns };

inline LossKind loss_kind(Task t) {
  if (t == Task::substitute) return LossKind::pair_ns;
  if (t == Task::isa) return LossKind::isa_ns;
  return LossKind::sequence_ns;
}

enum class Schedule { weighted, uniform, single_task };

inline const char* to_string(Schedule s) {
  switch (s) {
    case Schedule::weighted: return "weighted";
    case Schedule::uniform: return "uniform";
    case Schedule::single_task: return "single_task";
  }
  return "?";
}

inline Schedule schedule_from_string(const std::string& s) {
  for (auto v : {Schedule::weighted, Schedule::uniform, Schedule::single_task}) {
    if (s == to_string(v)) return v;
  }
  throw UsageError("unknown schedule '" + s + "'");
}

struct SequenceLengths {
  std::size_t buy = 20;
  std::size_t view = 50;
  std::size_t describe = 200;
  std::size_t search = 10;

  std::size_t of(Task t) const {
    switch (t) {
      case Task::complement: return buy;
      case Task::co_view: return view;
      case Task::describe: return describe;
      case Task::search: return search;
      default: return 0;
    }
  }
};

// ---------------------------------------------------------------------------
// Model.

inline constexpr const char* kItemInput = "Z_I";
inline constexpr const char* kBuyOutput = "Z_BO";
inline constexpr const char* kViewOutput = "Z_VO";
inline constexpr const char* kWords = "W";
inline constexpr const char* kCategories = "C";

/// Table roles for one sequence task: queries/values, keys, scored targets.
struct Wiring {
  const char* input;
  const char* key;
  const char* score;
};

inline Wiring wiring(Task t) {
  switch (t) {
    case Task::complement: return {kItemInput, kBuyOutput, kBuyOutput};
    case Task::co_view: return {kItemInput, kViewOutput, kViewOutput};
    case Task::search:
    case Task::describe: return {kWords, kWords, kItemInput};
    default: throw UsageError(std::string("task '") + to_string(t) + "' has no sequence wiring");
  }
}

struct PkgModel {
  EmbeddingTable z_in;
  EmbeddingTable z_buy_out;
  EmbeddingTable z_view_out;
  EmbeddingTable words;
  EmbeddingTable categories;  // Poincare, frozen during training
  AttentionParams attn_complement;
  AttentionParams attn_co_view;
  AttentionParams attn_search;
  AttentionParams attn_describe;

  static PkgModel init(std::size_t n_items, std::size_t n_words, std::size_t n_categories, std::size_t dim,
                       const SequenceLengths& lengths, std::uint64_t seed) {
    auto s = [&](std::uint64_t k) { return derive_seed(seed, k); };
    return {init_table(kItemInput, n_items, dim, Geometry::euclidean, s(1)),
            init_table(kBuyOutput, n_items, dim, Geometry::euclidean, s(2)),
            init_table(kViewOutput, n_items, dim, Geometry::euclidean, s(3)),
            init_table(kWords, std::max<std::size_t>(n_words, 1), dim, Geometry::euclidean, s(4)),
            init_table(kCategories, std::max<std::size_t>(n_categories, 1), dim, Geometry::poincare, s(5)),
            AttentionParams::init(lengths.buy, dim, s(6)),
            AttentionParams::init(lengths.view, dim, s(7)),
            AttentionParams::init(lengths.search, dim, s(8)),
            AttentionParams::init(lengths.describe, dim, s(9))};
  }

  std::size_t dim() const { return z_in.dim(); }

  EmbeddingTable& table(const std::string& name) {
    return const_cast<EmbeddingTable&>(std::as_const(*this).table(name));
  }
  const EmbeddingTable& table(const std::string& name) const {
    for (const auto* t : {&z_in, &z_buy_out, &z_view_out, &words, &categories}) {
      if (t->name == name) return *t;
    }
    throw UsageError("unknown table '" + name + "'");
  }

  AttentionParams& attention(Task t) { return const_cast<AttentionParams&>(std::as_const(*this).attention(t)); }
  const AttentionParams& attention(Task t) const {
    switch (t) {
      case Task::complement: return attn_complement;
      case Task::co_view: return attn_co_view;
      case Task::search: return attn_search;
      case Task::describe: return attn_describe;
      default: throw UsageError(std::string("task '") + to_string(t) + "' has no attention parameters");
    }
  }

  SequenceTables sequence_tables(Task t) const {
    auto w = wiring(t);
    return {table(w.input), table(w.key), table(w.score)};
  }

  friend bool operator==(const PkgModel&, const PkgModel&) = default;
};

// ---------------------------------------------------------------------------
// Training examples.

struct PairExample {
  Index a = kPad;
  Index b = kPad;
};

struct SeqExample {
  std::vector<Index> context;
  Index target = kPad;
};

struct IsaExample {
  Index item = kPad;
  std::vector<Index> labels;
};

struct TaskExamples {
  std::vector<PairExample> pairs;
  std::vector<SeqExample> sequences;
  std::vector<IsaExample> labels;

  std::size_t size() const { return pairs.size() + sequences.size() + labels.size(); }
  bool empty() const { return size() == 0; }
};

struct TaskData {
  TaskExamples train;
  TaskExamples validation;
  TaskExamples test;
};

struct TrainingData {
  std::map<Task, TaskData> tasks;
  std::vector<double> item_counts;  // training occurrences, drives the negative sampler
  std::size_t n_items = 1;
  std::size_t n_words = 1;
  std::size_t n_categories = 1;

  const TaskData& at(Task t) const {
    static const TaskData empty;
    auto it = tasks.find(t);
    return it == tasks.end() ? empty : it->second;
  }
};

struct DataOptions {
  SequenceLengths lengths;
  SplitFractions fractions;
  std::uint64_t seed = 7;
};

/// Each session of length m yields m - 1 (prefix, next item) examples; the
/// prefix keeps its most recent `l` items.
inline void expand_sessions(const std::vector<SessionSequence>& sessions, std::size_t l,
                            std::vector<SeqExample>& out) {
  for (const auto& s : sessions) {
    for (std::size_t t = 1; t < s.items.size(); ++t) {
      const std::size_t from = t > l ? t - l : 0;
      out.push_back({{s.items.begin() + static_cast<std::ptrdiff_t>(from),
                      s.items.begin() + static_cast<std::ptrdiff_t>(t)},
                     s.items[t]});
    }
  }
}

inline std::vector<Index> last_n(const std::vector<Index>& v, std::size_t l) {
  return v.size() > l ? std::vector<Index>(v.end() - static_cast<std::ptrdiff_t>(l), v.end()) : v;
}

inline TrainingData make_training_data(const Dataset& ds, const DataOptions& opt = {}) {
  TrainingData data;
  data.n_items = ds.vocab.items.size();
  data.n_words = ds.vocab.words.size();
  data.n_categories = ds.vocab.categories.size();

  {
    auto split = chronological_split(ds.substitutions, opt.fractions, true);
    auto& td = data.tasks[Task::substitute];
    auto conv = [](const std::vector<SubstitutionPair>& in, std::vector<PairExample>& out) {
      for (const auto& p : in) out.push_back({p.accepted_for, p.substitute});
    };
    conv(split.train, td.train.pairs);
    conv(split.validation, td.validation.pairs);
    conv(split.test, td.test.pairs);
  }
  for (auto [task, sessions, l] : {std::tuple{Task::complement, &ds.buy, opt.lengths.buy},
                                   std::tuple{Task::co_view, &ds.view, opt.lengths.view}}) {
    auto split = chronological_split(*sessions, opt.fractions, true);
    auto& td = data.tasks[task];
    expand_sessions(split.train, l, td.train.sequences);
    expand_sessions(split.validation, l, td.validation.sequences);
    expand_sessions(split.test, l, td.test.sequences);
  }
  {
    auto split = chronological_split(ds.searches, opt.fractions, true);
    auto& td = data.tasks[Task::search];
    auto conv = [&](const std::vector<SearchRecord>& in, std::vector<SeqExample>& out) {
      for (const auto& r : in) out.push_back({last_n(r.query_words, opt.lengths.search), r.clicked_item});
    };
    conv(split.train, td.train.sequences);
    conv(split.validation, td.validation.sequences);
    conv(split.test, td.test.sequences);
  }
  {
    // The catalog has no timestamps: a seeded permutation splits it.
    std::vector<std::size_t> order(ds.catalog.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(opt.seed, 0xca7a));
    rng.shuffle(order);
    const auto n = order.size();
    const auto n_val = static_cast<std::size_t>(std::floor(opt.fractions.validation * static_cast<double>(n) + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(opt.fractions.test * static_cast<double>(n) + 1e-9));
    auto& desc = data.tasks[Task::describe];
    auto& isa = data.tasks[Task::isa];
    for (std::size_t k = 0; k < n; ++k) {
      const auto& e = ds.catalog[order[k]];
      const bool train = k < n - n_val - n_test;
      const bool val = !train && k < n - n_test;
      auto& dpart = train ? desc.train : val ? desc.validation : desc.test;
      auto& ipart = train ? isa.train : val ? isa.validation : isa.test;
      if (!e.description.empty()) dpart.sequences.push_back({last_n(e.description, opt.lengths.describe), e.item});
      if (!e.category_path.empty()) ipart.labels.push_back({e.item, e.category_path});
    }
  }

  data.item_counts.assign(data.n_items, 0.0);
  const auto& sub = data.tasks[Task::substitute].train.pairs;
  for (const auto& p : sub) {
    data.item_counts[p.a] += 1;
    data.item_counts[p.b] += 1;
  }
  for (auto t : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    for (const auto& e : data.tasks[t].train.sequences) data.item_counts[e.target] += 1;
  }
  for (const auto& e : data.tasks[Task::isa].train.labels) data.item_counts[e.item] += 1;
  return data;
}

// ---------------------------------------------------------------------------
// Task specs and sampling.

struct TaskSpec {
  Task name = Task::substitute;
  LossKind loss = LossKind::pair_ns;
  std::size_t max_len = 0;
  std::size_t n = 0;
};

/// One spec per task with at least one training example.
inline std::vector<TaskSpec> make_specs(const TrainingData& data, const SequenceLengths& lengths = {}) {
  std::vector<TaskSpec> specs;
  for (auto t : kAllTasks) {
    const auto n = data.at(t).train.size();
    if (n > 0) specs.push_back({t, loss_kind(t), lengths.of(t), n});
  }
  return specs;
}

/// P(task) = n_task / sum n.
inline Task sample_task(std::span<const TaskSpec> specs, Rng& rng) {
  if (specs.empty()) throw UsageError("sample_task: no active task");
  double total = 0.0;
  for (const auto& s : specs) total += static_cast<double>(s.n);
  if (!(total > 0.0)) throw UsageError("sample_task: all task sizes are zero");
  double u = rng.uniform() * total;
  for (const auto& s : specs) {
    u -= static_cast<double>(s.n);
    if (u < 0.0) return s.name;
  }
  return specs.back().name;
}

inline Task sample_task(std::span<const TaskSpec> specs, Schedule schedule, Rng& rng) {
  if (schedule == Schedule::uniform) {
    if (specs.empty()) throw UsageError("sample_task: no active task");
    return specs[rng.below(specs.size())].name;
  }
  return sample_task(specs, rng);
}

// ---------------------------------------------------------------------------
// Losses.

struct StepGrads {
  double loss = 0.0;
  TableGradSet tables;
  std::optional<AttentionParams> attention;
};

/// Symmetric substitution loss: b predicts a against `neg_ab`, and a
/// predicts b against `neg_ba`, both scored by Z^I inner products.
inline StepGrads substitution_loss(PairExample pair, const EmbeddingTable& z, std::span<const Index> neg_ab,
                                   std::span<const Index> neg_ba) {
  if (pair.a == pair.b) throw UsageError("substitution pair with identical items");
  if (pair.a == kPad || pair.b == kPad) throw UsageError("PAD in substitution pair");
  StepGrads r{0.0, TableGradSet(z.dim()), std::nullopt};
  auto& g = r.tables.for_table(z.name);
  auto direction = [&](Index query, Index target, std::span<const Index> negs) {
    auto ns = sampled_softmax_loss_grad(z.row(query), z, target, negs);
    r.loss += ns.loss;
    g.add(query, ns.grad_query);
    for (std::size_t k = 0; k < ns.grad_table.size(); ++k) g.add(ns.grad_table.rows()[k], ns.grad_table.grad(k));
  };
  direction(pair.b, pair.a, neg_ab);
  direction(pair.a, pair.b, neg_ba);
  return r;
}

/// Sequence-prediction loss with the task's table wiring.
inline StepGrads relation_loss(const SeqExample& ex, Task task, const PkgModel& model,
                               std::span<const Index> negatives) {
  if (!is_sequence_task(task)) throw UsageError(std::string("relation_loss: '") + to_string(task) + "' is not a sequence task");
  auto s = sequence_logprob(ex.context, ex.target, negatives, model.sequence_tables(task), model.attention(task));
  return {s.loss, std::move(s.table_grads), std::move(s.param_grads)};
}

inline StepGrads isa_task_loss(const IsaExample& ex, const PkgModel& model,
                               std::span<const std::vector<Index>> negatives) {
  auto r = isa_loss(model.z_in.row(ex.item), ex.labels, FrozenTable(model.categories), negatives);
  StepGrads out{r.loss, TableGradSet(model.dim()), std::nullopt};
  out.tables.for_table(kItemInput).add(ex.item, r.grad_item);
  return out;
}

/// Negatives for one example: two lists for substitute (one per
/// direction), one for sequence tasks, one per label for isa.
inline std::vector<std::vector<Index>> draw_negatives(Task task, const TaskExamples& ex, std::size_t idx,
                                                      const NegativeSampler& items, std::size_t k,
                                                      std::size_t n_categories, Rng& rng) {
  switch (loss_kind(task)) {
    case LossKind::pair_ns: {
      const auto& p = ex.pairs[idx];
      const Index excl[] = {p.a, p.b};
      auto first = items.sample(k, excl, rng);
      auto second = items.sample(k, excl, rng);
      return {std::move(first), std::move(second)};
    }
    case LossKind::sequence_ns: {
      const Index excl[] = {ex.sequences[idx].target};
      return {items.sample(k, excl, rng)};
    }
    case LossKind::isa_ns: return isa_negatives(ex.labels[idx].labels, n_categories, k, rng);
  }
  return {};
}

inline StepGrads example_loss(const PkgModel& model, Task task, const TaskExamples& ex, std::size_t idx,
                              const std::vector<std::vector<Index>>& negatives) {
  switch (loss_kind(task)) {
    case LossKind::pair_ns: return substitution_loss(ex.pairs[idx], model.z_in, negatives.at(0), negatives.at(1));
    case LossKind::sequence_ns: return relation_loss(ex.sequences[idx], task, model, negatives.at(0));
    case LossKind::isa_ns: return isa_task_loss(ex.labels[idx], model, negatives);
  }
  throw UsageError("unknown loss kind");
}

/// A frozen minibatch: example indices with their negatives.
struct Minibatch {
  Task task = Task::substitute;
  std::vector<std::size_t> indices;
  std::vector<std::vector<std::vector<Index>>> negatives;
};

inline Minibatch draw_minibatch(Task task, const TaskExamples& ex, std::size_t batch, const NegativeSampler& items,
                                std::size_t k, std::size_t n_categories, Rng& rng) {
  Minibatch mb{task, {}, {}};
  const auto n = ex.size();
  if (n == 0) throw UsageError(std::string("no training examples for task '") + to_string(task) + "'");
  for (std::size_t b = 0; b < batch; ++b) {
    const auto i = static_cast<std::size_t>(rng.below(n));
    mb.indices.push_back(i);
    mb.negatives.push_back(draw_negatives(task, ex, i, items, k, n_categories, rng));
  }
  return mb;
}

/// Summed loss and gradients over a minibatch.
/// Row gradients are summed over the minibatch. Attention parameters are
/// shared by every example, so their gradient is the minibatch mean.
inline StepGrads batch_loss(const PkgModel& model, const TaskExamples& ex, const Minibatch& mb) {
  StepGrads total{0.0, TableGradSet(model.dim()), std::nullopt};
  if (is_sequence_task(mb.task)) {
    std::vector<SequenceItem> items;
    items.reserve(mb.indices.size());
    for (std::size_t b = 0; b < mb.indices.size(); ++b) {
      const auto& s = ex.sequences[mb.indices[b]];
      items.push_back({s.context, s.target, mb.negatives[b].at(0)});
    }
    auto r = sequence_logprob_batch(items, model.sequence_tables(mb.task), model.attention(mb.task));
    const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(mb.indices.size(), 1));
    for (auto block : r.param_grads.blocks()) {
      for (auto& v : block) v *= scale;
    }
    return {r.loss, std::move(r.table_grads), std::move(r.param_grads)};
  }
  for (std::size_t b = 0; b < mb.indices.size(); ++b) {
    auto g = example_loss(model, mb.task, ex, mb.indices[b], mb.negatives[b]);
    total.loss += g.loss;
    total.tables.merge(g.tables);
  }
  return total;
}

inline void apply_update(PkgModel& model, Task task, const StepGrads& g, double lr) {
  for (const auto& [name, slice] : g.tables) {
    if (name == kCategories) throw UsageError("category table is frozen");
    sgd_update(model.table(name), slice, lr);
  }
  if (g.attention) {
    auto dst = model.attention(task).blocks();
    auto src = g.attention->blocks();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      sgd_update(dst[k], src[k], lr, std::string("attention/") + to_string(task));
    }
  }
}

// ---------------------------------------------------------------------------
// Ranking helpers shared with evaluation.

/// 1-based rank of `gold` among all non-PAD rows of `table` scored by
/// q . z; ties go to the smaller id. Ids in `exclude` are not candidates.
inline std::size_t gold_rank(std::span<const double> query, const EmbeddingTable& table, Index gold,
                             std::span<const Index> exclude = {}) {
  const double g = dot(query, table.row(gold));
  std::size_t rank = 1;
  for (Index c = 1; c < table.rows(); ++c) {
    if (c == gold || std::find(exclude.begin(), exclude.end(), c) != exclude.end()) continue;
    const double s = dot(query, table.row(c));
    if (s > g || (s == g && c < gold)) ++rank;
  }
  return rank;
}

/// The query vector a task scores candidates against.
inline Vec task_query(const PkgModel& model, Task task, const TaskExamples& ex, std::size_t idx) {
  if (task == Task::substitute) {
    auto r = model.z_in.row(ex.pairs[idx].a);
    return {r.begin(), r.end()};
  }
  if (is_sequence_task(task)) {
    auto w = wiring(task);
    return aggregate_context(ex.sequences[idx].context, model.table(w.input), model.table(w.key),
                             model.attention(task))
        .context;
  }
  throw UsageError("task_query: isa is not a ranking task");
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  std::vector<double> lr_grid{0.001, 0.005, 0.01, 0.1};
  double lr = 0.01;
  std::size_t batch = 32;
  std::size_t negatives = 3;
  std::size_t patience = 5;
  std::size_t max_epochs = 20;
  std::uint64_t seed = 7;
  Schedule schedule = Schedule::weighted;
  Task single_task = Task::substitute;
  std::size_t epoch_steps = 0;          // 0: ceil(sum n / batch)
  std::size_t validation_queries = 300; // per task, evenly spaced subset
  double improve_delta = Tolerances::kImproveDelta;

  void validate() const {
    if (patience < 1) throw UsageError("patience must be >= 1");
    if (batch < 1) throw UsageError("batch must be >= 1");
    if (!(lr > 0.0)) throw UsageError("lr must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  Task trained_task = Task::substitute;  // task with the most steps this epoch
  std::map<Task, double> metrics;
};

struct MetricsLog {
  std::map<Task, double> initial;
  std::vector<EpochRecord> epochs;
};

inline const char* metric_name(Task t) { return t == Task::isa ? "neg_loss" : "HIT@10"; }

/// HIT@10 for ranking tasks; negative mean loss for isa (higher is better).
inline std::map<Task, double> validation_metrics(const PkgModel& model, const TrainingData& data,
                                                 const TrainConfig& config) {
  std::map<Task, double> out;
  for (auto t : kAllTasks) {
    const auto& ex = data.at(t).validation;
    const auto n = ex.size();
    if (n == 0) continue;
    const auto m = std::min(n, std::max<std::size_t>(config.validation_queries, 1));
    double acc = 0.0;
    if (t == Task::isa) {
      Rng rng(derive_seed(config.seed, 0x1a));
      for (std::size_t q = 0; q < m; ++q) {
        const auto i = q * n / m;
        auto negs = isa_negatives(ex.labels[i].labels, model.categories.rows(), config.negatives, rng);
        acc -= isa_task_loss(ex.labels[i], model, negs).loss;
      }
    } else {
      const auto& table = t == Task::substitute ? model.z_in : model.table(wiring(t).score);
      for (std::size_t q = 0; q < m; ++q) {
        const auto i = q * n / m;
        auto query = task_query(model, t, ex, i);
        Index gold = t == Task::substitute ? ex.pairs[i].b : ex.sequences[i].target;
        std::vector<Index> excl;
        if (t == Task::substitute) excl.push_back(ex.pairs[i].a);
        acc += gold_rank(query, table, gold, excl) <= 10 ? 1.0 : 0.0;
      }
    }
    out[t] = acc / static_cast<double>(m);
  }
  return out;
}

struct TrainResult {
  PkgModel model;  // best-epoch snapshot
  MetricsLog log;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double lr = 0.0;
};

inline std::vector<TaskSpec> active_specs(const TrainingData& data, const TrainConfig& config) {
  auto specs = make_specs(data);
  if (config.schedule == Schedule::single_task) {
    std::erase_if(specs, [&](const TaskSpec& s) { return s.name != config.single_task; });
    if (specs.empty()) {
      throw DataError(std::string("no training data for task '") + to_string(config.single_task) + "'");
    }
  }
  if (specs.empty()) throw DataError("no task has training data");
  return specs;
}

inline double selection_score(const std::map<Task, double>& metrics, std::span<const TaskSpec> specs) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& spec : specs) {
    auto it = metrics.find(spec.name);
    if (it == metrics.end()) continue;
    s += it->second;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Sample task, draw minibatch, update; repeat. Stops when no active task's
/// validation metric improved for `patience` epochs and returns the epoch
/// with the best mean validation metric.
inline TrainResult train(const TrainConfig& config, const TrainingData& data, PkgModel model) {
  config.validate();
  auto specs = active_specs(data, config);
  NegativeSampler items(data.item_counts);
  Rng rng(derive_seed(config.seed, 0x7a1));

  TrainResult res{model, {}, 0, 0, config.lr};
  res.log.initial = validation_metrics(model, data, config);
  double best_score = selection_score(res.log.initial, specs);
  std::map<Task, double> best_task = res.log.initial;

  std::size_t total_n = 0;
  for (const auto& s : specs) total_n += s.n;
  const std::size_t steps = config.epoch_steps ? config.epoch_steps : (total_n + config.batch - 1) / config.batch;

  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::map<Task, std::size_t> counts;
    for (std::size_t step = 0; step < steps; ++step) {
      const Task task = sample_task(specs, config.schedule, rng);
      ++counts[task];
      const auto& ex = data.at(task).train;
      auto mb = draw_minibatch(task, ex, config.batch, items, config.negatives, model.categories.rows(), rng);
      auto g = batch_loss(model, ex, mb);
      if (!std::isfinite(g.loss)) {
        throw NumericalError(std::string("training diverged: non-finite loss on task '") + to_string(task) +
                             "' at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                             " (lr " + std::to_string(config.lr) + ")");
      }
      apply_update(model, task, g, config.lr);
    }

    EpochRecord rec{epoch, specs.front().name, validation_metrics(model, data, config)};
    std::size_t most = 0;
    for (const auto& s : specs) {
      if (counts[s.name] > most) {
        most = counts[s.name];
        rec.trained_task = s.name;
      }
    }
    bool improved = false;
    for (const auto& s : specs) {
      auto it = rec.metrics.find(s.name);
      if (it == rec.metrics.end()) continue;
      auto& best = best_task[s.name];
      if (it->second > best + config.improve_delta) {
        best = it->second;
        improved = true;
      }
    }
    const double score = selection_score(rec.metrics, specs);
    if (score > best_score) {
      best_score = score;
      res.model = model;
      res.best_epoch = epoch;
    }
    res.log.epochs.push_back(std::move(rec));
    res.epochs_run = epoch;
    stale = improved ? 0 : stale + 1;
    if (stale >= config.patience) break;
  }
  return res;
}

/// Trains once per learning rate in the grid and keeps the run with the
/// best mean validation metric.
inline TrainResult train_with_lr_grid(TrainConfig config, const TrainingData& data, const PkgModel& init) {
  if (config.lr_grid.empty()) throw UsageError("empty learning-rate grid");
  std::optional<TrainResult> best;
  double best_score = -std::numeric_limits<double>::infinity();
  const auto specs = active_specs(data, config);
  for (double lr : config.lr_grid) {
    config.lr = lr;
    auto r = train(config, data, init);
    const auto& m = r.best_epoch == 0 ? r.log.initial : r.log.epochs[r.best_epoch - 1].metrics;
    const double s = selection_score(m, specs);
    if (s > best_score) {
      best_score = s;
      best = std::move(r);
    }
  }
  return std::move(*best);
}

inline void write_metrics_log(const MetricsLog& log, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "epoch\ttrained_task\ttask\tmetric\tvalue\n";
  char buf[32];
  auto row = [&](std::size_t epoch, const char* trained, Task t, double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    out << epoch << '\t' << trained << '\t' << to_string(t) << '\t' << metric_name(t) << '\t' << buf << '\n';
  };
  for (const auto& [t, v] : log.initial) row(0, "none", t, v);
  for (const auto& e : log.epochs) {
    for (const auto& [t, v] : e.metrics) row(e.epoch, to_string(e.trained_task), t, v);
  }
}

// ---------------------------------------------------------------------------
// Task-correlation diagnostic.

/// Pearson correlation; absent for fewer than 3 samples or zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw UsageError("pearson: length mismatch");
  const auto n = x.size();
  if (n < 3) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

using CorrelationMatrix = std::map<std::pair<Task, Task>, std::optional<double>>;

/// rho(A -> B) = corr(delta tau_A, delta tau_B) over the epochs attributed
/// to task A, where delta is the change from the previous evaluation.
inline CorrelationMatrix task_correlation(const MetricsLog& log) {
  std::map<Task, std::vector<std::map<Task, double>>> deltas;  // by trained task
  const std::map<Task, double>* prev = &log.initial;
  for (const auto& e : log.epochs) {
    std::map<Task, double> d;
    for (const auto& [t, v] : e.metrics) {
      auto it = prev->find(t);
      if (it != prev->end()) d[t] = v - it->second;
    }
    deltas[e.trained_task].push_back(std::move(d));
    prev = &e.metrics;
  }
  std::set<Task> tasks;
  for (const auto& [t, v] : log.initial) tasks.insert(t);
  for (const auto& e : log.epochs) {
    for (const auto& [t, v] : e.metrics) tasks.insert(t);
  }
  CorrelationMatrix rho;
  for (auto a : tasks) {
    for (auto b : tasks) {
      if (a == b) continue;
      std::vector<double> xa, xb;
      for (const auto& d : deltas[a]) {
        auto ia = d.find(a), ib = d.find(b);
        if (ia == d.end() || ib == d.end()) continue;
        xa.push_back(ia->second);
        xb.push_back(ib->second);
      }
      rho[{a, b}] = pearson(xa, xb);
    }
  }
  return rho;
}

inline void write_correlation(const CorrelationMatrix& rho, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "from\tto\trho\n";
  char buf[32];
  for (const auto& [k, v] : rho) {
    out << to_string(k.first) << '\t' << to_string(k.second) << '\t';
    if (v) {
      std::snprintf(buf, sizeof buf, "%.9g", *v);
      out << buf;
    } else {
      out << "NA";
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Schedule comparison.

struct ScheduleRow {
  Schedule schedule;
  Task task;
  double value;
};

/// Best-epoch validation metric per task under the weighted, uniform and
/// single-task schedules. Single-task rows come from one run per task.
inline std::vector<ScheduleRow> compare_schedules(const TrainingData& data, TrainConfig config, const PkgModel& init) {
  std::vector<ScheduleRow> rows;
  auto best_metrics = [](const TrainResult& r) {
    return r.best_epoch == 0 ? r.log.initial : r.log.epochs[r.best_epoch - 1].metrics;
  };
  for (auto s : {Schedule::weighted, Schedule::uniform}) {
    config.schedule = s;
    auto r = train(config, data, init);
    for (const auto& [t, v] : best_metrics(r)) rows.push_back({s, t, v});
  }
  config.schedule = Schedule::single_task;
  for (const auto& spec : make_specs(data)) {
    config.single_task = spec.name;
    auto r = train(config, data, init);
    auto m = best_metrics(r);
    auto it = m.find(spec.name);
    if (it != m.end()) rows.push_back({Schedule::single_task, spec.name, it->second});
  }
  return rows;
}

inline void write_schedule_comparison(std::span<const ScheduleRow> rows, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "schedule\ttask\tmetric\tvalue\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.value);
    out << to_string(r.schedule) << '\t' << to_string(r.task) << '\t' << metric_name(r.task) << '\t' << buf << '\n';
  }
}

}  // namespace pkge
