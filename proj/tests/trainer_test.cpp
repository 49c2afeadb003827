#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pkge/trainer.hpp"
#include "toy_data.hpp"

using namespace pkge;

namespace {

PkgModel toy_model(const TrainingData& data, std::size_t dim = 8, std::uint64_t seed = 3) {
  return PkgModel::init(data.n_items, data.n_words, data.n_categories, dim, SequenceLengths{}, seed);
}

PkgModel zero_model(const TrainingData& data, std::size_t dim = 4) {
  auto m = toy_model(data, dim);
  for (auto* t : {&m.z_in, &m.z_buy_out, &m.z_view_out, &m.words, &m.categories}) t->values.fill(0.0);
  for (auto task : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    for (auto b : m.attention(task).blocks()) std::fill(b.begin(), b.end(), 0.0);
  }
  return m;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.lr = 0.05;
  c.batch = 16;
  c.max_epochs = 3;
  c.validation_queries = 20;
  return c;
}

}  // namespace

TEST(TrainingData, ExpandsSessionsAndSplitsEveryModality) {
  auto data = make_training_data(toy::dataset());
  // 300 buy sessions of length 4: 240 train sessions -> 720 examples.
  EXPECT_EQ(data.at(Task::complement).train.sequences.size(), 720u);
  EXPECT_EQ(data.at(Task::complement).validation.sequences.size(), 90u);
  EXPECT_EQ(data.at(Task::substitute).train.pairs.size(), 240u);
  EXPECT_EQ(data.at(Task::isa).train.labels.size(), 32u);
  EXPECT_EQ(data.at(Task::isa).validation.labels.size() + data.at(Task::isa).test.labels.size(), 8u);
  EXPECT_EQ(make_specs(data).size(), 6u);
  const auto& first = data.at(Task::complement).train.sequences[0];
  EXPECT_EQ(first.context.size(), 1u);
}

TEST(TrainingData, PrefixesKeepMostRecentItems) {
  std::vector<SessionSequence> s{{SessionKind::buy, {1, 2, 3, 4, 5}, 0}};
  std::vector<SeqExample> out;
  expand_sessions(s, 2, out);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[3].context, (std::vector<Index>{3, 4}));
  EXPECT_EQ(out[3].target, 5u);
}

TEST(SubstitutionLoss, ZeroEmbeddingsGiveLogTwoPerTerm) {
  EmbeddingTable z{"Z_I", Geometry::euclidean, Matrix(10, 4)};
  const Index n1[] = {3, 4, 5}, n2[] = {6, 7, 8};
  auto r = substitution_loss({1, 2}, z, n1, n2);
  EXPECT_NEAR(r.loss, 2 * 4 * std::log(2.0), 1e-12);
}

TEST(SubstitutionLoss, IdenticalItemsRejected) {
  EmbeddingTable z{"Z_I", Geometry::euclidean, Matrix(10, 4)};
  EXPECT_THROW(substitution_loss({2, 2}, z, {}, {}), UsageError);
}

TEST(SubstitutionLoss, SwappingPairWithMirroredNegativesGivesSameLoss) {
  auto z = init_table("Z_I", 12, 5, Geometry::euclidean, 4);
  for (auto& v : z.values.flat()) v *= 40.0;
  const Index n1[] = {3, 4, 9}, n2[] = {6, 7, 11};
  EXPECT_EQ(substitution_loss({1, 2}, z, n1, n2).loss, substitution_loss({2, 1}, z, n2, n1).loss);
}

TEST(SubstitutionLoss, GradientMatchesFiniteDifferences) {
  auto z = init_table("Z_I", 9, 4, Geometry::euclidean, 4);
  Rng rng(21);
  // Negatives include the query item of the other direction to exercise shared rows.
  const Index n1[] = {3, 2, 5}, n2[] = {6, 1, 3};
  for (int point = 0; point < 3; ++point) {
    for (auto& v : z.values.flat()) v = rng.uniform(-1, 1);
    auto r = substitution_loss({1, 2}, z, n1, n2);
    Vec analytic(z.values.flat().size(), 0.0);
    const auto* slice = r.tables.find("Z_I");
    ASSERT_NE(slice, nullptr);
    for (std::size_t k = 0; k < slice->size(); ++k) {
      auto g = slice->grad(k);
      std::copy(g.begin(), g.end(), analytic.begin() + slice->rows()[k] * 4);
    }
    Vec theta(z.values.flat().begin(), z.values.flat().end());
    auto rep = grad_check(
        [&](std::span<const double> x) {
          auto c = z;
          std::copy(x.begin(), x.end(), c.values.flat().begin());
          return substitution_loss({1, 2}, c, n1, n2).loss;
        },
        theta, analytic);
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
  }
}

TEST(RelationLoss, WiringNamesTheRightTables) {
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  SeqExample items{{1, 2}, 3};
  SeqExample words{{1, 2}, 3};
  const Index negs[] = {5, 6, 7};
  auto names = [](const StepGrads& g) {
    std::set<std::string> s;
    for (const auto& [n, slice] : g.tables) s.insert(n);
    return s;
  };
  EXPECT_EQ(names(relation_loss(items, Task::complement, m, negs)), (std::set<std::string>{"Z_I", "Z_BO"}));
  EXPECT_EQ(names(relation_loss(items, Task::co_view, m, negs)), (std::set<std::string>{"Z_I", "Z_VO"}));
  auto d = relation_loss(words, Task::describe, m, negs);
  EXPECT_EQ(names(d), (std::set<std::string>{"W", "Z_I"}));
  // Describe scores targets against Z^I: the target row receives gradient.
  EXPECT_NE(d.tables.find("Z_I")->find(3), nullptr);
  auto c = relation_loss(items, Task::complement, m, negs);
  EXPECT_NE(c.tables.find("Z_BO")->find(3), nullptr);
  EXPECT_EQ(c.tables.find("Z_I")->find(3), nullptr);
  EXPECT_THROW(relation_loss(items, Task::substitute, m, negs), UsageError);
}

TEST(RelationLoss, ZeroParametersGiveLogTwoTerms) {
  auto data = make_training_data(toy::dataset());
  auto m = zero_model(data);
  const Index negs[] = {5, 6, 7};
  for (auto t : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    EXPECT_NEAR(relation_loss({{1, 2, 4}, 3}, t, m, negs).loss, 4 * std::log(2.0), 1e-12) << to_string(t);
  }
}

TEST(SampleTask, SingleTaskAlwaysSelected) {
  std::vector<TaskSpec> specs{{Task::search, LossKind::sequence_ns, 10, 4}};
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_task(specs, rng), Task::search);
}

TEST(SampleTask, ThreeToOneFrequencies) {
  std::vector<TaskSpec> specs{{Task::substitute, LossKind::pair_ns, 0, 3}, {Task::isa, LossKind::isa_ns, 0, 1}};
  Rng rng(7);
  int first = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) first += sample_task(specs, rng) == Task::substitute;
  EXPECT_NEAR(first / double(n), 0.75, 0.01);
}

TEST(SampleTask, ReproducibleUnderSeed) {
  std::vector<TaskSpec> specs{{Task::substitute, LossKind::pair_ns, 0, 3}, {Task::isa, LossKind::isa_ns, 0, 5},
                              {Task::search, LossKind::sequence_ns, 10, 2}};
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_task(specs, a), sample_task(specs, b));
}

TEST(SampleTask, ChiSquareBelowHighQuantile) {
  std::vector<TaskSpec> specs{{Task::substitute, LossKind::pair_ns, 0, 5}, {Task::isa, LossKind::isa_ns, 0, 3},
                              {Task::search, LossKind::sequence_ns, 10, 2}};
  Rng rng(2024);
  std::map<Task, double> count;
  const int n = 100000;
  for (int i = 0; i < n; ++i) count[sample_task(specs, rng)] += 1;
  double chi2 = 0.0;
  for (const auto& s : specs) {
    const double expected = n * s.n / 10.0;
    chi2 += (count[s.name] - expected) * (count[s.name] - expected) / expected;
  }
  // 0.999 quantile of chi-square with 2 degrees of freedom.
  EXPECT_LT(chi2, 13.815510557964274);
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  auto cfg = quick_config();
  cfg.max_epochs = 0;
  auto r = train(cfg, data, m);
  EXPECT_EQ(r.model, m);
  EXPECT_TRUE(r.log.epochs.empty());
  EXPECT_EQ(r.best_epoch, 0u);
}

TEST(Train, SameSeedIsBitwiseIdentical) {
  auto data = make_training_data(toy::dataset());
  auto cfg = quick_config();
  auto a = train(cfg, data, toy_model(data));
  auto b = train(cfg, data, toy_model(data));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

TEST(Train, SingleTaskLeavesOtherParametersUntouched) {
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  auto cfg = quick_config();
  cfg.schedule = Schedule::single_task;
  cfg.single_task = Task::complement;
  cfg.patience = 100;
  auto r = train(cfg, data, m);
  ASSERT_GT(r.best_epoch, 0u);
  EXPECT_EQ(r.model.z_view_out, m.z_view_out);
  EXPECT_EQ(r.model.words, m.words);
  EXPECT_EQ(r.model.categories, m.categories);
  EXPECT_EQ(r.model.attn_co_view, m.attn_co_view);
  EXPECT_EQ(r.model.attn_search, m.attn_search);
  EXPECT_EQ(r.model.attn_describe, m.attn_describe);
  EXPECT_NE(r.model.z_buy_out, m.z_buy_out);
  EXPECT_NE(r.model.attn_complement, m.attn_complement);
}

TEST(Train, SubstituteBeatsRandomBaseline) {
  auto data = make_training_data(toy::dataset());
  auto cfg = quick_config();
  cfg.max_epochs = 15;
  cfg.validation_queries = 1000;
  auto r = train(cfg, data, toy_model(data));
  const auto& best = r.log.epochs.at(r.best_epoch - 1).metrics;
  EXPECT_GT(best.at(Task::substitute), 10.0 / static_cast<double>(data.n_items - 1));
}

TEST(Train, OwnUpdateLowersFrozenMinibatchLoss) {
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  NegativeSampler items(data.item_counts);
  Rng rng(5);
  for (auto t : kAllTasks) {
    const auto& ex = data.at(t).train;
    auto mb = draw_minibatch(t, ex, 16, items, 3, m.categories.rows(), rng);
    auto before = batch_loss(m, ex, mb);
    auto copy = m;
    apply_update(copy, t, before, 1e-4);
    EXPECT_LT(batch_loss(copy, ex, mb).loss, before.loss) << to_string(t);
  }
}

TEST(Train, PadRowsAreNeverRead) {
  // NaN in every PAD row would poison any loss that touched it.
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (auto* t : {&m.z_in, &m.z_buy_out, &m.z_view_out, &m.words, &m.categories}) {
    for (auto& v : t->row(kPad)) v = nan;
  }
  auto cfg = quick_config();
  cfg.max_epochs = 1;
  TrainResult r{m, {}, 0, 0};
  ASSERT_NO_THROW(r = train(cfg, data, m));
  for (const auto& [t, v] : r.log.epochs.at(0).metrics) EXPECT_TRUE(std::isfinite(v)) << to_string(t);
}

TEST(Train, DivergenceAborts) {
  auto data = make_training_data(toy::dataset());
  auto m = toy_model(data);
  for (Index r = 1; r < m.z_in.rows(); ++r) m.z_in.values(r, 0) = std::numeric_limits<double>::quiet_NaN();
  auto cfg = quick_config();
  cfg.schedule = Schedule::single_task;
  cfg.single_task = Task::isa;
  cfg.max_epochs = 50;
  EXPECT_THROW(train(cfg, data, m), NumericalError);
}

TEST(TaskCorrelation, PearsonValues) {
  const double a[] = {1, 2, 3}, b[] = {1, 2, 4}, neg[] = {-1, -2, -3}, flat[] = {2, 2, 2};
  EXPECT_NEAR(*pearson(a, a), 1.0, 1e-12);
  EXPECT_NEAR(*pearson(a, neg), -1.0, 1e-12);
  EXPECT_NEAR(*pearson(a, b), 0.9819805060619656, 1e-6);
  EXPECT_FALSE(pearson(a, flat).has_value());
  EXPECT_FALSE(pearson(std::span(a, 2), std::span(b, 2)).has_value());
}

TEST(TaskCorrelation, UsesDeltasOfEpochsTrainedOnTheSourceTask) {
  // Substitute-trained epochs: delta substitute = (1,2,3), delta search = (1,2,4).
  MetricsLog log;
  log.initial = {{Task::substitute, 0.0}, {Task::search, 0.0}};
  double s = 0.0, q = 0.0;
  std::size_t epoch = 0;
  auto push = [&](Task trained, double ds, double dq) {
    s += ds;
    q += dq;
    log.epochs.push_back({++epoch, trained, {{Task::substitute, s}, {Task::search, q}}});
  };
  push(Task::substitute, 1, 1);
  push(Task::search, 5, -7);
  push(Task::substitute, 2, 2);
  push(Task::substitute, 3, 4);
  auto rho = task_correlation(log);
  ASSERT_TRUE(rho.at({Task::substitute, Task::search}).has_value());
  EXPECT_NEAR(*rho.at({Task::substitute, Task::search}), 0.9819805060619656, 1e-6);
  EXPECT_FALSE(rho.at({Task::search, Task::substitute}).has_value());
}
