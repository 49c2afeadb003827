#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pkge/embedding.hpp"

using namespace pkge;

namespace {

EmbeddingTable random_table(std::size_t rows, std::size_t dim, std::uint64_t seed, double scale = 1.0) {
  EmbeddingTable t{"T", Geometry::euclidean, Matrix(rows, dim)};
  Rng rng(seed);
  for (std::size_t r = 1; r < rows; ++r) {
    for (auto& v : t.values.row(r)) v = rng.uniform(-scale, scale);
  }
  return t;
}

Vec random_vec(std::size_t d, Rng& rng, double scale = 1.0) {
  Vec v(d);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return v;
}

}  // namespace

TEST(InitTables, DeterministicUnderSeed) {
  auto a = init_table("Z_I", 50, 8, Geometry::euclidean, 7);
  auto b = init_table("Z_I", 50, 8, Geometry::euclidean, 7);
  EXPECT_EQ(a, b);
  auto c = init_table("Z_I", 50, 8, Geometry::euclidean, 8);
  EXPECT_NE(a, c);
}

TEST(InitTables, DefaultDimensionAndRanges) {
  auto t = init_table("Z_I", 20, 100, Geometry::euclidean, 7);
  EXPECT_EQ(t.dim(), 100u);
  for (double v : t.values.flat()) EXPECT_LE(std::abs(v), 0.5 / 100);
  for (double v : t.row(kPad)) EXPECT_EQ(v, 0.0);

  auto p = init_table("C", 200, 10, Geometry::poincare, 7);
  double max_norm = 0.0;
  for (Index r = 0; r < p.rows(); ++r) max_norm = std::max(max_norm, norm(p.row(r)));
  EXPECT_LT(max_norm, 0.01);
}

TEST(InitTables, ZeroSizesRejected) {
  EXPECT_THROW(init_table("x", 0, 4, Geometry::euclidean, 1), UsageError);
  EXPECT_THROW(init_table("x", 4, 0, Geometry::euclidean, 1), UsageError);
}

TEST(NegativeSampler, ForcedWhenOnlyOneChoice) {
  NegativeSampler s({0.0, 5.0, 2.0});  // PAD, a, b
  Rng rng(1);
  const Index exclude[] = {1};
  for (int i = 0; i < 1000; ++i) {
    auto ids = s.sample(3, exclude, rng);
    for (auto id : ids) EXPECT_EQ(id, 2u);
  }
}

TEST(NegativeSampler, ExclusionsCoveringVocabularyFail) {
  NegativeSampler s({0.0, 1.0, 1.0});
  Rng rng(1);
  const Index exclude[] = {1, 2};
  EXPECT_THROW(s.sample(1, exclude, rng), DataError);
  EXPECT_THROW(s.sample(0, {}, rng), UsageError);
}

TEST(NegativeSampler, SmoothedUnigramFrequencies) {
  // counts (3, 1), exponent 0.75: P(a) = 3^0.75 / (3^0.75 + 1).
  const double expected = std::pow(3.0, 0.75) / (std::pow(3.0, 0.75) + 1.0);
  EXPECT_NEAR(expected, 0.6951, 1e-4);
  NegativeSampler s({0.0, 3.0, 1.0}, 0.75);
  EXPECT_NEAR(s.probability(1), expected, 1e-12);
  Rng rng(7);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += s.draw(rng) == 1;
  EXPECT_NEAR(static_cast<double>(hits) / n, expected, 0.01);
}

TEST(NegativeSampler, NeverReturnsPadOrExcluded) {
  std::vector<double> counts(40);
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = static_cast<double>(i % 7);
  NegativeSampler s(counts);
  Rng rng(99);
  const Index exclude[] = {3, 5, 11, 20};
  for (int i = 0; i < 100000 / 5; ++i) {
    for (auto id : s.sample(5, exclude, rng)) {
      ASSERT_NE(id, kPad);
      ASSERT_EQ(std::count(std::begin(exclude), std::end(exclude), id), 0);
      ASSERT_LT(id, counts.size());
    }
  }
}

TEST(NegativeSampler, ProbabilitiesSumToOne) {
  NegativeSampler s({0.0, 1.0, 10.0, 100.0, 0.0, 4.0});
  double sum = 0.0;
  for (Index i = 0; i < s.vocab_size(); ++i) sum += s.probability(i);
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(s.probability(kPad), 0.0);
}

TEST(SoftmaxFull, UniformWhenRowsEqual) {
  EmbeddingTable t{"T", Geometry::euclidean, Matrix(6, 3, 0.25)};
  Vec q{0.3, -1.0, 2.0};
  EXPECT_NEAR(softmax_logprob_full(q, t, 2), std::log(1.0 / 5.0), 1e-12);
}

TEST(SoftmaxFull, TwoTermHandValue) {
  // q.z_a = 1, q.z_b = 0 -> 1 - log(e + 1).
  EmbeddingTable t{"T", Geometry::euclidean, Matrix(3, 1)};
  t.values(1, 0) = 1.0;
  t.values(2, 0) = 0.0;
  Vec q{1.0};
  const double expected = 1.0 - std::log(std::exp(1.0) + 1.0);
  EXPECT_NEAR(expected, -0.3133, 1e-4);
  EXPECT_NEAR(softmax_logprob_full(q, t, 1), expected, 1e-12);
}

TEST(SoftmaxFull, NormalizesOnVocabulariesUpTo1000) {
  Rng rng(4);
  for (std::size_t v : {2u, 10u, 137u, 1000u}) {
    auto t = random_table(v + 1, 6, v, 2.0);
    auto q = random_vec(6, rng, 2.0);
    double sum = 0.0;
    for (Index k = 1; k <= v; ++k) sum += std::exp(softmax_logprob_full(q, t, k));
    EXPECT_NEAR(sum, 1.0, Tolerances::kProbSumTol) << v;
  }
}

TEST(SoftmaxFull, LargeLogitsStayFinite) {
  EmbeddingTable t{"T", Geometry::euclidean, Matrix(3, 1)};
  t.values(1, 0) = 1000.0;
  t.values(2, 0) = 999.0;
  Vec q{1.0};
  EXPECT_NEAR(softmax_logprob_full(q, t, 1), -std::log1p(std::exp(-1.0)), 1e-12);
  Vec bad{std::nan("")};
  EXPECT_THROW(softmax_logprob_full(bad, t, 1), NumericalError);
}

TEST(SampledSoftmax, ZeroQueryGivesLogTwoPerTerm) {
  auto t = random_table(10, 4, 1);
  Vec q(4, 0.0);
  const Index negs[] = {2, 3, 4};
  auto r = sampled_softmax_loss_grad(q, t, 1, negs);
  EXPECT_NEAR(r.loss, 4 * std::log(2.0), 1e-12);
}

TEST(SampledSoftmax, TargetAmongNegativesRejected) {
  auto t = random_table(10, 4, 1);
  Vec q(4, 0.1);
  const Index negs[] = {2, 1};
  EXPECT_THROW(sampled_softmax_loss_grad(q, t, 1, negs), UsageError);
}

TEST(SampledSoftmax, GradientsMatchFiniteDifferences) {
  Rng rng(17);
  for (int point = 0; point < 3; ++point) {
    auto t = random_table(8, 5, 100 + point);
    auto q = random_vec(5, rng);
    const Index target = 3;
    const Index negs[] = {1, 6, 6};
    auto r = sampled_softmax_loss_grad(q, t, target, negs);

    auto rep = grad_check(
        [&](std::span<const double> x) { return sampled_softmax_loss_grad(x, t, target, negs).loss; }, q,
        r.grad_query);
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;

    // Table rows: pack target and the (repeated) negative row.
    for (Index row : {Index{3}, Index{1}, Index{6}}) {
      Vec theta(t.row(row).begin(), t.row(row).end());
      const double* g = r.grad_table.find(row);
      ASSERT_NE(g, nullptr);
      Vec analytic(g, g + 5);
      auto rep_row = grad_check(
          [&](std::span<const double> x) {
            auto copy = t;
            std::copy(x.begin(), x.end(), copy.row(row).begin());
            return sampled_softmax_loss_grad(q, copy, target, negs).loss;
          },
          theta, analytic);
      EXPECT_TRUE(rep_row.passed()) << "row " << row << " " << rep_row.max_rel_error;
    }
  }
}

TEST(SampledSoftmax, AllNegativesRankingMatchesFullSoftmax) {
  // With every other entity as a negative the objective is -q.z_t + const,
  // so ranking targets by it must equal the full-softmax ranking.
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_table(6, 3, 200 + trial);
    auto q = random_vec(3, rng);
    std::vector<Index> by_ns{1, 2, 3, 4, 5}, by_full{1, 2, 3, 4, 5};
    auto ns_loss = [&](Index target) {
      std::vector<Index> negs;
      for (Index k = 1; k <= 5; ++k) {
        if (k != target) negs.push_back(k);
      }
      return sampled_softmax_loss_grad(q, t, target, negs).loss;
    };
    std::sort(by_ns.begin(), by_ns.end(), [&](Index a, Index b) { return ns_loss(a) < ns_loss(b); });
    std::sort(by_full.begin(), by_full.end(), [&](Index a, Index b) {
      return softmax_logprob_full(q, t, a) > softmax_logprob_full(q, t, b);
    });
    EXPECT_EQ(by_ns, by_full);
  }
}

TEST(Sgd, Arithmetic) {
  EmbeddingTable t{"T", Geometry::euclidean, Matrix(2, 2)};
  t.values(1, 0) = 1.0;
  t.values(1, 1) = 1.0;
  GradSlice g(2);
  const double grad[] = {1.0, 0.0};
  g.add(1, grad);
  sgd_update(t, g, 0.1);
  EXPECT_DOUBLE_EQ(t.values(1, 0), 0.9);
  EXPECT_DOUBLE_EQ(t.values(1, 1), 1.0);
}

TEST(Sgd, ZeroGradientLeavesTableUnchanged) {
  auto t = random_table(5, 3, 9);
  auto before = t;
  GradSlice g(3);
  g.at(2);
  g.at(4);
  for (double lr : {0.001, 0.005, 0.01, 0.1}) sgd_update(t, g, lr);
  EXPECT_EQ(t, before);
}

TEST(Sgd, NonFiniteGradientNamesTableAndRow) {
  auto t = random_table(5, 2, 9);
  t.name = "Z_BO";
  GradSlice g(2);
  const double grad[] = {std::numeric_limits<double>::infinity(), 0.0};
  g.add(3, grad);
  try {
    sgd_update(t, g, 0.1);
    FAIL();
  } catch (const NumericalError& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("Z_BO"), std::string::npos);
    EXPECT_NE(m.find("row 3"), std::string::npos);
  }
  EXPECT_THROW(sgd_update(t, GradSlice(2), 0.0), UsageError);
}

TEST(Sgd, LeastSquaresDecreasesMonotonically) {
  // f(x) = 0.5 |A x - b|^2, full gradient A^T (A x - b), lr 0.01.
  const Matrix a = [] {
    Matrix m(4, 3);
    const double v[] = {1, 2, 0, 0, 1, 1, 3, 0, 1, 1, 1, 1};
    std::copy(std::begin(v), std::end(v), m.flat().begin());
    return m;
  }();
  const Vec b{1, -2, 0.5, 3};
  Vec x(3, 0.0);
  auto loss_grad = [&](Vec& g) {
    double f = 0.0;
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
      const double r = dot(a.row(i), x) - b[i];
      f += 0.5 * r * r;
      axpy(r, a.row(i), g);
    }
    return f;
  };
  Vec g(3);
  double prev = loss_grad(g);
  for (int step = 0; step < 100; ++step) {
    sgd_update(x, g, 0.01, "x");
    const double f = loss_grad(g);
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(GradCheck, QuadraticIsExact) {
  Vec theta{0.3, -1.2, 2.0, 5.0};
  auto rep = grad_check(
      [](std::span<const double> x) { return 0.5 * squared_norm(x); }, theta, theta);
  EXPECT_LT(rep.max_rel_error, 1e-9);
  EXPECT_EQ(rep.checked, 4u);
}

TEST(GradCheck, CorruptedGradientIsReported) {
  Vec theta{0.3, -1.2, 2.0};
  Vec wrong = theta;
  wrong[1] *= 1.5;
  auto rep = grad_check(
      [](std::span<const double> x) { return 0.5 * squared_norm(x); }, theta, wrong);
  EXPECT_FALSE(rep.passed());
  EXPECT_EQ(rep.worst_index, 1u);
}

TEST(GradCheck, SubsetSampling) {
  Vec theta(50, 0.5);
  GradCheckOptions opt;
  opt.max_coords = 10;
  auto rep = grad_check(
      [](std::span<const double> x) { return 0.5 * squared_norm(x); }, theta, theta, opt);
  EXPECT_EQ(rep.checked, 10u);
}

TEST(GradSliceSet, AliasedRolesShareOneSlice) {
  TableGradSet set(2);
  const double g[] = {1.0, 2.0};
  set.for_table("W").add(3, g);
  set.for_table("W").add(3, g);
  set.for_table("Z_I").add(3, g);
  ASSERT_NE(set.find("W"), nullptr);
  EXPECT_EQ(set.find("W")->size(), 1u);
  EXPECT_DOUBLE_EQ(set.find("W")->grad(0)[1], 4.0);
}
