#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pkge/attention.hpp"

using namespace pkge;

namespace {

EmbeddingTable random_table(const std::string& name, std::size_t rows, std::size_t dim, std::uint64_t seed,
                            double scale = 0.5) {
  EmbeddingTable t{name, Geometry::euclidean, Matrix(rows, dim)};
  Rng rng(seed);
  for (std::size_t r = 1; r < rows; ++r) {
    for (auto& v : t.values.row(r)) v = rng.uniform(-scale, scale);
  }
  return t;
}

AttentionParams identity_ffn(std::size_t l, std::size_t d) {
  auto p = AttentionParams::zeros(l, d);
  p.theta1 = Matrix::identity(d);
  p.theta2 = Matrix::identity(d);
  return p;
}

AttentionParams random_params(std::size_t l, std::size_t d, std::uint64_t seed) {
  auto p = AttentionParams::init(l, d, seed);
  Rng rng(seed + 1);
  for (auto& v : p.positions.flat()) v = rng.uniform(-0.3, 0.3);
  for (auto& v : p.bias1) v = rng.uniform(-0.2, 0.2);
  for (auto& v : p.bias2) v = rng.uniform(-0.2, 0.2);
  for (auto* m : {&p.theta1, &p.theta2}) {
    for (auto& v : m->flat()) v += rng.uniform(-0.3, 0.3);
  }
  return p;
}

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t i = 0;
  for (auto r : rows) {
    std::copy(r.begin(), r.end(), m.row(i++).begin());
  }
  return m;
}

}  // namespace

TEST(EmbedWithPositions, ZeroPositionsGiveRawEmbeddings) {
  auto t = random_table("Z_I", 6, 3, 1);
  auto p = AttentionParams::zeros(4, 3);
  const Index ids[] = {2, 5, 1};
  auto e = embed_with_positions(ids, t, p);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(e(k, j), t.values(ids[k], j));
  }
}

TEST(EmbedWithPositions, SingleItemAddsFirstPosition) {
  auto t = random_table("Z_I", 6, 3, 1);
  auto p = random_params(4, 3, 2);
  const Index ids[] = {4};
  auto e = embed_with_positions(ids, t, p);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(e(0, j), t.values(4, j) + p.positions(0, j));
}

TEST(EmbedWithPositions, OutOfRangeIdRejected) {
  auto t = random_table("Z_I", 6, 3, 1);
  auto p = AttentionParams::zeros(4, 3);
  const Index bad[] = {9};
  EXPECT_THROW(embed_with_positions(bad, t, p), UsageError);
  const Index too_long[] = {1, 2, 3, 4, 5};
  EXPECT_THROW(embed_with_positions(too_long, t, p), UsageError);
}

TEST(SequenceBatch, KeepsMostRecentEntriesAndMasks) {
  SequenceBatch b{3, {}, {}, {}, "complement"};
  const Index long_seq[] = {1, 2, 3, 4, 5};
  b.add(long_seq, 6);
  const Index short_seq[] = {7};
  b.add(short_seq, 2);
  EXPECT_EQ(b.row(0), (std::vector<Index>{3, 4, 5}));
  EXPECT_EQ(b.row(1), (std::vector<Index>{7}));
  EXPECT_EQ(b.mask[3], 1);
  EXPECT_EQ(b.mask[4], 0);
  const Index pads[] = {kPad, kPad};
  EXPECT_THROW(b.add(pads, 1), UsageError);
}

TEST(Ffn, IdentityOnNonnegativeInput) {
  auto p = identity_ffn(2, 2);
  auto e = from_rows({{0.5, 2.0}, {0.0, 1.0}});
  auto f = ffn_forward(e, p);
  EXPECT_EQ(f.out, e);
}

TEST(Ffn, ReluClipsNegatives) {
  auto p = identity_ffn(1, 2);
  auto f = ffn_forward(from_rows({{-1.0, 2.0}}), p);
  EXPECT_EQ(f.out(0, 0), 0.0);
  EXPECT_EQ(f.out(0, 1), 2.0);
}

TEST(Ffn, ZeroSecondLayerGivesBias) {
  auto p = random_params(3, 3, 5);
  p.theta2.fill(0.0);
  auto f = ffn_forward(from_rows({{1, 2, 3}, {-4, 5, 0.5}, {0, 0, 0}}), p);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(f.out(i, j), p.bias2[j]);
  }
}

TEST(Ffn, PointwiseUnderRowPermutation) {
  auto p = random_params(4, 3, 6);
  auto e = from_rows({{1, -2, 0.3}, {0.1, 0.2, 0.3}, {-1, -1, 2}, {0, 4, -3}});
  auto perm = from_rows({{-1, -1, 2}, {1, -2, 0.3}, {0, 4, -3}, {0.1, 0.2, 0.3}});
  const int order[] = {2, 0, 3, 1};
  auto f = ffn_forward(e, p);
  auto g = ffn_forward(perm, p);
  for (int i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g.out(i, j), f.out(order[i], j));
  }
}

TEST(ScaledDotAttention, SingletonIsIdentity) {
  auto v = from_rows({{0.7, -0.2}});
  auto r = scaled_dot_attention(from_rows({{1, 2}}), from_rows({{3, 4}}), v);
  EXPECT_EQ(r.weights(0, 0), 1.0);
  EXPECT_EQ(r.output, v);
}

TEST(ScaledDotAttention, IdenticalRowsGiveUniformWeights) {
  auto q = from_rows({{0.3, 0.1}, {0.3, 0.1}});
  auto v = from_rows({{1.0, 0.0}, {3.0, 2.0}});
  auto r = scaled_dot_attention(q, q, v);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(r.weights(i, 0), 0.5, 1e-15);
    EXPECT_NEAR(r.output(i, 0), 2.0, 1e-15);
    EXPECT_NEAR(r.output(i, 1), 1.0, 1e-15);
  }
}

TEST(ScaledDotAttention, HandComputedOneDimensionalCase) {
  // Row-1 logits (2, 0): alpha = (e^2, 1) / (e^2 + 1); H_1 = alpha . (1, 3).
  auto r = scaled_dot_attention(from_rows({{2}, {0}}), from_rows({{1}, {0}}), from_rows({{1}, {3}}));
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(r.weights(0, 0), e2 / (e2 + 1), 1e-12);
  EXPECT_NEAR(r.weights(0, 0), 0.8808, 1e-4);
  EXPECT_NEAR(r.weights(0, 1), 0.1192, 1e-4);
  EXPECT_NEAR(r.output(0, 0), 1.2384, 1e-4);
  EXPECT_NEAR(r.output(0, 0), (e2 + 3) / (e2 + 1), 1e-12);
}

TEST(ScaledDotAttention, MaskedKeysGetZeroWeightAndRowsSumToOne) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t l = 1 + rng.below(6), d = 1 + rng.below(5);
    Matrix q(l, d), k(l, d), v(l, d);
    for (auto* m : {&q, &k, &v}) {
      for (auto& x : m->flat()) x = rng.uniform(-3, 3);
    }
    std::vector<std::uint8_t> mask(l);
    for (auto& m : mask) m = rng.bernoulli(0.6);
    mask[rng.below(l)] = 1;
    auto r = scaled_dot_attention(q, k, v, mask);
    for (std::size_t i = 0; i < l; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        EXPECT_GE(r.weights(i, j), 0.0);
        if (!mask[j]) {
          EXPECT_EQ(r.weights(i, j), 0.0);
        }
        s += r.weights(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-10);
    }
  }
}

TEST(ScaledDotAttention, AllKeysMaskedIsAnError) {
  auto m = from_rows({{1.0}, {2.0}});
  const std::uint8_t mask[] = {0, 0};
  EXPECT_THROW(scaled_dot_attention(m, m, m, mask), UsageError);
}

TEST(AggregateContext, SingletonReturnsEncodedInputExactly) {
  auto zi = random_table("Z_I", 10, 4, 3);
  auto zo = random_table("Z_BO", 10, 4, 4);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(5, 4, 10 + trial);
    const Index id = static_cast<Index>(1 + rng.below(9));
    const Index ids[] = {id};
    auto f = aggregate_context(ids, zi, zo, p);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(f.context[j], zi.values(id, j) + p.positions(0, j));
  }
}

TEST(AggregateContext, PermutationInvariantWithoutPositions) {
  auto zi = random_table("Z_I", 10, 4, 3);
  auto zo = random_table("Z_BO", 10, 4, 4);
  auto p = random_params(5, 4, 9);
  p.positions.fill(0.0);
  const Index a[] = {1, 4, 7, 2};
  const Index b[] = {7, 2, 1, 4};
  auto fa = aggregate_context(a, zi, zo, p);
  auto fb = aggregate_context(b, zi, zo, p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(fa.context[j], fb.context[j], 1e-14);
}

TEST(AggregateContext, HandComputedTwoStepPipeline) {
  // d=1, identity FFN, P=0: Q = relu(z_in) = (0.5, 2), K = relu(z_key) = (1, 0),
  // V = z_in. H_i = sum_j softmax_j(Q_i K_j) V_j, c = mean(H).
  EmbeddingTable zi{"Z_I", Geometry::euclidean, from_rows({{0}, {0.5}, {2.0}})};
  EmbeddingTable zo{"Z_BO", Geometry::euclidean, from_rows({{0}, {1.0}, {-1.0}})};
  auto p = identity_ffn(2, 1);
  const Index ids[] = {1, 2};
  auto f = aggregate_context(ids, zi, zo, p);
  const double e05 = std::exp(0.5), e2 = std::exp(2.0);
  const double h1 = (e05 * 0.5 + 1.0 * 2.0) / (e05 + 1.0);
  const double h2 = (e2 * 0.5 + 1.0 * 2.0) / (e2 + 1.0);
  EXPECT_NEAR(f.attn.output(0, 0), h1, 1e-12);
  EXPECT_NEAR(f.attn.output(1, 0), h2, 1e-12);
  EXPECT_NEAR(f.context[0], 0.8725576931151972, 1e-12);
}

TEST(SequenceLogprob, ZeroParametersGiveLogTwoTerms) {
  EmbeddingTable zi{"Z_I", Geometry::euclidean, Matrix(8, 3)};
  EmbeddingTable zo{"Z_BO", Geometry::euclidean, Matrix(8, 3)};
  auto p = AttentionParams::zeros(4, 3);
  const Index ids[] = {1, 2, 3};
  const Index negs[] = {5, 6, 7};
  auto r = sequence_logprob(ids, 4, negs, {zi, zo, zo}, p);
  EXPECT_NEAR(r.loss, 4 * std::log(2.0), 1e-12);
}

namespace {

// Packs every parameter that a sequence loss can touch into one vector so
// central differences can be taken over all of them.
struct Packed {
  std::vector<EmbeddingTable*> tables;
  AttentionParams* params;

  Vec pack() const {
    Vec v;
    for (auto* t : tables) v.insert(v.end(), t->values.flat().begin(), t->values.flat().end());
    for (auto b : std::as_const(*params).blocks()) v.insert(v.end(), b.begin(), b.end());
    return v;
  }
  void unpack(std::span<const double> v) const {
    std::size_t off = 0;
    for (auto* t : tables) {
      auto f = t->values.flat();
      std::copy(v.begin() + off, v.begin() + off + f.size(), f.begin());
      off += f.size();
    }
    for (auto b : params->blocks()) {
      std::copy(v.begin() + off, v.begin() + off + b.size(), b.begin());
      off += b.size();
    }
  }
  Vec gradient(const SequenceLoss& r) const {
    Vec g;
    for (auto* t : tables) {
      Vec dense(t->values.flat().size(), 0.0);
      if (auto* s = r.table_grads.find(t->name)) {
        for (std::size_t k = 0; k < s->size(); ++k) {
          auto row = s->grad(k);
          std::copy(row.begin(), row.end(), dense.begin() + s->rows()[k] * t->dim());
        }
      }
      g.insert(g.end(), dense.begin(), dense.end());
    }
    for (auto b : r.param_grads.blocks()) g.insert(g.end(), b.begin(), b.end());
    return g;
  }
};

void check_wiring(EmbeddingTable& input, EmbeddingTable& key, EmbeddingTable& score,
                  std::vector<EmbeddingTable*> distinct, std::uint64_t seed) {
  Rng rng(seed);
  for (int point = 0; point < 3; ++point) {
    for (auto* t : distinct) {
      for (std::size_t r = 1; r < t->rows(); ++r) {
        for (auto& v : t->values.row(r)) v = rng.uniform(-0.6, 0.6);
      }
    }
    auto params = random_params(6, 4, seed * 10 + point);
    std::vector<Index> ids;
    const auto len = 2 + rng.below(4);
    for (std::size_t k = 0; k < len; ++k) ids.push_back(static_cast<Index>(1 + rng.below(input.rows() - 1)));
    const Index target = 2;
    const Index negs[] = {1, 4, 5};
    SequenceTables tables{input, key, score};
    auto r = sequence_logprob(ids, target, negs, tables, params);
    Packed pk{distinct, &params};
    auto theta = pk.pack();
    auto analytic = pk.gradient(r);
    auto rep = grad_check(
        [&](std::span<const double> x) {
          pk.unpack(x);
          const double f = sequence_logprob(ids, target, negs, tables, params).loss;
          pk.unpack(theta);
          return f;
        },
        theta, analytic);
    EXPECT_TRUE(rep.passed()) << "point " << point << " rel " << rep.max_rel_error << " at "
                              << rep.worst_index;
  }
}

}  // namespace

TEST(SequenceLogprob, GradientCheckItemWiring) {
  // Buy and view share the shape: queries/values from Z_I, keys and
  // targets from the task's output table.
  auto zi = random_table("Z_I", 7, 4, 1);
  auto zo = random_table("Z_BO", 7, 4, 2);
  check_wiring(zi, zo, zo, {&zi, &zo}, 31);
  auto zv = random_table("Z_VO", 7, 4, 3);
  check_wiring(zi, zv, zv, {&zi, &zv}, 32);
}

TEST(SequenceLogprob, GradientCheckWordWiring) {
  // Search and describe: words for queries and keys, Z_I as target table.
  auto w = random_table("W", 9, 4, 5);
  auto zi = random_table("Z_I", 7, 4, 6);
  check_wiring(w, w, zi, {&w, &zi}, 41);
}

TEST(SequenceLogprob, TrainedToyRankingMatchesFullSoftmax) {
  auto zi = random_table("Z_I", 6, 3, 11, 0.1);
  auto zo = random_table("Z_BO", 6, 3, 12, 0.1);
  auto p = AttentionParams::init(3, 3, 13);
  const Index ctx[] = {1, 2};
  // A few SGD steps on one context -> target pair.
  for (int step = 0; step < 50; ++step) {
    const Index negs[] = {3, 4, 5};
    auto r = sequence_logprob(ctx, 2, negs, {zi, zo, zo}, p);
    sgd_update(zi, *r.table_grads.find("Z_I"), 0.1);
    sgd_update(zo, *r.table_grads.find("Z_BO"), 0.1);
    auto blocks = p.blocks();
    auto gblocks = r.param_grads.blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b) sgd_update(blocks[b], gblocks[b], 0.1, "attn");
  }
  auto f = aggregate_context(ctx, zi, zo, p);
  std::vector<Index> by_score{1, 2, 3, 4, 5}, by_full{1, 2, 3, 4, 5};
  std::sort(by_score.begin(), by_score.end(),
            [&](Index a, Index b) { return dot(f.context, zo.row(a)) > dot(f.context, zo.row(b)); });
  std::sort(by_full.begin(), by_full.end(), [&](Index a, Index b) {
    return softmax_logprob_full(f.context, zo, a) > softmax_logprob_full(f.context, zo, b);
  });
  EXPECT_EQ(by_score, by_full);
  EXPECT_EQ(by_score.front(), 2u);
}

namespace {

Matrix dense(const TableGradSet& g, const std::string& name, std::size_t rows, std::size_t dim) {
  Matrix out(rows, dim);
  if (const auto* s = g.find(name)) {
    for (std::size_t k = 0; k < s->size(); ++k) axpy(1.0, s->grad(k), out.row(s->rows()[k]));
  }
  return out;
}

}  // namespace

TEST(SequenceLogprobBatch, EqualsSumOfSingleExamples) {
  auto zi = random_table("Z_I", 12, 5, 31);
  auto zo = random_table("Z_BO", 12, 5, 32);
  auto p = random_params(6, 5, 33);
  const std::vector<std::vector<Index>> ctx{{1}, {2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11, 1, 2}, {3, 3}};
  const std::vector<Index> targets{2, 5, 9, 4, 11};
  const std::vector<std::vector<Index>> negs{{3, 4, 5}, {1, 6, 7}, {2, 10, 11}, {5, 6, 7}, {1, 2, 8}};
  std::vector<SequenceItem> batch;
  for (std::size_t b = 0; b < ctx.size(); ++b) batch.push_back({ctx[b], targets[b], negs[b]});
  const SequenceTables tables{zi, zo, zo};
  auto got = sequence_logprob_batch(batch, tables, p);

  double loss = 0.0;
  TableGradSet grads(5);
  auto pg = AttentionParams::zeros(6, 5);
  for (std::size_t b = 0; b < ctx.size(); ++b) {
    auto r = sequence_logprob(ctx[b], targets[b], negs[b], tables, p);
    loss += r.loss;
    grads.merge(r.table_grads);
    auto dst = pg.blocks();
    auto src = std::as_const(r.param_grads).blocks();
    for (std::size_t k = 0; k < dst.size(); ++k) axpy(1.0, src[k], dst[k]);
  }
  EXPECT_NEAR(got.loss, loss, 1e-12);
  for (const char* name : {"Z_I", "Z_BO"}) {
    auto a = dense(got.table_grads, name, 12, 5), b = dense(grads, name, 12, 5);
    for (std::size_t i = 0; i < a.flat().size(); ++i) EXPECT_NEAR(a.flat()[i], b.flat()[i], 1e-12) << name;
  }
  auto a = std::as_const(got.param_grads).blocks();
  auto b = std::as_const(pg).blocks();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].size(); ++i) EXPECT_NEAR(a[k][i], b[k][i], 1e-12);
  }
}
