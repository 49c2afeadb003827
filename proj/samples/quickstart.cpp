// Small end-to-end run in one process: synthetic data, multi-task
// training, then the nearest substitutes of one item.

#include <algorithm>
#include <cstdio>

#include "pkge/eval.hpp"
#include "pkge/synth.hpp"
#include "pkge/trainer.hpp"

int main() {
  using namespace pkge;
  SynthConfig sc;
  sc.items = 300;
  sc.words = 120;
  sc.clusters = 30;
  sc.buy_sessions = sc.view_sessions = 3000;
  sc.substitutions = 1500;
  sc.searches = 3000;
  auto synth = generate(sc);

  auto raw = filter_infrequent(synth.raw, {3, 3});
  auto ds = resolve(raw, build_vocab(raw));
  auto data = make_training_data(ds);
  auto init = PkgModel::init(data.n_items, data.n_words, data.n_categories, 16, {}, 7);
  hierarchy_pretrain(ds.category_edges, init.categories, BallConfig{});

  TrainConfig tc;
  tc.lr = 0.1;
  tc.max_epochs = 5;
  auto res = train(tc, data, init);
  std::printf("best epoch %zu of %zu\n", res.best_epoch, res.epochs_run);

  const Index head[] = {1};
  auto ranked = rank_tail(res.model, Relation::substitute, head, {}, head);
  const auto& truth = oracle_rank(synth.truth, "substitute", ds.vocab.items.key(1));
  std::printf("substitutes of %s (planted: %zu)\n", ds.vocab.items.key(1).c_str(), truth.size());
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& key = ds.vocab.items.key(ranked.ids[i]);
    const bool planted = std::find(truth.begin(), truth.end(), key) != truth.end();
    std::printf("%2zu  %s  %.4f%s\n", i + 1, key.c_str(), ranked.scores[i], planted ? "  *" : "");
  }
  auto m = truth_metrics(
      [&](Index h) {
        const Index q[] = {h};
        return pkg_scores(res.model, Relation::substitute, q);
      },
      resolve_truth(synth.truth, "substitute", ds.vocab.items, ds.vocab.items), data.n_items, 10, 0);
  std::printf("substitute HIT@10 vs ground truth %.3f (random %.3f)\n", m.hit, 10.0 / static_cast<double>(data.n_items - 1));
}
