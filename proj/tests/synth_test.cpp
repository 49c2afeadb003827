#include <gtest/gtest.h>

#include <sstream>

#include "pkge/synth.hpp"

using namespace pkge;
namespace fs = std::filesystem;

namespace {

SynthConfig small() {
  SynthConfig c;
  c.items = 100;
  c.words = 60;
  c.clusters = 20;
  c.tree = {2, 2, 2, 2};
  c.buy_sessions = 500;
  c.view_sessions = 500;
  c.substitutions = 300;
  c.searches = 300;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

}  // namespace

TEST(Synth, FixedSeedWritesIdenticalFiles) {
  const auto dir = fs::temp_directory_path() / "pkge_synth";
  write_synth(generate(small()), dir / "a");
  write_synth(generate(small()), dir / "b");
  for (const char* f : {"catalog.tsv", "buy_sessions.tsv", "view_sessions.tsv", "substitutions.tsv", "search.tsv",
                        "category_edges.tsv", "ground_truth.tsv"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    EXPECT_FALSE(slurp(dir / "a" / f).empty()) << f;
  }
  EXPECT_EQ(read_ground_truth(dir / "a" / "ground_truth.tsv"), generate(small()).truth);
  auto other = small();
  other.seed = 8;
  EXPECT_FALSE(generate(other).raw == generate(small()).raw);
  fs::remove_all(dir);
}

TEST(Synth, NoiseFreeBuySessionsAreComplementChains) {
  auto c = small();
  c.noise = 0.0;
  auto out = generate(c);
  EXPECT_EQ(out.stats.noise_tokens, 0u);
  const auto& comp = out.truth.at("complement");
  for (const auto& s : out.raw.buy) {
    for (std::size_t k = 1; k < s.items.size(); ++k) EXPECT_TRUE(contains(comp.at(s.items[k - 1]), s.items[k]));
  }
}

TEST(Synth, NoiseFractionConcentrates) {
  auto c = small();
  c.noise = 0.2;
  c.buy_sessions = 5000;
  c.view_sessions = 5000;
  auto out = generate(c);
  const double f = static_cast<double>(out.stats.noise_tokens) / static_cast<double>(out.stats.session_tokens);
  EXPECT_NEAR(f, 0.2, 0.01);
}

TEST(Synth, OracleRank) {
  auto c = small();
  c.items = 25;
  c.clusters = 5;
  c.rules_per_cluster = 1;
  auto out = generate(c);
  const auto head = synth_item_key(0);
  auto subs = oracle_rank(out.truth, "substitute", head);
  EXPECT_EQ(subs.size(), 4u);
  EXPECT_FALSE(contains(subs, head));
  auto comp = oracle_rank(out.truth, "complement", head);
  ASSERT_EQ(comp.size(), 5u);
  const auto target = out.cluster_of[std::stoul(comp[0].substr(4)) - 1];
  EXPECT_NE(target, out.cluster_of[0]);
  for (const auto& k : comp) EXPECT_EQ(out.cluster_of[std::stoul(k.substr(4)) - 1], target);
  EXPECT_THROW(oracle_rank(out.truth, "substitute", "nope"), UsageError);
  EXPECT_THROW(oracle_rank(out.truth, "likes", head), UsageError);

  // Six items in five clusters: four singletons have no substitutes.
  c.items = 6;
  auto tiny = generate(c);
  std::size_t empty = 0;
  for (std::size_t i = 0; i < 6; ++i) empty += oracle_rank(tiny.truth, "substitute", synth_item_key(i)).empty();
  EXPECT_EQ(empty, 4u);

  c.rules_per_cluster = 0;
  EXPECT_THROW(generate(c), UsageError);
}

TEST(Synth, InfeasibleConfigs) {
  auto c = small();
  c.clusters = c.items + 1;
  EXPECT_THROW(generate(c), UsageError);
  c = small();
  c.noise = 1.0;
  EXPECT_THROW(generate(c), UsageError);
  c = small();
  c.min_session = 1;
  EXPECT_THROW(generate(c), UsageError);
}

TEST(Synth, PassesIngestionUnmodified) {
  const auto dir = fs::temp_directory_path() / "pkge_synth_ingest";
  auto out = generate(small());
  write_synth(out, dir);
  auto ds = ingest_dataset(DataPaths::in_dir(dir));
  EXPECT_EQ(ds.buy.size(), out.raw.buy.size());
  EXPECT_EQ(ds.view.size(), out.raw.view.size());
  EXPECT_EQ(ds.catalog.size(), 100u);
  EXPECT_EQ(to_raw(ds).category_edges.size(), out.raw.category_edges.size());
  fs::remove_all(dir);
}

TEST(Synth, ClusterSharesSubcategory) {
  auto out = generate(small());
  std::map<std::size_t, std::string> leaf;
  for (const auto& e : out.raw.catalog) {
    const auto c = out.cluster_of[std::stoul(e.item.substr(4)) - 1];
    ASSERT_EQ(e.category_path.size(), 4u);
    auto [it, fresh] = leaf.emplace(c, e.category_path.front());
    EXPECT_EQ(it->second, e.category_path.front());
  }
}

TEST(Synth, SubstitutesCoViewMoreThanRandomPairs) {
  auto c = small();
  c.noise = 0.25;
  auto out = generate(c);
  std::map<std::pair<std::string, std::string>, std::size_t> co;
  for (const auto& s : out.raw.view) {
    std::set<std::string> u(s.items.begin(), s.items.end());
    for (const auto& a : u) {
      for (const auto& b : u) {
        if (a < b) ++co[{a, b}];
      }
    }
  }
  auto count = [&](const std::string& a, const std::string& b) {
    auto it = co.find(std::minmax(a, b));
    return it == co.end() ? 0u : it->second;
  };
  double planted = 0, random = 0;
  std::size_t np = 0, nr = 0;
  Rng rng(1);
  for (const auto& [h, tails] : out.truth.at("substitute")) {
    for (const auto& t : tails) {
      planted += count(h, t);
      ++np;
      const auto r = synth_item_key(rng.below(c.items));
      if (r != h) {
        random += count(h, r);
        ++nr;
      }
    }
  }
  EXPECT_GT(planted / np, random / nr);
}
