#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pkge/data_model.hpp"

namespace fs = std::filesystem;
using namespace pkge;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("pkge_dm_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream(path_ / name) << text;
  }

 private:
  fs::path path_;
};

RawSession session(std::int64_t ts, std::vector<std::string> items) { return {ts, std::move(items)}; }

}  // namespace

TEST(Ingest, EmptySessionsFileGivesEmptyCollection) {
  TempDir dir;
  dir.write("buy_sessions.tsv", "");
  auto raw = read_raw(DataPaths::in_dir(dir.path()));
  EXPECT_TRUE(raw.buy.empty());
}

TEST(Ingest, BuySequenceLine) {
  TempDir dir;
  dir.write("buy_sessions.tsv", "i1 i2 i3\n");
  auto ds = ingest_dataset(DataPaths::in_dir(dir.path()));
  ASSERT_EQ(ds.buy.size(), 1u);
  EXPECT_EQ(ds.buy[0].items.size(), 3u);
  EXPECT_EQ(ds.buy[0].kind, SessionKind::buy);

  dir.write("buy_sessions.tsv", "17\ti1 i2 i3\n");
  ds = ingest_dataset(DataPaths::in_dir(dir.path()));
  ASSERT_EQ(ds.buy.size(), 1u);
  EXPECT_EQ(ds.buy[0].timestamp, 17);
}

TEST(Ingest, SelfSubstitutionRejected) {
  TempDir dir;
  dir.write("substitutions.tsv", "i7\ti7\n");
  EXPECT_THROW(read_raw(DataPaths::in_dir(dir.path())), DataError);
}

TEST(Ingest, MalformedLineNamesFileAndLine) {
  TempDir dir;
  dir.write("search.tsv", "1\tapple\ti1\nbroken line\n");
  try {
    read_raw(DataPaths::in_dir(dir.path()));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("search.tsv:2"), std::string::npos) << msg;
  }
}

TEST(Ingest, UnknownCategoryLabelIsAnError) {
  TempDir dir;
  dir.write("category_edges.tsv", "leaf\troot\n");
  dir.write("catalog.tsv", "i1\tred apple\tleaf/elsewhere\n");
  EXPECT_THROW(ingest_dataset(DataPaths::in_dir(dir.path())), DataError);
}

TEST(Ingest, CategoryEdgesDerivedFromPathsWhenAbsent) {
  TempDir dir;
  dir.write("catalog.tsv", "i1\tred apple\tsub/cat/dep/super\ni2\tpear\tsub2/cat/dep/super\n");
  auto ds = ingest_dataset(DataPaths::in_dir(dir.path()));
  EXPECT_EQ(ds.vocab.categories.entity_count(), 5u);
  EXPECT_EQ(ds.category_edges.size(), 4u);
  ASSERT_EQ(ds.catalog.size(), 2u);
  EXPECT_EQ(ds.catalog[0].category_path.size(), 4u);
}

TEST(Ingest, ShortSessionsAreReportedAndDropped) {
  TempDir dir;
  dir.write("view_sessions.tsv", "1\ta\n2\ta b\n");
  IngestReport rep;
  auto raw = read_raw(DataPaths::in_dir(dir.path()), &rep);
  EXPECT_EQ(raw.view.size(), 1u);
  EXPECT_EQ(rep.short_sessions_dropped, 1u);
}

TEST(Ingest, ExportThenReingestRoundTrips) {
  // Property: any record collection survives write_raw/read_raw unchanged.
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    RawDataset raw;
    auto key = [&](const char* p) { return std::string(p) + std::to_string(rng.below(30)); };
    for (int i = 0; i < 15; ++i) {
      RawSession s{static_cast<std::int64_t>(rng.below(1000)), {}};
      auto len = 2 + rng.below(5);
      for (std::size_t k = 0; k < len; ++k) s.items.push_back(key("i"));
      (rng.bernoulli(0.5) ? raw.buy : raw.view).push_back(s);
    }
    for (int i = 0; i < 5; ++i) {
      auto a = key("i");
      auto b = a + "x";
      raw.substitutions.push_back({static_cast<std::int64_t>(i), a, b});
      raw.searches.push_back({static_cast<std::int64_t>(i), {key("w"), key("w")}, a});
      raw.catalog.push_back({a, {key("w")}, {"leaf" + std::to_string(i), "root"}});
      raw.category_edges.push_back({"leaf" + std::to_string(i), "root"});
    }
    TempDir dir;
    write_raw(raw, dir.path());
    EXPECT_EQ(read_raw(DataPaths::in_dir(dir.path())), raw);
  }
}

TEST(Filter, ItemBelowThresholdRemoved) {
  RawDataset raw;
  // "rare" appears 9 times, "common" 10 times.
  for (int i = 0; i < 9; ++i) raw.buy.push_back(session(i, {"rare", "common"}));
  raw.view.push_back(session(10, {"common", "other"}));
  for (int i = 0; i < 9; ++i) raw.view.push_back(session(11 + i, {"other", "x"}));
  auto out = filter_infrequent(raw, {10, 3});
  for (const auto* s : {&out.buy, &out.view}) {
    for (const auto& seq : *s) {
      for (const auto& it : seq.items) EXPECT_NE(it, "rare");
    }
  }
  // Buy sessions lost "rare" and fell below length 2.
  EXPECT_TRUE(out.buy.empty());
}

TEST(Filter, WordAtThresholdKept) {
  RawDataset raw;
  raw.catalog.push_back({"i1", {"apple", "apple", "apple", "pear"}, {"c"}});
  for (int i = 0; i < 10; ++i) raw.buy.push_back(session(i, {"i1", "i1"}));
  auto out = filter_infrequent(raw, {10, 3});
  ASSERT_EQ(out.catalog.size(), 1u);
  EXPECT_EQ(out.catalog[0].description, (std::vector<std::string>{"apple", "apple", "apple"}));
}

TEST(Filter, NoOpWhenEverythingFrequent) {
  RawDataset raw;
  for (int i = 0; i < 10; ++i) raw.buy.push_back(session(i, {"a", "b"}));
  raw.searches.push_back({1, {"w", "w", "w"}, "a"});
  raw.category_edges.push_back({"c", "d"});
  auto out = filter_infrequent(raw, {10, 3});
  EXPECT_EQ(out, raw);
}

TEST(Filter, NoSurvivingSequenceContainsRemovedEntity) {
  Rng rng(3);
  RawDataset raw;
  for (int i = 0; i < 200; ++i) {
    RawSession s{i, {}};
    auto len = 2 + rng.below(6);
    for (std::size_t k = 0; k < len; ++k) s.items.push_back("i" + std::to_string(rng.below(60)));
    raw.buy.push_back(s);
  }
  std::map<std::string, int> count;
  for (const auto& s : raw.buy) {
    for (const auto& i : s.items) ++count[i];
  }
  auto out = filter_infrequent(raw, {25, 3});
  for (const auto& s : out.buy) {
    EXPECT_GE(s.items.size(), 2u);
    for (const auto& i : s.items) EXPECT_GE(count[i], 25);
  }
}

TEST(Vocab, LexicographicWithPadZero) {
  auto v = Vocabulary::build(std::vector<std::string>{"b", "a"});
  EXPECT_EQ(v.at("a"), 1u);
  EXPECT_EQ(v.at("b"), 2u);
  EXPECT_EQ(v.key(kPad), Vocabulary::kPadKey);
}

TEST(Vocab, EmptyNamespaceHasOnlyPad) {
  auto vocab = build_vocab(RawDataset{});
  EXPECT_EQ(vocab.items.size(), 1u);
  EXPECT_EQ(vocab.words.size(), 1u);
}

TEST(Vocab, RebuildIsDeterministic) {
  RawDataset raw;
  raw.buy.push_back(session(1, {"z", "y", "x"}));
  raw.searches.push_back({1, {"q", "p"}, "x"});
  auto a = build_vocab(raw);
  auto b = build_vocab(raw);
  EXPECT_EQ(a.items, b.items);
  EXPECT_EQ(a.words, b.words);
}

namespace {
struct Rec {
  std::int64_t timestamp;
  int tag;
};
std::vector<Rec> records(std::size_t n) {
  std::vector<Rec> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back({static_cast<std::int64_t>(n - i), static_cast<int>(i)});
  return v;
}
}  // namespace

TEST(Split, TenRecordsGiveEightOneOne) {
  auto s = chronological_split(records(10));
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.validation.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split, FiveRecordsNeedAllowEmpty) {
  // floor(0.1 * 5) = 0 for validation and test.
  EXPECT_THROW(chronological_split(records(5)), DataError);
  auto s = chronological_split(records(5), {}, true);
  EXPECT_EQ(s.train.size(), 5u);
  EXPECT_TRUE(s.validation.empty());
  EXPECT_TRUE(s.test.empty());
}

TEST(Split, TooFewRecords) { EXPECT_THROW(chronological_split(records(2)), DataError); }

TEST(Split, TiesKeepInputOrder) {
  std::vector<Rec> v;
  for (int i = 0; i < 20; ++i) v.push_back({i < 10 ? 5 : 1, i});
  auto s = chronological_split(v);
  // ts=1 records (tags 10..19) come first, in input order.
  EXPECT_EQ(s.train.front().tag, 10);
  for (std::size_t i = 1; i < s.train.size(); ++i) {
    if (s.train[i].timestamp == s.train[i - 1].timestamp) {
      EXPECT_GT(s.train[i].tag, s.train[i - 1].tag);
    }
  }
  EXPECT_EQ(s.test.back().tag, 9);
}

TEST(Split, BoundariesMonotoneDisjointAndCovering) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Rec> v;
    const auto n = 3 + rng.below(200);
    for (std::size_t i = 0; i < n; ++i) v.push_back({static_cast<std::int64_t>(rng.below(50)), static_cast<int>(i)});
    auto s = chronological_split(v, {}, true);
    EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), n);
    std::set<int> tags;
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      for (const auto& r : *part) tags.insert(r.tag);
    }
    EXPECT_EQ(tags.size(), n);
    for (const auto& a : s.train) {
      for (const auto& b : s.validation) EXPECT_LE(a.timestamp, b.timestamp);
      for (const auto& b : s.test) EXPECT_LE(a.timestamp, b.timestamp);
    }
    for (const auto& a : s.validation) {
      for (const auto& b : s.test) EXPECT_LE(a.timestamp, b.timestamp);
    }
  }
}
