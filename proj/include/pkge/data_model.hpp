#pragma once

// Entities, record types, ingestion of the five raw modalities, frequency
// filtering, vocabularies and chronological splits.

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pkge/common.hpp"

namespace pkge {

using Index = std::uint32_t;
inline constexpr Index kPad = 0;

enum class Namespace { item, word, category };

inline const char* to_string(Namespace ns) {
  switch (ns) {
    case Namespace::item: return "item";
    case Namespace::word: return "word";
    case Namespace::category: return "category";
  }
  return "?";
}

struct EntityId {
  Namespace ns = Namespace::item;
  Index index = kPad;
  friend bool operator==(const EntityId&, const EntityId&) = default;
};

/// Dense id assignment for one namespace. Id 0 is PAD; real keys get
/// 1..n in lexicographic order of their raw string.
class Vocabulary {
 public:
  static constexpr const char* kPadKey = "<PAD>";

  Vocabulary() : keys_{kPadKey} {}

  template <typename Range>
  static Vocabulary build(const Range& raw_keys) {
    std::vector<std::string> keys(std::begin(raw_keys), std::end(raw_keys));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    Vocabulary v;
    for (auto& k : keys) {
      v.index_.emplace(k, static_cast<Index>(v.keys_.size()));
      v.keys_.push_back(std::move(k));
    }
    return v;
  }

  /// Number of ids including PAD.
  std::size_t size() const { return keys_.size(); }
  /// Number of real (non-PAD) entities.
  std::size_t entity_count() const { return keys_.size() - 1; }

  std::optional<Index> find(std::string_view key) const {
    auto it = index_.find(std::string(key));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  Index at(std::string_view key) const {
    auto id = find(key);
    if (!id) throw DataError("unknown key '" + std::string(key) + "'");
    return *id;
  }

  const std::string& key(Index id) const { return keys_.at(id); }
  const std::vector<std::string>& keys() const { return keys_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.keys_ == b.keys_;
  }

 private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, Index> index_;
};

struct Vocabularies {
  Vocabulary items;
  Vocabulary words;
  Vocabulary categories;

  const Vocabulary& of(Namespace ns) const {
    switch (ns) {
      case Namespace::item: return items;
      case Namespace::word: return words;
      default: return categories;
    }
  }
};

// ---------------------------------------------------------------------------
// Raw records (string keys), as read from disk.

struct RawSession {
  std::int64_t timestamp = 0;
  std::vector<std::string> items;
  friend bool operator==(const RawSession&, const RawSession&) = default;
};

struct RawSubstitution {
  std::int64_t timestamp = 0;
  std::string accepted_for;
  std::string substitute;
  friend bool operator==(const RawSubstitution&, const RawSubstitution&) = default;
};

struct RawSearch {
  std::int64_t timestamp = 0;
  std::vector<std::string> query_words;
  std::string clicked_item;
  friend bool operator==(const RawSearch&, const RawSearch&) = default;
};

struct RawCatalogEntry {
  std::string item;
  std::vector<std::string> description;
  std::vector<std::string> category_path;  // leaf -> root
  friend bool operator==(const RawCatalogEntry&, const RawCatalogEntry&) = default;
};

struct RawCategoryEdge {
  std::string child;
  std::string parent;
  friend bool operator==(const RawCategoryEdge&, const RawCategoryEdge&) = default;
};

struct RawDataset {
  std::vector<RawSession> buy;
  std::vector<RawSession> view;
  std::vector<RawSubstitution> substitutions;
  std::vector<RawSearch> searches;
  std::vector<RawCatalogEntry> catalog;
  std::vector<RawCategoryEdge> category_edges;
  friend bool operator==(const RawDataset&, const RawDataset&) = default;
};

// ---------------------------------------------------------------------------
// Resolved records (dense ids).

enum class SessionKind { buy, view };

struct SessionSequence {
  SessionKind kind = SessionKind::buy;
  std::vector<Index> items;
  std::int64_t timestamp = 0;
  friend bool operator==(const SessionSequence&, const SessionSequence&) = default;
};

struct SubstitutionPair {
  Index accepted_for = kPad;
  Index substitute = kPad;
  std::int64_t timestamp = 0;
  friend bool operator==(const SubstitutionPair&, const SubstitutionPair&) = default;
};

struct SearchRecord {
  std::vector<Index> query_words;
  Index clicked_item = kPad;
  std::int64_t timestamp = 0;
  friend bool operator==(const SearchRecord&, const SearchRecord&) = default;
};

struct CatalogEntry {
  Index item = kPad;
  std::vector<Index> description;
  std::vector<Index> category_path;  // leaf -> root, 1..4 labels
  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

struct CategoryEdge {
  Index child = kPad;
  Index parent = kPad;
  friend bool operator==(const CategoryEdge&, const CategoryEdge&) = default;
};

struct Dataset {
  Vocabularies vocab;
  std::vector<SessionSequence> buy;
  std::vector<SessionSequence> view;
  std::vector<SubstitutionPair> substitutions;
  std::vector<SearchRecord> searches;
  std::vector<CatalogEntry> catalog;
  std::vector<CategoryEdge> category_edges;
};

// ---------------------------------------------------------------------------
// File layout.

struct DataPaths {
  std::filesystem::path catalog;
  std::filesystem::path buy_sessions;
  std::filesystem::path view_sessions;
  std::filesystem::path substitutions;
  std::filesystem::path search;
  std::filesystem::path category_edges;

  static DataPaths in_dir(const std::filesystem::path& dir) {
    return {dir / "catalog.tsv",       dir / "buy_sessions.tsv",
            dir / "view_sessions.tsv", dir / "substitutions.tsv",
            dir / "search.tsv",        dir / "category_edges.tsv"};
  }
};

struct IngestReport {
  std::size_t lines_read = 0;
  std::size_t short_sessions_dropped = 0;
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Whitespace tokenization; empty input gives an empty list.
inline std::vector<std::string> tokens(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

inline std::string where(const std::filesystem::path& file, std::size_t line) {
  return file.string() + ":" + std::to_string(line) + ": ";
}

inline std::int64_t parse_timestamp(const std::string& s,
                                    const std::filesystem::path& file,
                                    std::size_t line) {
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw DataError(where(file, line) + "bad timestamp '" + s + "'");
  }
  return v;
}

// Calls fn(line_text, line_number) for every non-empty line. A missing file
// reads as empty.
template <typename Fn>
void for_each_line(const std::filesystem::path& file, Fn&& fn) {
  if (file.empty() || !std::filesystem::exists(file)) return;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(line, n);
  }
}

inline void read_sessions(const std::filesystem::path& file,
                          std::vector<RawSession>& out, IngestReport& report) {
  for_each_line(file, [&](const std::string& line, std::size_t n) {
    ++report.lines_read;
    auto fields = split(line, '\t');
    RawSession s;
    if (fields.size() == 1) {
      // Untimestamped line: fall back to file order.
      s.timestamp = static_cast<std::int64_t>(n);
      s.items = tokens(fields[0]);
    } else if (fields.size() == 2) {
      s.timestamp = parse_timestamp(fields[0], file, n);
      s.items = tokens(fields[1]);
    } else {
      throw DataError(where(file, n) + "expected timestamp<TAB>items");
    }
    if (s.items.size() < 2) {
      ++report.short_sessions_dropped;
      return;
    }
    out.push_back(std::move(s));
  });
}

}  // namespace detail

/// First pass of ingestion: parse every file into string-keyed records.
inline RawDataset read_raw(const DataPaths& paths, IngestReport* report = nullptr) {
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  RawDataset raw;
  using detail::split;
  using detail::tokens;
  using detail::where;

  detail::for_each_line(paths.catalog, [&](const std::string& line, std::size_t n) {
    ++rep.lines_read;
    auto f = split(line, '\t');
    if (f.size() != 3 || f[0].empty()) {
      throw DataError(where(paths.catalog, n) +
                      "expected item<TAB>description<TAB>category/path");
    }
    RawCatalogEntry e{f[0], tokens(f[1]), {}};
    if (!f[2].empty()) e.category_path = split(f[2], '/');
    if (e.category_path.empty() || e.category_path.size() > 4) {
      throw DataError(where(paths.catalog, n) + "category path must have 1..4 labels");
    }
    for (const auto& c : e.category_path) {
      if (c.empty()) throw DataError(where(paths.catalog, n) + "empty category label");
    }
    raw.catalog.push_back(std::move(e));
  });

  detail::read_sessions(paths.buy_sessions, raw.buy, rep);
  detail::read_sessions(paths.view_sessions, raw.view, rep);

  detail::for_each_line(paths.substitutions, [&](const std::string& line, std::size_t n) {
    ++rep.lines_read;
    auto f = split(line, '\t');
    RawSubstitution s;
    if (f.size() == 2) {
      s = {static_cast<std::int64_t>(n), f[0], f[1]};
    } else if (f.size() == 3) {
      s = {detail::parse_timestamp(f[0], paths.substitutions, n), f[1], f[2]};
    } else {
      throw DataError(where(paths.substitutions, n) + "expected timestamp<TAB>item<TAB>item");
    }
    if (s.accepted_for.empty() || s.substitute.empty()) {
      throw DataError(where(paths.substitutions, n) + "empty item key");
    }
    if (s.accepted_for == s.substitute) {
      throw DataError(where(paths.substitutions, n) + "self-substitution of '" +
                      s.accepted_for + "'");
    }
    raw.substitutions.push_back(std::move(s));
  });

  detail::for_each_line(paths.search, [&](const std::string& line, std::size_t n) {
    ++rep.lines_read;
    auto f = split(line, '\t');
    if (f.size() != 3) {
      throw DataError(where(paths.search, n) + "expected timestamp<TAB>query<TAB>item");
    }
    RawSearch s{detail::parse_timestamp(f[0], paths.search, n), tokens(f[1]), f[2]};
    if (s.query_words.empty()) throw DataError(where(paths.search, n) + "empty query");
    if (s.clicked_item.empty()) throw DataError(where(paths.search, n) + "empty item key");
    raw.searches.push_back(std::move(s));
  });

  detail::for_each_line(paths.category_edges, [&](const std::string& line, std::size_t n) {
    ++rep.lines_read;
    auto f = split(line, '\t');
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw DataError(where(paths.category_edges, n) + "expected child<TAB>parent");
    }
    raw.category_edges.push_back({f[0], f[1]});
  });
  return raw;
}

/// Writes records back in the ingestion formats; re-reading reproduces them.
inline void write_raw(const RawDataset& raw, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto paths = DataPaths::in_dir(dir);
  using detail::join;
  {
    std::ofstream out(paths.catalog);
    for (const auto& e : raw.catalog) {
      out << e.item << '\t' << join(e.description, ' ') << '\t'
          << join(e.category_path, '/') << '\n';
    }
  }
  auto sessions = [](const std::filesystem::path& p, const std::vector<RawSession>& v) {
    std::ofstream out(p);
    for (const auto& s : v) out << s.timestamp << '\t' << join(s.items, ' ') << '\n';
  };
  sessions(paths.buy_sessions, raw.buy);
  sessions(paths.view_sessions, raw.view);
  {
    std::ofstream out(paths.substitutions);
    for (const auto& s : raw.substitutions) {
      out << s.timestamp << '\t' << s.accepted_for << '\t' << s.substitute << '\n';
    }
  }
  {
    std::ofstream out(paths.search);
    for (const auto& s : raw.searches) {
      out << s.timestamp << '\t' << join(s.query_words, ' ') << '\t' << s.clicked_item << '\n';
    }
  }
  {
    std::ofstream out(paths.category_edges);
    for (const auto& e : raw.category_edges) out << e.child << '\t' << e.parent << '\n';
  }
}

struct FilterThresholds {
  std::size_t item_min = 10;
  std::size_t word_min = 3;
};

/// Removes items with fewer than item_min total appearances (purchase, view,
/// search click, substitution) and words with fewer than word_min
/// appearances (description, query). Every occurrence counts, including
/// repeats inside one session.
inline RawDataset filter_infrequent(const RawDataset& raw, FilterThresholds t = {}) {
  std::unordered_map<std::string, std::size_t> item_count;
  std::unordered_map<std::string, std::size_t> word_count;
  for (const auto* sessions : {&raw.buy, &raw.view}) {
    for (const auto& s : *sessions) {
      for (const auto& i : s.items) ++item_count[i];
    }
  }
  for (const auto& s : raw.searches) {
    ++item_count[s.clicked_item];
    for (const auto& w : s.query_words) ++word_count[w];
  }
  for (const auto& s : raw.substitutions) {
    ++item_count[s.accepted_for];
    ++item_count[s.substitute];
  }
  for (const auto& e : raw.catalog) {
    for (const auto& w : e.description) ++word_count[w];
  }
  auto keep_item = [&](const std::string& i) {
    auto it = item_count.find(i);
    return it != item_count.end() && it->second >= t.item_min;
  };
  auto keep_word = [&](const std::string& w) {
    auto it = word_count.find(w);
    return it != word_count.end() && it->second >= t.word_min;
  };
  auto filter_words = [&](const std::vector<std::string>& words) {
    std::vector<std::string> out;
    for (const auto& w : words) {
      if (keep_word(w)) out.push_back(w);
    }
    return out;
  };

  RawDataset out;
  out.category_edges = raw.category_edges;
  for (const auto& [src, dst] : {std::pair{&raw.buy, &out.buy}, std::pair{&raw.view, &out.view}}) {
    for (const auto& s : *src) {
      RawSession f{s.timestamp, {}};
      for (const auto& i : s.items) {
        if (keep_item(i)) f.items.push_back(i);
      }
      if (f.items.size() >= 2) dst->push_back(std::move(f));
    }
  }
  for (const auto& s : raw.substitutions) {
    if (keep_item(s.accepted_for) && keep_item(s.substitute)) out.substitutions.push_back(s);
  }
  for (const auto& s : raw.searches) {
    if (!keep_item(s.clicked_item)) continue;
    RawSearch f{s.timestamp, filter_words(s.query_words), s.clicked_item};
    if (!f.query_words.empty()) out.searches.push_back(std::move(f));
  }
  for (const auto& e : raw.catalog) {
    if (!keep_item(e.item)) continue;
    out.catalog.push_back({e.item, filter_words(e.description), e.category_path});
  }
  return out;
}

/// Builds per-namespace vocabularies. Category labels come from the edge
/// file when present, otherwise from catalog paths.
inline Vocabularies build_vocab(const RawDataset& raw) {
  std::unordered_set<std::string> items, words, cats;
  for (const auto* sessions : {&raw.buy, &raw.view}) {
    for (const auto& s : *sessions) items.insert(s.items.begin(), s.items.end());
  }
  for (const auto& s : raw.substitutions) {
    items.insert(s.accepted_for);
    items.insert(s.substitute);
  }
  for (const auto& s : raw.searches) {
    items.insert(s.clicked_item);
    words.insert(s.query_words.begin(), s.query_words.end());
  }
  for (const auto& e : raw.catalog) {
    items.insert(e.item);
    words.insert(e.description.begin(), e.description.end());
  }
  if (!raw.category_edges.empty()) {
    for (const auto& e : raw.category_edges) {
      cats.insert(e.child);
      cats.insert(e.parent);
    }
  } else {
    for (const auto& e : raw.catalog) cats.insert(e.category_path.begin(), e.category_path.end());
  }
  return {Vocabulary::build(items), Vocabulary::build(words), Vocabulary::build(cats)};
}

/// Second pass: map string keys to ids. Category edges are derived from
/// catalog paths when no edge file was given.
inline Dataset resolve(const RawDataset& raw, Vocabularies vocab) {
  Dataset ds;
  auto ids = [](const Vocabulary& v, const std::vector<std::string>& keys) {
    std::vector<Index> out;
    out.reserve(keys.size());
    for (const auto& k : keys) out.push_back(v.at(k));
    return out;
  };
  for (const auto& s : raw.buy) ds.buy.push_back({SessionKind::buy, ids(vocab.items, s.items), s.timestamp});
  for (const auto& s : raw.view) ds.view.push_back({SessionKind::view, ids(vocab.items, s.items), s.timestamp});
  for (const auto& s : raw.substitutions) {
    ds.substitutions.push_back({vocab.items.at(s.accepted_for), vocab.items.at(s.substitute), s.timestamp});
  }
  for (const auto& s : raw.searches) {
    ds.searches.push_back({ids(vocab.words, s.query_words), vocab.items.at(s.clicked_item), s.timestamp});
  }
  for (const auto& e : raw.catalog) {
    CatalogEntry c{vocab.items.at(e.item), ids(vocab.words, e.description), {}};
    for (const auto& label : e.category_path) {
      auto id = vocab.categories.find(label);
      if (!id) throw DataError("unknown category label '" + label + "' for item " + e.item);
      c.category_path.push_back(*id);
    }
    ds.catalog.push_back(std::move(c));
  }
  if (!raw.category_edges.empty()) {
    for (const auto& e : raw.category_edges) {
      ds.category_edges.push_back({vocab.categories.at(e.child), vocab.categories.at(e.parent)});
    }
  } else {
    std::map<Index, Index> parent_of;
    for (const auto& c : ds.catalog) {
      for (std::size_t i = 0; i + 1 < c.category_path.size(); ++i) {
        parent_of.emplace(c.category_path[i], c.category_path[i + 1]);
      }
    }
    for (auto [child, parent] : parent_of) ds.category_edges.push_back({child, parent});
  }
  ds.vocab = std::move(vocab);
  return ds;
}

inline Dataset ingest_dataset(const DataPaths& paths, IngestReport* report = nullptr) {
  auto raw = read_raw(paths, report);
  auto vocab = build_vocab(raw);
  return resolve(raw, std::move(vocab));
}

/// Inverse of resolve(); used for export.
inline RawDataset to_raw(const Dataset& ds) {
  RawDataset raw;
  auto keys = [](const Vocabulary& v, const std::vector<Index>& ids) {
    std::vector<std::string> out;
    for (auto i : ids) out.push_back(v.key(i));
    return out;
  };
  const auto& V = ds.vocab;
  for (const auto& s : ds.buy) raw.buy.push_back({s.timestamp, keys(V.items, s.items)});
  for (const auto& s : ds.view) raw.view.push_back({s.timestamp, keys(V.items, s.items)});
  for (const auto& s : ds.substitutions) {
    raw.substitutions.push_back({s.timestamp, V.items.key(s.accepted_for), V.items.key(s.substitute)});
  }
  for (const auto& s : ds.searches) {
    raw.searches.push_back({s.timestamp, keys(V.words, s.query_words), V.items.key(s.clicked_item)});
  }
  for (const auto& c : ds.catalog) {
    raw.catalog.push_back({V.items.key(c.item), keys(V.words, c.description), keys(V.categories, c.category_path)});
  }
  for (const auto& e : ds.category_edges) {
    raw.category_edges.push_back({V.categories.key(e.child), V.categories.key(e.parent)});
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Chronological splits.

template <typename T>
concept Timestamped = requires(const T& r) {
  { r.timestamp } -> std::convertible_to<std::int64_t>;
};

template <typename Record>
struct DatasetSplit {
  std::vector<Record> train;
  std::vector<Record> validation;
  std::vector<Record> test;
};

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

/// Stable sort by timestamp, then validation and test take floor(f * n)
/// records each from the end; the remainder is train.
template <Timestamped Record>
DatasetSplit<Record> chronological_split(std::vector<Record> records, SplitFractions f = {},
                                         bool allow_empty = false) {
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9 || f.train < 0 ||
      f.validation < 0 || f.test < 0) {
    throw UsageError("split fractions must be nonnegative and sum to 1");
  }
  const std::size_t n = records.size();
  const auto n_val = static_cast<std::size_t>(std::floor(f.validation * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(f.test * static_cast<double>(n) + 1e-9));
  const std::size_t n_train = n - n_val - n_test;
  if (!allow_empty && (n < 3 || n_val == 0 || n_test == 0 || n_train == 0)) {
    throw DataError("cannot split " + std::to_string(n) +
                    " records into three nonempty chronological parts");
  }
  std::stable_sort(records.begin(), records.end(),
                   [](const Record& a, const Record& b) { return a.timestamp < b.timestamp; });
  DatasetSplit<Record> out;
  auto it = records.begin();
  out.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_train)));
  it += static_cast<std::ptrdiff_t>(n_train);
  out.validation.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_val)));
  it += static_cast<std::ptrdiff_t>(n_val);
  out.test.assign(std::make_move_iterator(it), std::make_move_iterator(records.end()));
  return out;
}

}  // namespace pkge
