#pragma once

// Pipeline stages behind the command-line tool. Each stage reads a flat
// key=value config, writes its artifacts into `out`, and finishes with a
// manifest.json plus the config.txt that reproduces it.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pkge/baselines.hpp"
#include "pkge/checks.hpp"
#include "pkge/eval.hpp"
#include "pkge/prg.hpp"
#include "pkge/synth.hpp"
#include "pkge/trainer.hpp"

namespace pkge {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Config.

struct KeySpec {
  std::string key;
  std::string def;
  std::string help;
  bool path = false;
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Config {
 public:
  Config(std::string command, std::vector<KeySpec> specs) : command_(std::move(command)), specs_(std::move(specs)) {
    for (const auto& s : specs_) values_[s.key] = s.def;
  }

  const std::string& command() const { return command_; }
  const std::vector<KeySpec>& specs() const { return specs_; }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) {
      throw UsageError("unknown key '" + key + "' for " + command_ + "; valid keys: " + valid_keys());
    }
    values_[key] = value;
  }

  /// Lines are key=value; '#' starts a comment. Relative paths resolve
  /// against the file's directory.
  void load_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw UsageError("cannot read config " + file.string());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw UsageError(detail::where(file, n) + ": expected key=value");
      const auto key = trim(line.substr(0, eq));
      auto value = trim(line.substr(eq + 1));
      set(key, value);
      if (spec(key).path && !value.empty() && std::filesystem::path(value).is_relative()) {
        values_[key] = (file.parent_path() / value).lexically_normal().generic_string();
      }
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("internal: no key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const { return parse_real(key, str(key)); }

  std::size_t count(const std::string& key) const {
    const auto& s = str(key);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw UsageError(key + ": expected a nonnegative integer, got '" + s + "'");
    return v;
  }

  std::uint64_t u64(const std::string& key) const { return count(key); }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw UsageError(key + ": expected true or false, got '" + s + "'");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    for (auto& f : detail::split(str(key), ',')) {
      if (!f.empty()) out.push_back(f);
    }
    return out;
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& f : list(key)) out.push_back(parse_real(key, f));
    return out;
  }

  std::filesystem::path path(const std::string& key) const { return str(key); }

  std::string valid_keys() const {
    std::string s;
    for (const auto& k : specs_) s += (s.empty() ? "" : ", ") + k.key;
    return s;
  }

  /// key=value lines in declaration order.
  std::string canonical() const {
    std::string s;
    for (const auto& k : specs_) s += k.key + "=" + values_.at(k.key) + "\n";
    return s;
  }

  const KeySpec& spec(const std::string& key) const {
    for (const auto& s : specs_) {
      if (s.key == key) return s;
    }
    throw UsageError("unknown key '" + key + "'");
  }

  /// Copy with path keys rewritten relative to `base`.
  Config relative_to(const std::filesystem::path& base) const {
    Config c = *this;
    const auto b = std::filesystem::absolute(base).lexically_normal();
    for (const auto& s : specs_) {
      if (!s.path || values_.at(s.key).empty()) continue;
      const auto p = std::filesystem::absolute(values_.at(s.key)).lexically_normal();
      auto rel = p.lexically_proximate(b).generic_string();
      c.values_[s.key] = rel.empty() ? "." : rel;
    }
    return c;
  }

 private:
  static double parse_real(const std::string& key, const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(key + ": expected a number, got '" + s + "'");
  }

  std::string command_;
  std::vector<KeySpec> specs_;
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Manifest.

/// Digest over every regular file below `p` (relative name plus bytes).
inline std::string digest_path(const std::filesystem::path& p) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_regular_file(p)) {
    files.push_back(p);
  } else if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
  } else {
    return "missing";
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a("");
  for (const auto& f : files) {
    h = fnv1a(f.lexically_proximate(p).generic_string(), h);
    std::ifstream in(f, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a(bytes, h);
  }
  return hex64(h);
}

/// Writes config.txt and manifest.json. Paths are stored relative to `out`,
/// so `pkge <command> --config config.txt` re-runs the stage in place.
inline void write_manifest(const Config& cfg, const std::filesystem::path& out) {
  auto rel = cfg.relative_to(out);
  const auto text = rel.canonical();
  {
    std::ofstream f(out / "config.txt");
    if (!f) throw DataError("cannot write " + (out / "config.txt").string());
    f << "# pkge " << cfg.command() << "\n" << text;
  }
  nlohmann::ordered_json j;
  j["command"] = cfg.command();
  j["rerun"] = "pkge " + cfg.command() + " --config config.txt";
  nlohmann::ordered_json conf = nlohmann::ordered_json::object();
  auto inputs = nlohmann::ordered_json::array();
  for (const auto& s : cfg.specs()) {
    conf[s.key] = rel.str(s.key);
    if (s.path && s.key != "out" && !cfg.str(s.key).empty()) {
      inputs.push_back({{"key", s.key}, {"path", rel.str(s.key)}, {"digest", digest_path(cfg.path(s.key))}});
    }
  }
  j["inputs"] = inputs;
  j["config"] = conf;
  j["config_hash"] = hex64(fnv1a(text));
  j["seed"] = cfg.str("seed");
  j["versions"] = {{"pkge", kVersion}, {"compiler", __VERSION__}};
  std::ofstream f(out / "manifest.json");
  if (!f) throw DataError("cannot write " + (out / "manifest.json").string());
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Model persistence.

struct PkgMeta {
  std::size_t dim = 0;
  SequenceLengths lengths;
  std::uint64_t data_seed = 7;
  bool leak_guard = false;
  double lr = 0.0;
  std::size_t best_epoch = 0;
};

namespace detail {

inline void require_file(const std::filesystem::path& p, const char* producer) {
  if (!std::filesystem::is_regular_file(p)) {
    throw DataError("missing artifact " + p.string() + " (run `" + producer + "` first)");
  }
}

inline const char* attention_file(Task t) {
  switch (t) {
    case Task::complement: return "attn_complement.tsv";
    case Task::co_view: return "attn_co_view.tsv";
    case Task::search: return "attn_search.tsv";
    case Task::describe: return "attn_describe.tsv";
    default: throw UsageError("task has no attention file");
  }
}

inline void write_blocks(std::ofstream& out, const std::vector<std::span<const double>>& blocks) {
  char buf[32];
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    out << b << '\t' << blocks[b].size();
    for (std::size_t k = 0; k < blocks[b].size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", blocks[b][k]);
      out << (k ? ' ' : '\t') << buf;
    }
    out << '\n';
  }
}

inline void read_blocks(const std::filesystem::path& file, const std::vector<std::span<double>>& blocks) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::string line;
  std::size_t b = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line, '\t');
    if (b >= blocks.size() || f.size() < 2 || std::stoul(f[1]) != blocks[b].size()) {
      throw DataError(file.string() + ": block " + std::to_string(b) + " has the wrong shape");
    }
    std::istringstream vs(f.size() > 2 ? f[2] : "");
    for (auto& v : blocks[b]) {
      if (!(vs >> v)) throw DataError(file.string() + ": short block " + std::to_string(b));
    }
    ++b;
  }
  if (b != blocks.size()) throw DataError(file.string() + ": expected " + std::to_string(blocks.size()) + " blocks");
}

}  // namespace detail

/// Lossless save: tables and attention parameters at 17 significant digits.
inline void save_pkg(const PkgModel& m, const Vocabularies& v, const PkgMeta& meta, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  export_table(m.z_in, v.items, dir / "Z_I.tsv", 17);
  export_table(m.z_buy_out, v.items, dir / "Z_BO.tsv", 17);
  export_table(m.z_view_out, v.items, dir / "Z_VO.tsv", 17);
  export_table(m.words, v.words, dir / "W.tsv", 17);
  export_table(m.categories, v.categories, dir / "C.tsv", 17);
  for (auto t : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    std::ofstream out(dir / detail::attention_file(t));
    const auto& p = m.attention(t);
    detail::write_blocks(out, p.blocks());
  }
  nlohmann::ordered_json j;
  j["dim"] = meta.dim;
  j["lengths"] = {{"buy", meta.lengths.buy},
                  {"view", meta.lengths.view},
                  {"search", meta.lengths.search},
                  {"describe", meta.lengths.describe}};
  j["data_seed"] = meta.data_seed;
  j["leak_guard"] = meta.leak_guard;
  j["lr"] = meta.lr;
  j["best_epoch"] = meta.best_epoch;
  std::ofstream(dir / "model.json") << j.dump(2) << '\n';
}

inline PkgMeta load_pkg_meta(const std::filesystem::path& dir) {
  detail::require_file(dir / "model.json", "train");
  nlohmann::json j;
  try {
    std::ifstream(dir / "model.json") >> j;
    PkgMeta m;
    m.dim = j.at("dim");
    m.lengths = {j.at("lengths").at("buy"), j.at("lengths").at("view"), j.at("lengths").at("describe"),
                 j.at("lengths").at("search")};
    m.data_seed = j.at("data_seed");
    m.leak_guard = j.at("leak_guard");
    m.lr = j.at("lr");
    m.best_epoch = j.at("best_epoch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
}

inline PkgModel load_pkg(const std::filesystem::path& dir, const Vocabularies& v) {
  const auto meta = load_pkg_meta(dir);
  auto m = PkgModel::init(v.items.size(), v.words.size(), v.categories.size(), meta.dim, meta.lengths, 0);
  auto table = [&](EmbeddingTable& t, const char* file, const Vocabulary& vocab) {
    detail::require_file(dir / file, "train");
    auto loaded = import_table(dir / file, vocab);
    if (loaded.name != t.name || loaded.dim() != t.dim() || loaded.rows() != t.rows()) {
      throw DataError((dir / file).string() + ": table does not match model.json and the vocabulary");
    }
    t = std::move(loaded);
  };
  table(m.z_in, "Z_I.tsv", v.items);
  table(m.z_buy_out, "Z_BO.tsv", v.items);
  table(m.z_view_out, "Z_VO.tsv", v.items);
  table(m.words, "W.tsv", v.words);
  table(m.categories, "C.tsv", v.categories);
  for (auto t : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    detail::require_file(dir / detail::attention_file(t), "train");
    detail::read_blocks(dir / detail::attention_file(t), m.attention(t).blocks());
  }
  return m;
}

struct KgMeta {
  EntitySpace space;
  double lr = 0.0;
  double margin = 0.0;
  std::string source;
};

inline void save_kg(const KgModel& m, const KgMeta& meta, const std::filesystem::path& dir) {
  export_kg(m, dir, 17);
  nlohmann::ordered_json j;
  j["variant"] = to_string(m.variant);
  j["norm"] = m.norm == KgNorm::l1 ? "l1" : "l2";
  j["dim"] = m.dim;
  j["relations"] = m.relations;
  j["space"] = {{"items", meta.space.n_items}, {"words", meta.space.n_words}, {"categories", meta.space.n_categories}};
  j["lr"] = meta.lr;
  j["margin"] = meta.margin;
  j["source"] = meta.source;
  std::ofstream(dir / "kg.json") << j.dump(2) << '\n';
}

inline std::pair<KgModel, KgMeta> load_kg(const std::filesystem::path& dir) {
  detail::require_file(dir / "kg.json", "train-baseline");
  nlohmann::json j;
  KgModel m;
  KgMeta meta;
  try {
    std::ifstream(dir / "kg.json") >> j;
    meta.space = {j.at("space").at("items"), j.at("space").at("words"), j.at("space").at("categories")};
    meta.lr = j.at("lr");
    meta.margin = j.at("margin");
    meta.source = j.at("source");
    m = init_kg(kg_variant_from_string(j.at("variant")), meta.space.size(), j.at("relations"), j.at("dim"), 0,
                j.at("norm") == "l1" ? KgNorm::l1 : KgNorm::l2);
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "kg.json").string() + ": " + e.what());
  }
  for (auto& [name, block] : m.blocks()) {
    if (block->empty()) continue;
    const auto file = dir / (name + ".tsv");
    detail::require_file(file, "train-baseline");
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);
    std::size_t r = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = detail::split(line, '\t');
      if (f.size() != 2 || r >= block->rows() || std::stoul(f[0]) != r) throw DataError(file.string() + ": bad row");
      std::istringstream vs(f[1]);
      for (auto& v : block->row(r)) {
        if (!(vs >> v)) throw DataError(file.string() + ": short row " + std::to_string(r));
      }
      ++r;
    }
    if (r != block->rows()) throw DataError(file.string() + ": expected " + std::to_string(block->rows()) + " rows");
  }
  return {std::move(m), meta};
}

// ---------------------------------------------------------------------------
// Shared helpers.

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (dir.empty()) throw UsageError("data directory not set");
  detail::require_file(DataPaths::in_dir(dir).catalog, "gen-data");
  return ingest_dataset(DataPaths::in_dir(dir));
}

inline void write_triples(std::span<const Triple> triples, const Vocabulary& items, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& t : triples) out << items.key(t.head) << '\t' << t.relation << '\t' << items.key(t.tail) << '\n';
}

inline std::vector<Triple> read_prg_split(const std::filesystem::path& prg, const char* name, const Vocabulary& items) {
  detail::require_file(prg / name, "build-prg");
  return read_triples(prg / name, items);
}

inline std::vector<KgTriple> to_kg_triples(std::span<const Triple> triples, const std::vector<std::string>& relations) {
  std::vector<KgTriple> out;
  for (const auto& t : triples) {
    for (std::size_t r = 0; r < relations.size(); ++r) {
      if (relations[r] == t.relation) out.push_back({t.head, r, t.tail});
    }
  }
  return out;
}

struct TruthRow {
  std::string model;
  std::string relation;
  RankingMetrics metrics;
};

/// HIT/NDCG/R/MAP of each model's item-relation rankings against the
/// generator's ground truth, heads capped at `max_heads` (0: all).
inline std::vector<TruthRow> truth_report(const GroundTruth& truth, const Vocabulary& items, const PkgModel* pkg,
                                          const KgModel* kg, const std::string& kg_name, int k, std::size_t max_heads) {
  std::vector<TruthRow> rows;
  const std::size_t n = items.size();
  for (auto rel : {Relation::substitute, Relation::complement, Relation::co_view}) {
    const auto t = resolve_truth(truth, to_string(rel), items, items);
    if (pkg) {
      rows.push_back({"pkge", to_string(rel), truth_metrics([&](Index h) {
                        const Index head[] = {h};
                        return pkg_scores(*pkg, rel, head);
                      }, t, n, k, max_heads)});
    }
    if (kg) {
      std::optional<std::size_t> r;
      for (std::size_t q = 0; q < kg->relations.size(); ++q) {
        if (kg->relations[q] == to_string(rel)) r = q;
      }
      if (r) {
        rows.push_back({kg_name, to_string(rel), truth_metrics([&](Index h) {
                          return kg_scores(*kg, *r, h, SlotRange{1, static_cast<Index>(n)});
                        }, t, n, k, max_heads)});
      }
    }
  }
  return rows;
}

inline void write_truth_report(std::span<const TruthRow> rows, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "model\trelation\tHIT\tNDCG\tRecall\tMAP\tqueries\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%.6f\t%.6f", r.metrics.hit, r.metrics.ndcg, r.metrics.recall,
                  r.metrics.map);
    out << r.model << '\t' << r.relation << '\t' << buf << '\t' << r.metrics.queries << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stages.

struct Stage {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
  std::function<void(const Config&)> run;
};

namespace detail {

inline std::filesystem::path prepare_out(const Config& cfg) {
  const auto out = cfg.path("out");
  if (out.empty()) throw UsageError("out directory not set");
  std::filesystem::create_directories(out);
  return out;
}

inline SequenceLengths lengths_of(const Config& cfg) {
  return {cfg.count("len_buy"), cfg.count("len_view"), cfg.count("len_describe"), cfg.count("len_search")};
}

inline std::vector<Triple> held_out_edges(const std::filesystem::path& prg, const Vocabulary& items) {
  auto held = read_prg_split(prg, "prg_valid.tsv", items);
  auto test = read_prg_split(prg, "prg_test.tsv", items);
  held.insert(held.end(), test.begin(), test.end());
  return held;
}

inline void stage_gen_data(const Config& cfg) {
  const auto out = prepare_out(cfg);
  SynthConfig sc;
  sc.items = cfg.count("items");
  sc.words = cfg.count("words");
  auto tree = cfg.list("tree");
  if (tree.size() != sc.tree.size()) throw UsageError("tree: expected four comma-separated branching factors");
  for (std::size_t i = 0; i < tree.size(); ++i) sc.tree[i] = static_cast<std::size_t>(std::stoul(tree[i]));
  sc.clusters = cfg.count("clusters");
  sc.rules_per_cluster = cfg.count("rules_per_cluster");
  sc.buy_sessions = cfg.count("buy_sessions");
  sc.view_sessions = cfg.count("view_sessions");
  sc.min_session = cfg.count("min_session");
  sc.max_session = cfg.count("max_session");
  sc.substitutions = cfg.count("substitutions");
  sc.searches = cfg.count("searches");
  sc.keywords_per_cluster = cfg.count("keywords_per_cluster");
  sc.stopwords = cfg.count("stopwords");
  sc.description_length = cfg.count("description_length");
  sc.max_query_length = cfg.count("max_query_length");
  sc.stopword_rate = cfg.real("stopword_rate");
  sc.keyword_overlap = cfg.real("keyword_overlap");
  sc.noise = cfg.real("noise");
  sc.seed = cfg.u64("seed");
  write_synth(generate(sc), out);
  write_manifest(cfg, out);
}

inline void stage_ingest(const Config& cfg) {
  const auto in = cfg.path("data");
  detail::require_file(DataPaths::in_dir(in).catalog, "gen-data");
  const auto out = prepare_out(cfg);
  IngestReport report;
  auto raw = read_raw(DataPaths::in_dir(in), &report);
  auto filtered = filter_infrequent(raw, {cfg.count("item_min"), cfg.count("word_min")});
  auto ds = resolve(filtered, build_vocab(filtered));
  write_raw(to_raw(ds), out);
  if (std::filesystem::exists(in / "ground_truth.tsv")) {
    std::filesystem::copy_file(in / "ground_truth.tsv", out / "ground_truth.tsv",
                               std::filesystem::copy_options::overwrite_existing);
  }
  std::ofstream rep(out / "ingest_report.tsv");
  rep << "lines_read\t" << report.lines_read << "\nshort_sessions_dropped\t" << report.short_sessions_dropped
      << "\nitems\t" << ds.vocab.items.entity_count() << "\nwords\t" << ds.vocab.words.entity_count()
      << "\ncategories\t" << ds.vocab.categories.entity_count() << "\nbuy_sessions\t" << ds.buy.size()
      << "\nview_sessions\t" << ds.view.size() << "\nsubstitutions\t" << ds.substitutions.size() << "\nsearches\t"
      << ds.searches.size() << '\n';
  rep.close();
  write_manifest(cfg, out);
}

inline void stage_build_prg(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto out = prepare_out(cfg);
  PrgConfig pc;
  pc.walk.walks_per_node = cfg.count("walks_per_node");
  pc.walk.walk_length = cfg.count("walk_length");
  pc.walk.p = cfg.real("p");
  pc.walk.q = cfg.real("q");
  pc.walk.seed = cfg.u64("seed");
  pc.walk.validate();
  pc.top_k = cfg.count("top_k");
  auto graphs = build_prg(ds.buy, ds.view, ds.substitutions, ds.vocab.items.size(), pc);
  export_prg(graphs, ds.vocab.items, out / "prg.tsv");
  std::vector<Triple> all;
  for (const auto& g : graphs) {
    auto t = to_triples(g);
    all.insert(all.end(), t.begin(), t.end());
  }
  SplitFractions f{cfg.real("train_fraction"), cfg.real("valid_fraction"), cfg.real("test_fraction")};
  auto split = split_edges(all, f, cfg.u64("seed"));
  write_triples(split.train, ds.vocab.items, out / "prg_train.tsv");
  write_triples(split.validation, ds.vocab.items, out / "prg_valid.tsv");
  write_triples(split.test, ds.vocab.items, out / "prg_test.tsv");
  std::ofstream rep(out / "split_report.tsv");
  rep << "relation\ttrain\tvalid\ttest\n";
  for (const auto& g : graphs) {
    auto n = [&](const std::vector<Triple>& v) {
      return std::count_if(v.begin(), v.end(), [&](const Triple& t) { return t.relation == g.relation; });
    };
    rep << g.relation << '\t' << n(split.train) << '\t' << n(split.validation) << '\t' << n(split.test) << '\n';
  }
  rep << "moved_to_train\t" << split.moved << "\t\t\n";
  rep.close();
  write_manifest(cfg, out);
}

inline BallConfig ball_config(const Config& cfg) {
  BallConfig bc;
  bc.epochs = cfg.count("ball_epochs");
  bc.burn_in_epochs = cfg.count("ball_burn_in");
  bc.lr = cfg.real("ball_lr");
  bc.negatives = cfg.count("ball_negatives");
  bc.boundary_eps = cfg.real("boundary_eps");
  bc.seed = cfg.u64("seed");
  return bc;
}

inline void stage_pretrain(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto out = prepare_out(cfg);
  auto table = init_table(kCategories, std::max<std::size_t>(ds.vocab.categories.size(), 1), cfg.count("dim"),
                          Geometry::poincare, derive_seed(cfg.u64("seed"), 5));
  auto bc = ball_config(cfg);
  bc.transitive_closure = cfg.flag("transitive_closure");
  auto rep = hierarchy_pretrain(ds.category_edges, table, bc);
  export_table(table, ds.vocab.categories, out / "C.tsv", 17);
  std::ofstream log(out / "pretrain_loss.tsv");
  log << "epoch\tloss\n";
  char buf[32];
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%.9g", rep.epoch_loss[e]);
    log << e + 1 << '\t' << buf << '\n';
  }
  log.close();
  write_manifest(cfg, out);
}

inline void stage_train(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto prg = cfg.path("prg");
  const bool guard = cfg.flag("leak_guard") && !prg.empty();
  LeakReport leaks;
  if (guard) ds = guard_leaks(ds, held_out_edges(prg, ds.vocab.items), &leaks);
  const auto out = prepare_out(cfg);
  const auto lengths = lengths_of(cfg);
  const std::uint64_t seed = cfg.u64("seed");
  auto data = make_training_data(ds, {lengths, {}, seed});
  const std::size_t dim = cfg.count("dim");
  auto init = PkgModel::init(data.n_items, data.n_words, data.n_categories, dim, lengths, seed);
  if (const auto cat = cfg.path("categories"); !cat.empty()) {
    require_file(cat / "C.tsv", "pretrain-categories");
    auto c = import_table(cat / "C.tsv", ds.vocab.categories);
    if (c.dim() != dim) throw UsageError("categories were pre-trained with a different dim");
    init.categories = std::move(c);
  } else {
    auto bc = ball_config(cfg);
    hierarchy_pretrain(ds.category_edges, init.categories, bc);
  }

  TrainConfig tc;
  tc.lr_grid = cfg.reals("lr_grid");
  tc.batch = cfg.count("batch");
  tc.negatives = cfg.count("negatives");
  tc.patience = cfg.count("patience");
  tc.max_epochs = cfg.count("max_epochs");
  tc.seed = seed;
  tc.schedule = schedule_from_string(cfg.str("schedule"));
  tc.single_task = task_from_string(cfg.str("single_task"));
  tc.epoch_steps = cfg.count("epoch_steps");
  tc.validation_queries = cfg.count("validation_queries");
  auto res = train_with_lr_grid(tc, data, init);

  save_pkg(res.model, ds.vocab, {dim, lengths, seed, guard, res.lr, res.best_epoch}, out);
  write_metrics_log(res.log, out / "metrics_log.tsv");
  write_correlation(task_correlation(res.log), out / "task_correlation.tsv");
  {
    std::ofstream s(out / "train_summary.tsv");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", res.lr);
    s << "lr\t" << buf << "\nbest_epoch\t" << res.best_epoch << "\nepochs_run\t" << res.epochs_run
      << "\nleak_buy_sessions\t" << leaks.buy_sessions << "\nleak_view_sessions\t" << leaks.view_sessions
      << "\nleak_substitutions\t" << leaks.substitutions << '\n';
  }
  if (cfg.flag("compare_schedules")) {
    tc.lr = res.lr;
    auto rows = compare_schedules(data, tc, init);
    write_schedule_comparison(rows, out / "schedule_comparison.tsv");
  }
  write_manifest(cfg, out);
}

inline void stage_train_baseline(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto prg = cfg.path("prg");
  if (prg.empty()) throw UsageError("prg directory not set (run build-prg first)");
  const auto out = prepare_out(cfg);
  const EntitySpace space{ds.vocab.items.size(), ds.vocab.words.size(), ds.vocab.categories.size()};
  const auto variant = kg_variant_from_string(cfg.str("variant"));
  const std::uint64_t seed = cfg.u64("seed");

  std::vector<std::string> relations;
  std::vector<RelationSlots> slots;
  std::vector<KgTriple> train;
  const auto source = cfg.str("source");
  if (source == "prg") {
    relations = {kRelComplement, kRelCoView, kRelSubstitute};
    slots.assign(relations.size(), {space.items(), space.items()});
    train = to_kg_triples(read_prg_split(prg, "prg_train.tsv", ds.vocab.items), relations);
  } else if (source == "raw") {
    if (cfg.flag("leak_guard")) ds = guard_leaks(ds, held_out_edges(prg, ds.vocab.items));
    train = raw_triples(ds, space, cfg.count("raw_cap"), seed, relations, slots);
  } else {
    throw UsageError("source must be prg or raw");
  }
  const auto valid = to_kg_triples(read_prg_split(prg, "prg_valid.tsv", ds.vocab.items), relations);

  KgConfig kc;
  kc.negatives = cfg.count("negatives");
  kc.epochs = cfg.count("epochs");
  kc.patience = cfg.count("patience");
  kc.validation_queries = cfg.count("validation_queries");
  kc.seed = seed;
  auto margins = is_translational(variant) ? cfg.reals("margin_grid") : std::vector<double>{0.0};
  std::vector<KgNorm> norms;
  if (is_translational(variant)) {
    for (const auto& n : cfg.list("norms")) {
      if (n != "l1" && n != "l2") throw UsageError("norms: expected l1 and/or l2");
      norms.push_back(n == "l1" ? KgNorm::l1 : KgNorm::l2);
    }
  } else {
    norms = {KgNorm::l2};
  }
  const auto lrs = cfg.reals("lr_grid");
  if (lrs.empty() || margins.empty() || norms.empty()) throw UsageError("empty baseline grid");

  std::optional<KgTrainResult> best;
  KgMeta best_meta{space, 0.0, 0.0, source};
  double best_hit = -1.0;
  std::ofstream grid(out / "baseline_grid.tsv");
  grid << "lr\tmargin\tnorm\tbest_epoch\tvalid_HIT@10\n";
  char buf[96];
  for (double lr : lrs) {
    for (double margin : margins) {
      for (auto norm : norms) {
        kc.lr = lr;
        kc.margin = margin;
        auto r = train_kg(init_kg(variant, space.size(), relations, cfg.count("dim"), seed, norm), train, slots, kc,
                          valid);
        const double hit = valid.empty() ? 0.0 : kg_hit_rate(r.model, valid, slots, 10, kc.validation_queries);
        std::snprintf(buf, sizeof buf, "%.9g\t%.9g\t%s\t%zu\t%.6f", lr, margin, norm == KgNorm::l1 ? "l1" : "l2",
                      r.best_epoch, hit);
        grid << buf << '\n';
        if (hit > best_hit) {
          best_hit = hit;
          best = std::move(r);
          best_meta.lr = lr;
          best_meta.margin = margin;
        }
      }
    }
  }
  grid.close();
  save_kg(best->model, best_meta, out);
  std::ofstream log(out / "train_log.tsv");
  log << "epoch\tloss\n";
  for (std::size_t e = 0; e < best->epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%.9g", best->epoch_loss[e]);
    log << e + 1 << '\t' << buf << '\n';
  }
  log.close();
  write_manifest(cfg, out);
}

inline void stage_evaluate(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto model_dir = cfg.path("model");
  const auto kg_dir = cfg.path("baseline");
  if (model_dir.empty() && kg_dir.empty()) {
    throw DataError("no trained model given: run `train` (model=) or `train-baseline` (baseline=) first");
  }
  std::optional<PkgModel> pkg;
  PkgMeta meta;
  meta.data_seed = cfg.u64("seed");
  if (!model_dir.empty()) {
    meta = load_pkg_meta(model_dir);
    pkg = load_pkg(model_dir, ds.vocab);
  }
  std::optional<std::pair<KgModel, KgMeta>> kg;
  if (!kg_dir.empty()) kg = load_kg(kg_dir);

  const auto prg = cfg.path("prg");
  std::vector<Triple> prg_test;
  if (!prg.empty()) {
    prg_test = read_prg_split(prg, "prg_test.tsv", ds.vocab.items);
    if (meta.leak_guard) ds = guard_leaks(ds, held_out_edges(prg, ds.vocab.items));
  }
  const auto out = prepare_out(cfg);
  auto data = make_training_data(ds, {meta.lengths, {}, meta.data_seed});
  EvalInputs in;
  in.data = &data;
  in.prg_test = std::move(prg_test);
  in.pkg = pkg ? &*pkg : nullptr;
  if (kg) {
    in.kg = &kg->first;
    in.kg_name = to_string(kg->first.variant);
    in.kg_space = kg->second.space;
  }
  EvalConfig ec;
  ec.k = static_cast<int>(cfg.count("k"));
  ec.max_queries = cfg.count("max_queries");
  ec.seed = cfg.u64("seed");
  ec.probe = {cfg.real("probe_lambda"), cfg.real("probe_lr"), cfg.count("probe_iterations")};
  write_report(evaluate_all(in, ec), out);
  if (const auto gt = cfg.path("data") / "ground_truth.tsv"; std::filesystem::exists(gt)) {
    auto rows = truth_report(read_ground_truth(gt), ds.vocab.items, in.pkg, in.kg, in.kg_name, ec.k, ec.max_queries);
    write_truth_report(rows, out / "truth_report.tsv");
  }
  write_manifest(cfg, out);
}

inline std::vector<Index> parse_head(const std::string& text, const Vocabulary& vocab) {
  std::vector<Index> ids;
  for (auto& part : split(text, ',')) {
    for (const auto& tok : tokens(part)) {
      auto id = vocab.find(tok);
      if (!id) throw UsageError("unknown head entity '" + tok + "'");
      ids.push_back(*id);
    }
  }
  if (ids.empty()) throw UsageError("head not set");
  return ids;
}

inline void stage_rank(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto model_dir = cfg.path("model");
  if (model_dir.empty()) throw DataError("no trained model given: run `train` first and pass model=");
  auto m = load_pkg(model_dir, ds.vocab);
  const auto rel = relation_from_string(cfg.str("relation"));
  const auto k = cfg.count("k");
  if (k == 0) throw UsageError("k must be positive");
  const auto& head_vocab = rel == Relation::search || rel == Relation::describe ? ds.vocab.words
                           : rel == Relation::isa                                 ? ds.vocab.categories
                                                                                  : ds.vocab.items;
  const auto head = parse_head(cfg.str("head"), head_vocab);
  const auto kind = cfg.str("kind") == "view" ? SessionKind::view : SessionKind::buy;
  const bool item_head = &head_vocab == &ds.vocab.items;
  auto scores = pkg_scores(m, rel, head, kind);
  auto r = rank_candidates(scores, item_candidates(m.z_in.rows(), item_head ? head : std::vector<Index>{}), {},
                           to_string(rel));
  std::ostringstream tsv;
  char buf[32];
  for (std::size_t i = 0; i < std::min(k, r.ids.size()); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", r.scores[i]);
    tsv << i + 1 << '\t' << ds.vocab.items.key(r.ids[i]) << '\t' << buf << '\n';
  }
  if (cfg.str("out").empty()) {
    std::cout << tsv.str();
    return;
  }
  const auto out = prepare_out(cfg);
  std::ofstream(out / "rank.tsv") << tsv.str();
  write_manifest(cfg, out);
}

inline void stage_export(const Config& cfg) {
  auto ds = load_dataset(cfg.path("data"));
  const auto model_dir = cfg.path("model");
  const auto kg_dir = cfg.path("baseline");
  if (model_dir.empty() && kg_dir.empty()) throw DataError("nothing to export: pass model= and/or baseline=");
  const auto out = prepare_out(cfg);
  const int digits = static_cast<int>(cfg.count("digits"));
  if (digits < 1 || digits > 17) throw UsageError("digits must lie in [1, 17]");
  if (!model_dir.empty()) {
    auto m = load_pkg(model_dir, ds.vocab);
    export_table(m.z_in, ds.vocab.items, out / "Z_I.tsv", digits);
    export_table(m.z_buy_out, ds.vocab.items, out / "Z_BO.tsv", digits);
    export_table(m.z_view_out, ds.vocab.items, out / "Z_VO.tsv", digits);
    export_table(m.words, ds.vocab.words, out / "W.tsv", digits);
    export_table(m.categories, ds.vocab.categories, out / "C.tsv", digits);
  }
  if (!kg_dir.empty()) export_kg(load_kg(kg_dir).first, out / "kg", digits);
  write_manifest(cfg, out);
}

inline void stage_grad_check(const Config& cfg) {
  auto results = check_all_gradients(cfg.u64("seed"), static_cast<int>(cfg.count("points")));
  std::ostringstream tsv;
  tsv << "loss\tpoint\tcoords\tmax_rel_error\tresult\n";
  std::size_t failed = 0;
  char buf[32];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error);
    tsv << r.loss << '\t' << r.point << '\t' << r.coords << '\t' << buf << '\t' << (r.passed ? "PASS" : "FAIL") << '\n';
    failed += !r.passed;
  }
  std::cout << tsv.str();
  if (!cfg.str("out").empty()) {
    const auto out = prepare_out(cfg);
    std::ofstream(out / "grad_check.tsv") << tsv.str();
    write_manifest(cfg, out);
  }
  if (failed) throw NumericalError(std::to_string(failed) + " gradient checks failed");
}

}  // namespace detail

inline const std::vector<Stage>& stages() {
  auto common = [](std::vector<KeySpec> keys, bool out_required = true) {
    keys.insert(keys.begin(), {"out", out_required ? "out" : "", "output directory", true});
    keys.push_back({"seed", "7", "random seed"});
    return keys;
  };
  const std::vector<KeySpec> ball = {{"ball_epochs", "50", "Poincare pre-training epochs"},
                                     {"ball_burn_in", "10", "burn-in epochs at lr/10"},
                                     {"ball_lr", "0.3", "Riemannian SGD learning rate"},
                                     {"ball_negatives", "10", "negative categories per pair"},
                                     {"boundary_eps", "1e-5", "projection margin inside the unit ball"}};
  auto with = [](std::vector<KeySpec> a, const std::vector<KeySpec>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  static const std::vector<Stage> all = {
      {"gen-data", "generate a synthetic dataset with ground truth",
       common({{"items", "2000", "item count"},
               {"words", "500", "word count"},
               {"tree", "8,4,3,2", "category branching per level, root first"},
               {"clusters", "200", "substitute clusters"},
               {"rules_per_cluster", "2", "complement rules per cluster"},
               {"buy_sessions", "10000", "buy sessions"},
               {"view_sessions", "10000", "view sessions"},
               {"min_session", "2", "shortest session"},
               {"max_session", "6", "longest session"},
               {"substitutions", "5000", "substitution records"},
               {"searches", "10000", "search records"},
               {"keywords_per_cluster", "2", "keyword pool size per cluster"},
               {"stopwords", "20", "shared filler words"},
               {"description_length", "8", "words per description"},
               {"max_query_length", "3", "longest query"},
               {"stopword_rate", "0.3", "filler probability per description word"},
               {"keyword_overlap", "0.1", "chance a keyword comes from another cluster"},
               {"noise", "0.1", "uniform noise rate"}}),
       detail::stage_gen_data},
      {"ingest", "filter infrequent items and words and write clean data files",
       common({{"data", "", "raw data directory", true},
               {"item_min", "10", "minimum item occurrences"},
               {"word_min", "3", "minimum word occurrences"}}),
       detail::stage_ingest},
      {"build-prg", "build the product relation graph and split its edges",
       common({{"data", "", "ingested data directory", true},
               {"top_k", "20", "neighbors kept per node"},
               {"walks_per_node", "10", "random walks per node"},
               {"walk_length", "10", "steps per walk"},
               {"p", "1", "return parameter"},
               {"q", "1", "in-out parameter"},
               {"train_fraction", "0.8", "edge split"},
               {"valid_fraction", "0.1", "edge split"},
               {"test_fraction", "0.1", "edge split"}}),
       detail::stage_build_prg},
      {"pretrain-categories", "embed the category hierarchy in the Poincare ball",
       common(with({{"data", "", "ingested data directory", true},
                    {"dim", "100", "embedding dimension"},
                    {"transitive_closure", "true", "train on all descendant-ancestor pairs"}},
                   ball)),
       detail::stage_pretrain},
      {"train", "multi-task training of the product embeddings",
       common(with({{"data", "", "ingested data directory", true},
                    {"prg", "", "PRG directory; enables the leakage guard", true},
                    {"categories", "", "pre-trained category directory (empty: pre-train here)", true},
                    {"dim", "100", "embedding dimension"},
                    {"lr_grid", "0.001,0.005,0.01,0.1", "learning rates tried; best validation wins"},
                    {"batch", "32", "minibatch size"},
                    {"negatives", "3", "negative samples per example"},
                    {"patience", "5", "epochs without improvement before stopping"},
                    {"max_epochs", "20", "epoch cap"},
                    {"epoch_steps", "0", "steps per epoch (0: one pass over the data)"},
                    {"schedule", "weighted", "weighted, uniform or single_task"},
                    {"single_task", "substitute", "task for the single_task schedule"},
                    {"validation_queries", "300", "validation queries per task"},
                    {"len_buy", "20", "buy-session context length"},
                    {"len_view", "50", "view-session context length"},
                    {"len_describe", "200", "description context length"},
                    {"len_search", "10", "query context length"},
                    {"leak_guard", "true", "drop training records revealing held-out PRG edges"},
                    {"compare_schedules", "false", "also run the three-schedule comparison"}},
                   ball)),
       detail::stage_train},
      {"train-baseline", "train a knowledge-graph embedding baseline",
       common({{"data", "", "ingested data directory", true},
               {"prg", "", "PRG directory", true},
               {"variant", "transE", "transE, transH, transR, transD, rescal, distmult, hole or complex"},
               {"source", "prg", "prg (PRG triples) or raw (triples from the raw records)"},
               {"dim", "100", "embedding dimension"},
               {"lr_grid", "0.001,0.005,0.01,0.1", "learning rates tried"},
               {"margin_grid", "1", "margins tried (translational models)"},
               {"norms", "l1,l2", "distance norms tried (translational models)"},
               {"negatives", "3", "corruptions per triple"},
               {"epochs", "100", "epoch cap"},
               {"patience", "5", "validations without improvement before stopping"},
               {"validation_queries", "300", "validation triples scored per check"},
               {"raw_cap", "50000", "triples kept per relation for source=raw"},
               {"leak_guard", "true", "drop raw records revealing held-out PRG edges"}}),
       detail::stage_train_baseline},
      {"evaluate", "knowledge completion, search, recommendation and IsA metrics",
       common({{"data", "", "ingested data directory", true},
               {"prg", "", "PRG directory with prg_test.tsv", true},
               {"model", "", "trained model directory", true},
               {"baseline", "", "trained baseline directory", true},
               {"k", "10", "ranking cutoff"},
               {"max_queries", "0", "queries per task (0: all)"},
               {"probe_lambda", "1e-4", "L2 weight of the IsA probe"},
               {"probe_lr", "0.5", "IsA probe learning rate"},
               {"probe_iterations", "300", "IsA probe iterations"}}),
       detail::stage_evaluate},
      {"rank", "rank items for one head entity",
       common({{"data", "", "ingested data directory", true},
               {"model", "", "trained model directory", true},
               {"relation", "substitute", "substitute, complement, co_view, search, describe, isa or recommend"},
               {"head", "", "head key; words or session items separated by commas or spaces"},
               {"kind", "buy", "session kind for recommend: buy or view"},
               {"k", "10", "rows to print"}},
              false),
       detail::stage_rank},
      {"export", "write embeddings as readable TSV",
       common({{"data", "", "ingested data directory", true},
               {"model", "", "trained model directory", true},
               {"baseline", "", "trained baseline directory", true},
               {"digits", "9", "significant digits"}}),
       detail::stage_export},
      {"grad-check", "finite-difference check of every loss",
       common({{"points", "3", "random parameter points per loss"}}, false), detail::stage_grad_check},
  };
  return all;
}

inline const Stage& find_stage(const std::string& name) {
  for (const auto& s : stages()) {
    if (s.name == name) return s;
  }
  throw UsageError("unknown subcommand '" + name + "'");
}

}  // namespace pkge
