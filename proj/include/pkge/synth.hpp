#pragma once

// Synthetic catalog with planted structure: items fall into substitute
// clusters, each cluster has complement rules pointing at other clusters,
// and every modality is sampled from those two tables plus uniform noise.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pkge/data_model.hpp"

namespace pkge {

struct SynthConfig {
  std::size_t items = 2000;
  std::size_t words = 500;
  std::array<std::size_t, 4> tree{8, 4, 3, 2};  // branching, root level first
  std::size_t clusters = 200;
  std::size_t rules_per_cluster = 2;
  std::size_t buy_sessions = 10000;
  std::size_t view_sessions = 10000;
  std::size_t min_session = 2;
  std::size_t max_session = 6;
  std::size_t substitutions = 5000;
  std::size_t searches = 10000;
  std::size_t keywords_per_cluster = 2;
  std::size_t stopwords = 20;
  std::size_t description_length = 8;
  std::size_t max_query_length = 3;
  double stopword_rate = 0.3;
  double keyword_overlap = 0.1;  // chance a keyword comes from another cluster's pool
  double noise = 0.1;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(noise >= 0.0 && noise < 1.0)) throw UsageError("noise must lie in [0, 1)");
    if (clusters == 0 || items == 0) throw UsageError("need at least one item and one cluster");
    if (clusters > items) throw UsageError("more clusters than items");
    if (rules_per_cluster >= clusters) throw UsageError("rules_per_cluster must be below the cluster count");
    if (buy_sessions > 0 && rules_per_cluster == 0) throw UsageError("buy sessions need at least one complement rule");
    if (min_session < 2 || max_session < min_session) throw UsageError("session lengths must satisfy 2 <= min <= max");
    if (words <= stopwords) throw UsageError("words must exceed stopwords");
    if (keywords_per_cluster == 0 || max_query_length == 0 || description_length == 0) {
      throw UsageError("keyword, query and description sizes must be positive");
    }
    for (auto b : tree) {
      if (b == 0) throw UsageError("tree branching must be positive");
    }
  }
};

/// relation -> head key -> sorted tail keys.
using GroundTruth = std::map<std::string, std::map<std::string, std::vector<std::string>>>;

struct SynthStats {
  std::size_t session_tokens = 0;
  std::size_t noise_tokens = 0;
};

struct SynthOutput {
  RawDataset raw;
  GroundTruth truth;
  SynthStats stats;
  std::vector<std::size_t> cluster_of;  // per item, 0-based generator order
};

namespace detail {

inline std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace detail

inline std::string synth_item_key(std::size_t i) { return detail::numbered("item", i + 1, 5); }
inline std::string synth_word_key(std::size_t w) { return detail::numbered("w", w + 1, 4); }

inline SynthOutput generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthOutput out;
  Rng rng(cfg.seed);

  // Clusters: a seeded permutation dealt round-robin.
  std::vector<std::size_t> perm(cfg.items);
  for (std::size_t i = 0; i < cfg.items; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> members(cfg.clusters);
  out.cluster_of.assign(cfg.items, 0);
  for (std::size_t k = 0; k < cfg.items; ++k) {
    members[k % cfg.clusters].push_back(perm[k]);
    out.cluster_of[perm[k]] = k % cfg.clusters;
  }
  for (auto& m : members) std::sort(m.begin(), m.end());

  // Complement rules: distinct target clusters, never the cluster itself.
  std::vector<std::vector<std::size_t>> rules(cfg.clusters);
  for (std::size_t c = 0; c < cfg.clusters; ++c) {
    while (rules[c].size() < cfg.rules_per_cluster) {
      const auto t = rng.below(cfg.clusters);
      if (t != c && std::find(rules[c].begin(), rules[c].end(), t) == rules[c].end()) rules[c].push_back(t);
    }
  }

  // Category tree, labels spelled by their path from the root.
  std::vector<std::vector<std::string>> paths;  // leaf -> root
  std::vector<RawCategoryEdge> edges;
  std::function<void(std::size_t, std::vector<std::string>)> grow = [&](std::size_t level, std::vector<std::string> up) {
    static const char* tags[] = {"sd", "d", "c", "s"};
    for (std::size_t b = 0; b < cfg.tree[level]; ++b) {
      std::string label = (up.empty() ? std::string() : up.back() + ".") + detail::numbered(tags[level], b + 1, 2);
      if (!up.empty()) edges.push_back({label, up.back()});
      auto next = up;
      next.push_back(label);
      if (level + 1 == cfg.tree.size()) {
        paths.emplace_back(next.rbegin(), next.rend());
      } else {
        grow(level + 1, next);
      }
    }
  };
  grow(0, {});
  std::vector<std::size_t> leaf_order(paths.size());
  for (std::size_t i = 0; i < leaf_order.size(); ++i) leaf_order[i] = i;
  rng.shuffle(leaf_order);

  // Words: the first `stopwords` ids are shared filler, the rest keywords.
  const std::size_t n_keywords = cfg.words - cfg.stopwords;
  auto keyword = [&](std::size_t c) {
    const std::size_t pool = rng.bernoulli(cfg.keyword_overlap) ? rng.below(cfg.clusters) : c;
    const std::size_t slot = pool * cfg.keywords_per_cluster + rng.below(cfg.keywords_per_cluster);
    return synth_word_key(cfg.stopwords + slot % n_keywords);
  };
  auto member = [&](std::size_t c) { return members[c][rng.below(members[c].size())]; };
  auto length = [&] { return cfg.min_session + rng.below(cfg.max_session - cfg.min_session + 1); };
  auto maybe_noise = [&](std::size_t item) {
    ++out.stats.session_tokens;
    if (!rng.bernoulli(cfg.noise)) return item;
    ++out.stats.noise_tokens;
    return static_cast<std::size_t>(rng.below(cfg.items));
  };

  auto& raw = out.raw;
  for (std::size_t s = 0; s < cfg.buy_sessions; ++s) {
    RawSession session{static_cast<std::int64_t>(s), {}};
    std::size_t c = rng.below(cfg.clusters);
    const auto n = length();
    for (std::size_t k = 0; k < n; ++k) {
      if (k > 0) c = rules[c][rng.below(rules[c].size())];
      session.items.push_back(synth_item_key(maybe_noise(member(c))));
    }
    raw.buy.push_back(std::move(session));
  }
  for (std::size_t s = 0; s < cfg.view_sessions; ++s) {
    RawSession session{static_cast<std::int64_t>(s), {}};
    const std::size_t c = rng.below(cfg.clusters);
    const auto n = length();
    for (std::size_t k = 0; k < n; ++k) session.items.push_back(synth_item_key(maybe_noise(member(c))));
    raw.view.push_back(std::move(session));
  }
  for (std::size_t s = 0; s < cfg.substitutions; ++s) {
    const std::size_t c = rng.below(cfg.clusters);
    if (members[c].size() < 2) continue;
    const auto a = member(c);
    auto b = a;
    while (b == a) b = rng.bernoulli(cfg.noise) ? rng.below(cfg.items) : member(c);
    raw.substitutions.push_back({static_cast<std::int64_t>(s), synth_item_key(a), synth_item_key(b)});
  }
  for (std::size_t s = 0; s < cfg.searches; ++s) {
    const std::size_t c = rng.below(cfg.clusters);
    RawSearch q{static_cast<std::int64_t>(s), {}, {}};
    const auto n = 1 + rng.below(cfg.max_query_length);
    for (std::size_t k = 0; k < n; ++k) q.query_words.push_back(keyword(c));
    const auto clicked = rng.bernoulli(cfg.noise) ? rng.below(cfg.items) : member(c);
    q.clicked_item = synth_item_key(clicked);
    raw.searches.push_back(std::move(q));
  }
  for (std::size_t i = 0; i < cfg.items; ++i) {
    const auto c = out.cluster_of[i];
    RawCatalogEntry e{synth_item_key(i), {}, paths[leaf_order[c % paths.size()]]};
    for (std::size_t k = 0; k < cfg.description_length; ++k) {
      e.description.push_back(rng.bernoulli(cfg.stopword_rate) ? synth_word_key(rng.below(cfg.stopwords)) : keyword(c));
    }
    raw.catalog.push_back(std::move(e));
  }
  raw.category_edges = std::move(edges);

  // Ground truth.
  auto& sub = out.truth["substitute"];
  auto& comp = out.truth["complement"];
  auto& view = out.truth["co_view"];
  auto& isa = out.truth["isa"];
  for (std::size_t i = 0; i < cfg.items; ++i) {
    const auto c = out.cluster_of[i];
    const auto key = synth_item_key(i);
    for (auto j : members[c]) {
      if (j != i) sub[key].push_back(synth_item_key(j));
    }
    view[key] = sub[key];
    for (auto t : rules[c]) {
      for (auto j : members[t]) comp[key].push_back(synth_item_key(j));
    }
    std::sort(comp[key].begin(), comp[key].end());
    comp[key].erase(std::unique(comp[key].begin(), comp[key].end()), comp[key].end());
    isa[key] = {paths[leaf_order[c % paths.size()]].front()};
  }
  return out;
}

/// Exact ground-truth tails for (relation, head); empty if nothing is planted.
inline std::vector<std::string> oracle_rank(const GroundTruth& truth, const std::string& relation,
                                            const std::string& head) {
  auto r = truth.find(relation);
  if (r == truth.end()) throw UsageError("relation '" + relation + "' is not planted");
  const auto& item_rel = truth.count("substitute") ? truth.at("substitute") : r->second;
  if (!r->second.count(head) && !item_rel.count(head)) throw UsageError("unknown head '" + head + "'");
  auto it = r->second.find(head);
  return it == r->second.end() ? std::vector<std::string>{} : it->second;
}

/// Maps a relation's truth onto vocabulary ids, skipping filtered-out keys.
inline std::map<Index, std::vector<Index>> resolve_truth(const GroundTruth& truth, const std::string& relation,
                                                         const Vocabulary& heads, const Vocabulary& tails) {
  std::map<Index, std::vector<Index>> out;
  auto r = truth.find(relation);
  if (r == truth.end()) return out;
  for (const auto& [h, ts] : r->second) {
    auto hid = heads.find(h);
    if (!hid) continue;
    auto& v = out[*hid];
    for (const auto& t : ts) {
      if (auto tid = tails.find(t)) v.push_back(*tid);
    }
    std::sort(v.begin(), v.end());
  }
  return out;
}

inline void write_ground_truth(const GroundTruth& truth, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& [rel, heads] : truth) {
    for (const auto& [h, tails] : heads) {
      for (const auto& t : tails) out << rel << '\t' << h << '\t' << t << '\n';
    }
  }
}

inline GroundTruth read_ground_truth(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  GroundTruth truth;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    auto f = detail::split(line, '\t');
    if (f.size() != 3) throw DataError(detail::where(file, n) + ": expected relation, head, tail");
    truth[f[0]][f[1]].push_back(f[2]);
  }
  return truth;
}

/// Writes the data-model files plus ground_truth.tsv into `dir`.
inline void write_synth(const SynthOutput& out, const std::filesystem::path& dir) {
  write_raw(out.raw, dir);
  write_ground_truth(out.truth, dir / "ground_truth.tsv");
}

}  // namespace pkge
