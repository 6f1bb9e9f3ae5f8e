#pragma once

// Dominant clusters, C1/C2/C3 token groups, token-object association,
// HitRate@K and the CHAIR family of hallucination metrics.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptd/cluster.hpp"
#include "vptd/corpus.hpp"
#include "vptd/error.hpp"
#include "vptd/rng.hpp"

namespace vptd {

struct ClusterCount {
  ClusterId cluster;
  std::size_t count;
};

/// Position counts per cluster, descending, ties by ascending cluster id.
inline std::vector<ClusterCount> cluster_frequencies(const TokenGrid& grid, const Clustering& clustering) {
  std::map<ClusterId, std::size_t> counts;
  for (TokenId t : grid.tokens) ++counts[cluster_of(clustering, t)];
  std::vector<ClusterCount> out;
  for (const auto& [c, n] : counts) out.push_back({c, n});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
  return out;
}

inline std::vector<ClusterId> dominant_clusters(const TokenGrid& grid, const Clustering& clustering, std::size_t n) {
  if (n < 1) throw Error(ErrorKind::InvalidConfig, "n must be >= 1");
  auto freq = cluster_frequencies(grid, clustering);
  std::vector<ClusterId> out;
  for (std::size_t i = 0; i < std::min(n, freq.size()); ++i) out.push_back(freq[i].cluster);
  return out;
}

inline std::set<TokenId> present_tokens(const TokenGrid& grid) { return {grid.tokens.begin(), grid.tokens.end()}; }

struct TokenGroups {
  std::set<TokenId> c1;  // present, in the dominant cluster
  std::set<TokenId> c2;  // absent, in the dominant cluster
  std::set<TokenId> c3;  // present, outside the dominant cluster
};

enum class GroupSelector { C1, C2, C3 };

inline const std::set<TokenId>& select_group(const TokenGroups& g, GroupSelector s) {
  switch (s) {
    case GroupSelector::C1: return g.c1;
    case GroupSelector::C2: return g.c2;
    case GroupSelector::C3: return g.c3;
  }
  return g.c1;
}

inline TokenGroups token_groups(const TokenGrid& grid, const Clustering& clustering) {
  TokenGroups out;
  const auto dominant = dominant_clusters(grid, clustering, 1);
  const auto present = present_tokens(grid);
  if (dominant.empty()) return out;
  const auto& members = clustering.members.at(dominant.front());
  for (TokenId t : members) (present.contains(t) ? out.c1 : out.c2).insert(t);
  for (TokenId t : present)
    if (!out.c1.contains(t)) out.c3.insert(t);
  return out;
}

// ---- token-object association ----------------------------------------------

struct AssociationTable {
  std::map<std::string, std::uint64_t> counts;

  /// Labels by descending count, ties by label.
  std::vector<std::pair<std::string, std::uint64_t>> ranking() const {
    std::vector<std::pair<std::string, std::uint64_t>> r(counts.begin(), counts.end());
    std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return r;
  }

  std::vector<std::string> top_k(std::size_t k) const {
    std::vector<std::string> out;
    for (const auto& [label, _] : ranking()) {
      if (out.size() == k) break;
      out.push_back(label);
    }
    return out;
  }

  AssociationTable& operator+=(const AssociationTable& o) {
    for (const auto& [l, n] : o.counts) counts[l] += n;
    return *this;
  }

  bool operator==(const AssociationTable&) const = default;
};

/// Counts grid positions whose token is in `group` and whose segment label is
/// not excluded, per label, over the whole corpus.
inline AssociationTable object_association(const std::set<TokenId>& group, const Corpus& corpus,
                                           const std::set<std::string>& excluded = {}) {
  AssociationTable table;
  if (group.empty()) return table;
  for (const auto& g : corpus.records) {
    for (std::size_t p = 0; p < g.size(); ++p) {
      const SegmentId s = g.segments[p];
      if (s == kUnlabeled || !group.contains(g.tokens[p])) continue;
      const auto& label = g.segment_labels.at(s);
      if (!excluded.contains(label)) ++table.counts[label];
    }
  }
  return table;
}

/// Per-token label counts over a mask corpus; the association of any token set
/// is the sum of its members' rows.
class AssociationIndex {
 public:
  AssociationIndex(const Corpus& corpus, const std::set<std::string>& excluded) {
    for (const auto& g : corpus.records) {
      for (std::size_t p = 0; p < g.size(); ++p) {
        const SegmentId s = g.segments[p];
        if (s == kUnlabeled) continue;
        const auto& label = g.segment_labels.at(s);
        if (!excluded.contains(label)) ++per_token_[g.tokens[p]][label];
      }
    }
  }

  AssociationTable table(const std::set<TokenId>& group) const {
    AssociationTable t;
    for (TokenId tok : group) {
      if (auto it = per_token_.find(tok); it != per_token_.end()) {
        for (const auto& [label, n] : it->second) t.counts[label] += n;
      }
    }
    return t;
  }

 private:
  std::unordered_map<TokenId, std::map<std::string, std::uint64_t>> per_token_;
};

// ---- hallucination records ---------------------------------------------------

struct HallucinationRecord {
  std::string image_id;
  std::set<std::string> mentioned;  // R'_obj
  std::set<std::string> truth;      // A_obj

  std::set<std::string> hallucinated() const {
    std::set<std::string> out;
    std::set_difference(mentioned.begin(), mentioned.end(), truth.begin(), truth.end(),
                        std::inserter(out, out.end()));
    return out;
  }

  bool operator==(const HallucinationRecord&) const = default;
};

inline nlohmann::ordered_json record_to_json(const HallucinationRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["mentioned_objects"] = r.mentioned;
  j["truth_objects"] = r.truth;
  return j;
}

inline std::vector<HallucinationRecord> parse_records(std::istream& in) {
  std::vector<HallucinationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      HallucinationRecord r;
      r.image_id = j.at("image_id").get<std::string>();
      for (const auto& m : j.at("mentioned_objects")) r.mentioned.insert(m.get<std::string>());
      for (const auto& t : j.at("truth_objects")) r.truth.insert(t.get<std::string>());
      for (const auto* set : {&r.mentioned, &r.truth})
        if (set->contains("")) throw std::invalid_argument("labels must be non-empty");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<HallucinationRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return parse_records(in);
}

inline std::string serialize_records(const std::vector<HallucinationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

// ---- HitRate@K --------------------------------------------------------------

struct HitRate {
  std::size_t hits = 0;
  std::size_t hallucinated = 0;

  double rate() const { return static_cast<double>(hits) / static_cast<double>(hallucinated); }
};

/// Pools every hallucinated object (mentioned \ truth) across records; a hit
/// is an object among the top-K labels associated with the record's selected
/// token group.
inline HitRate hitrate_at_k(const std::vector<HallucinationRecord>& records,
                            const std::map<std::string, const TokenGrid*>& grids, const AssociationIndex& index,
                            const Clustering& clustering, std::size_t K, GroupSelector selector) {
  if (K < 1) throw Error(ErrorKind::InvalidConfig, "K must be >= 1");
  HitRate out;
  for (const auto& r : records) {
    const auto hallucinated = r.hallucinated();
    if (hallucinated.empty()) continue;
    auto it = grids.find(r.image_id);
    if (it == grids.end()) throw Error(ErrorKind::MalformedRecord, "no token grid for image " + r.image_id);
    const auto groups = token_groups(*it->second, clustering);
    const auto top = index.table(select_group(groups, selector)).top_k(K);
    for (const auto& obj : hallucinated) {
      ++out.hallucinated;
      if (std::find(top.begin(), top.end(), obj) != top.end()) ++out.hits;
    }
  }
  if (out.hallucinated == 0) throw Error(ErrorKind::NoHallucinations, "no hallucinated objects in the records");
  return out;
}

inline HitRate hitrate_at_k(const std::vector<HallucinationRecord>& records, const Corpus& grids_corpus,
                            const Corpus& mask_corpus, const Clustering& clustering, std::size_t K,
                            GroupSelector selector, const std::set<std::string>& excluded = {}) {
  std::map<std::string, const TokenGrid*> grids;
  for (const auto& g : grids_corpus.records) grids[g.image_id] = &g;
  return hitrate_at_k(records, grids, AssociationIndex(mask_corpus, excluded), clustering, K, selector);
}

// ---- CHAIR family -----------------------------------------------------------

struct MeanMetric {
  double mean = 0.0;
  std::size_t count = 0;
  std::size_t skipped = 0;
};

struct AmberReport {
  MeanMetric chair, cover, hal, cog;
  std::optional<double> amber_score;
};

inline double amber_score(double chair, double f1) { return 0.5 * (1.0 - chair + f1); }

/// CHAIR, Hal and Cog average over records with a non-empty mention set (the
/// rest are tallied as skipped); Cover averages over every record.
inline AmberReport amber_generative_metrics(const std::vector<HallucinationRecord>& records,
                                            const std::set<std::string>& hallucinatory_targets,
                                            std::optional<double> f1 = std::nullopt) {
  if (records.empty()) throw Error(ErrorKind::InvalidConfig, "no records");
  AmberReport rep;
  double chair = 0.0, cover = 0.0, hal = 0.0, cog = 0.0;
  for (const auto& r : records) {
    if (r.truth.empty()) throw Error(ErrorKind::EmptyTruth, "record " + r.image_id + " has no annotated objects");
    std::size_t in_truth = 0, in_targets = 0;
    for (const auto& m : r.mentioned) {
      in_truth += r.truth.contains(m);
      in_targets += hallucinatory_targets.contains(m);
    }
    cover += static_cast<double>(in_truth) / static_cast<double>(r.truth.size());
    ++rep.cover.count;
    if (r.mentioned.empty()) {
      ++rep.chair.skipped;
      ++rep.hal.skipped;
      ++rep.cog.skipped;
      continue;
    }
    const double n = static_cast<double>(r.mentioned.size());
    const double c = 1.0 - static_cast<double>(in_truth) / n;
    chair += c;
    hal += c != 0.0 ? 1.0 : 0.0;
    cog += static_cast<double>(in_targets) / n;
    ++rep.chair.count;
    ++rep.hal.count;
    ++rep.cog.count;
  }
  rep.cover.mean = cover / static_cast<double>(rep.cover.count);
  if (rep.chair.count) {
    const double n = static_cast<double>(rep.chair.count);
    rep.chair.mean = chair / n;
    rep.hal.mean = hal / n;
    rep.cog.mean = cog / n;
  }
  if (f1) rep.amber_score = amber_score(rep.chair.mean, *f1);
  return rep;
}

struct HalBenchReport {
  double chair_s = 0.0;
  double chair_i = 0.0;
  std::size_t responses_with_objects = 0;
  std::size_t responses_with_hallucination = 0;
  std::size_t mentioned_objects = 0;
  std::size_t hallucinated_objects = 0;
};

inline HalBenchReport halbench_metrics(const std::vector<HallucinationRecord>& records) {
  HalBenchReport rep;
  for (const auto& r : records) {
    if (r.mentioned.empty()) continue;
    const auto hal = r.hallucinated().size();
    ++rep.responses_with_objects;
    rep.responses_with_hallucination += hal > 0;
    rep.mentioned_objects += r.mentioned.size();
    rep.hallucinated_objects += hal;
  }
  if (rep.responses_with_objects == 0) {
    throw Error(ErrorKind::NoResponsesWithObjects, "no response mentions any object");
  }
  rep.chair_s = static_cast<double>(rep.responses_with_hallucination) / static_cast<double>(rep.responses_with_objects);
  rep.chair_i = static_cast<double>(rep.hallucinated_objects) / static_cast<double>(rep.mentioned_objects);
  return rep;
}

inline nlohmann::ordered_json metric_json(const MeanMetric& m) {
  nlohmann::ordered_json j;
  j["mean"] = m.mean;
  j["count"] = m.count;
  j["skipped"] = m.skipped;
  return j;
}

inline nlohmann::ordered_json report_json(const AmberReport& a, const std::optional<HalBenchReport>& h) {
  nlohmann::ordered_json j;
  j["CHAIR"] = metric_json(a.chair);
  j["Cover"] = metric_json(a.cover);
  j["Hal"] = metric_json(a.hal);
  j["Cog"] = metric_json(a.cog);
  if (a.amber_score) j["AMBER_Score"] = *a.amber_score;
  if (h) {
    nlohmann::ordered_json s;
    s["mean"] = h->chair_s;
    s["count"] = h->responses_with_objects;
    nlohmann::ordered_json i;
    i["mean"] = h->chair_i;
    i["count"] = h->mentioned_objects;
    j["CHAIR_s"] = std::move(s);
    j["CHAIR_i"] = std::move(i);
  }
  return j;
}

// ---- synthetic hallucinations -------------------------------------------------

struct HallucinationSimSpec {
  double prior_rate = 0.8;   // chance of a co-occurrence-driven hallucination per image
  double random_rate = 0.2;  // chance of an unrelated absent object per image
};

/// Mentions every visible object, then (with prior_rate) one absent label that
/// shares a planted group with the largest visible object, and (with
/// random_rate) one uniformly drawn absent object label.
inline std::vector<HallucinationRecord> simulate_hallucinations(const Corpus& corpus, const PlantedTruth& truth,
                                                                const HallucinationSimSpec& spec,
                                                                std::uint64_t seed) {
  Rng rng(derive_seed(seed, "hallucinations"));
  std::map<std::string, std::uint32_t> group_of_label;
  std::vector<std::string> all_labels;
  for (const auto& [g, labels] : truth.labels_of_group) {
    if (g == truth.background_group) continue;
    for (const auto& l : labels) {
      group_of_label[l] = g;
      all_labels.push_back(l);
    }
  }
  std::vector<HallucinationRecord> out;
  for (const auto& grid : corpus.records) {
    HallucinationRecord r;
    r.image_id = grid.image_id;
    std::map<SegmentId, std::size_t> area;
    for (SegmentId s : grid.segments)
      if (s != kUnlabeled) ++area[s];
    SegmentId largest = kUnlabeled;
    std::size_t best = 0;
    for (const auto& [s, a] : area) {
      r.truth.insert(grid.segment_labels.at(s));
      if (a > best) {
        best = a;
        largest = s;
      }
    }
    r.mentioned = r.truth;
    if (largest != kUnlabeled && rng.bernoulli(spec.prior_rate)) {
      std::vector<std::string> candidates;
      for (const auto& l : truth.labels_of_group.at(group_of_label.at(grid.segment_labels.at(largest))))
        if (!r.truth.contains(l)) candidates.push_back(l);
      if (!candidates.empty()) r.mentioned.insert(candidates[rng.below(candidates.size())]);
    }
    if (rng.bernoulli(spec.random_rate)) {
      std::vector<std::string> candidates;
      for (const auto& l : all_labels)
        if (!r.mentioned.contains(l)) candidates.push_back(l);
      if (!candidates.empty()) r.mentioned.insert(candidates[rng.below(candidates.size())]);
    }
    if (!r.truth.empty()) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vptd
