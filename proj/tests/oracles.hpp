#pragma once

// Independent reference implementations used only by the tests. They follow
// the textbook definitions directly (dense matrices, double loops, plain
// arrays) and share no code paths with the library beyond the data types.

#include <algorithm>
#include <cmath>
#include <iterator>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vptd/corpus.hpp"

namespace oracle {

/// Dense |V| x |V| co-occurrence matrix by enumerating every position pair.
inline std::vector<std::vector<std::uint64_t>> cooccurrence_bruteforce(const vptd::Corpus& corpus,
                                                                       std::uint32_t block_h, std::uint32_t block_w,
                                                                       const std::set<std::string>& excluded) {
  const auto V = corpus.codebook_size;
  std::vector<std::vector<std::uint64_t>> M(V, std::vector<std::uint64_t>(V, 0));
  for (const auto& g : corpus.records) {
    const std::size_t m = g.size();
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t ri = i / g.width, ci = i % g.width;
      for (std::size_t j = i + 1; j < m; ++j) {
        const std::size_t rj = j / g.width, cj = j % g.width;
        const bool same_block = ri / block_h == rj / block_h && ci / block_w == cj / block_w;
        const bool same_segment = g.segments[i] != -1 && g.segments[i] == g.segments[j] &&
                                  !excluded.contains(g.segment_labels.at(g.segments[i]));
        if ((same_block || same_segment) && g.tokens[i] != g.tokens[j]) {
          ++M[g.tokens[i]][g.tokens[j]];
          ++M[g.tokens[j]][g.tokens[i]];
        }
      }
    }
  }
  return M;
}

/// Projection edit written with plain loops over std::vector rows.
inline std::vector<std::vector<double>> decontaminate_scalar(std::vector<std::vector<double>> H,
                                                             const std::vector<std::vector<double>>& hal,
                                                             double gamma) {
  for (const auto& a : hal) {
    double na = 0.0;
    for (double x : a) na += x * x;
    na = std::sqrt(na);
    if (na == 0.0) continue;
    double hat_sq = 0.0;
    for (double x : a) hat_sq += (x / na) * (x / na);
    for (auto& g : H) {
      double ng = 0.0;
      for (double x : g) ng += x * x;
      ng = std::sqrt(ng);
      if (ng == 0.0) continue;
      double dot = 0.0;
      for (std::size_t d = 0; d < g.size(); ++d) dot += (g[d] / ng) * (a[d] / na);
      const double coef = dot / hat_sq;
      for (std::size_t d = 0; d < g.size(); ++d) g[d] -= gamma * coef * a[d];
    }
  }
  return H;
}

/// Per-position association scan.
inline std::map<std::string, std::uint64_t> association_bruteforce(const std::set<std::uint32_t>& group,
                                                                   const vptd::Corpus& corpus,
                                                                   const std::set<std::string>& excluded) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& g : corpus.records)
    for (std::size_t p = 0; p < g.size(); ++p) {
      if (g.segments[p] == -1) continue;
      const auto& label = g.segment_labels.at(g.segments[p]);
      if (excluded.contains(label)) continue;
      if (group.count(g.tokens[p])) ++out[label];
    }
  return out;
}

struct RecordMetrics {
  double chair, cover, hal, cog;
};

/// Per-record AMBER quantities via std::set_intersection.
inline RecordMetrics record_metrics(const std::set<std::string>& mentioned, const std::set<std::string>& truth,
                                    const std::set<std::string>& targets) {
  std::vector<std::string> inter, cog;
  std::set_intersection(mentioned.begin(), mentioned.end(), truth.begin(), truth.end(), std::back_inserter(inter));
  std::set_intersection(mentioned.begin(), mentioned.end(), targets.begin(), targets.end(), std::back_inserter(cog));
  RecordMetrics m{};
  m.cover = double(inter.size()) / double(truth.size());
  if (!mentioned.empty()) {
    m.chair = 1.0 - double(inter.size()) / double(mentioned.size());
    m.hal = m.chair != 0.0 ? 1.0 : 0.0;
    m.cog = double(cog.size()) / double(mentioned.size());
  }
  return m;
}

/// Object-HalBench counts via std::set_difference.
inline std::pair<double, double> halbench(const std::vector<std::pair<std::set<std::string>, std::set<std::string>>>& rs) {
  double with_obj = 0, with_hal = 0, mentioned = 0, hal = 0;
  for (const auto& [m, t] : rs) {
    if (m.empty()) continue;
    std::vector<std::string> diff;
    std::set_difference(m.begin(), m.end(), t.begin(), t.end(), std::back_inserter(diff));
    with_obj += 1;
    with_hal += diff.empty() ? 0 : 1;
    mentioned += double(m.size());
    hal += double(diff.size());
  }
  return {with_hal / with_obj, hal / mentioned};
}

}  // namespace oracle
