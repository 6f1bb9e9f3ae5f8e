#pragma once

// Context-guided co-occurrence graph: token pairs are counted when their
// positions share a spatial block or a (non-excluded) segment, then the top
// fraction of pairs by normalized count become weighted edges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "vptd/binary_io.hpp"
#include "vptd/corpus.hpp"
#include "vptd/error.hpp"

namespace vptd {

struct PairCount {
  TokenId i = 0;  // i < j
  TokenId j = 0;
  std::uint64_t count = 0;

  bool operator==(const PairCount&) const = default;
};

/// Upper-triangular sparse co-occurrence counts, sorted by (i, j).
struct CooccurrenceCounts {
  std::uint32_t vocab_size = 0;
  std::vector<PairCount> pairs;

  std::size_t nnz() const { return pairs.size(); }

  std::uint64_t count(TokenId a, TokenId b) const {
    if (a == b) return 0;
    if (a > b) std::swap(a, b);
    auto it = std::lower_bound(pairs.begin(), pairs.end(), std::pair{a, b},
                               [](const PairCount& p, const std::pair<TokenId, TokenId>& key) {
                                 return std::pair{p.i, p.j} < key;
                               });
    return (it != pairs.end() && it->i == a && it->j == b) ? it->count : 0;
  }

  bool operator==(const CooccurrenceCounts&) const = default;
};

struct Edge {
  TokenId i = 0;  // i < j
  TokenId j = 0;
  float weight = 0.0f;

  bool operator==(const Edge&) const = default;
};

struct CooccurrenceGraph {
  std::uint32_t vocab_size = 0;
  std::vector<Edge> edges;  // sorted by (i, j)

  bool operator==(const CooccurrenceGraph&) const = default;
};

struct GraphBuildOptions {
  std::uint32_t block_h = 3;
  std::uint32_t block_w = 3;
  std::set<std::string> excluded_labels;
  unsigned threads = 1;
};

namespace detail {

using PairMap = std::unordered_map<std::uint64_t, std::uint64_t>;

inline std::uint64_t pair_key(TokenId a, TokenId b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

inline void count_image(const TokenGrid& g, const GraphBuildOptions& opt, PairMap& acc) {
  const std::uint32_t blocks_per_row = (g.width + opt.block_w - 1) / opt.block_w;
  auto block_of = [&](std::size_t p) {
    const auto r = static_cast<std::uint32_t>(p / g.width);
    const auto c = static_cast<std::uint32_t>(p % g.width);
    return (r / opt.block_h) * blocks_per_row + c / opt.block_w;
  };
  auto bump = [&](std::size_t p, std::size_t q) {
    if (g.tokens[p] != g.tokens[q]) ++acc[pair_key(g.tokens[p], g.tokens[q])];
  };

  std::unordered_map<std::uint32_t, std::vector<std::size_t>> by_block;
  std::map<SegmentId, std::vector<std::size_t>> by_segment;
  for (std::size_t p = 0; p < g.size(); ++p) {
    by_block[block_of(p)].push_back(p);
    const SegmentId s = g.segments[p];
    if (s == kUnlabeled) continue;
    if (opt.excluded_labels.contains(g.segment_labels.at(s))) continue;
    by_segment[s].push_back(p);
  }
  for (const auto& [_, pos] : by_block) {
    for (std::size_t a = 0; a < pos.size(); ++a)
      for (std::size_t b = a + 1; b < pos.size(); ++b) bump(pos[a], pos[b]);
  }
  // Same-segment pairs already inside one block were counted above.
  for (const auto& [_, pos] : by_segment) {
    for (std::size_t a = 0; a < pos.size(); ++a) {
      const auto block_a = block_of(pos[a]);
      for (std::size_t b = a + 1; b < pos.size(); ++b) {
        if (block_of(pos[b]) != block_a) bump(pos[a], pos[b]);
      }
    }
  }
}

}  // namespace detail

/// Counts co-occurring token pairs over the corpus. With threads > 1 the
/// records are split into contiguous chunks whose integer counts are summed,
/// which gives the same result as the sequential pass.
inline CooccurrenceCounts count_cooccurrences(const Corpus& corpus, const GraphBuildOptions& opt = {}) {
  if (opt.block_h == 0 || opt.block_w == 0) throw Error(ErrorKind::InvalidConfig, "block dims must be >= 1");
  for (const auto& g : corpus.records) {
    validate_grid(g);
    validate_tokens(g, corpus.codebook_size);
  }

  const std::size_t n = corpus.records.size();
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(opt.threads, n));
  std::vector<detail::PairMap> partial(workers);
  auto run = [&](std::size_t w) {
    const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
    for (std::size_t r = lo; r < hi; ++r) detail::count_image(corpus.records[r], opt, partial[w]);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  for (std::size_t w = 1; w < workers; ++w) {
    for (const auto& [k, v] : partial[w]) partial[0][k] += v;
  }

  CooccurrenceCounts out;
  out.vocab_size = corpus.codebook_size;
  out.pairs.reserve(partial[0].size());
  for (const auto& [k, v] : partial[0]) {
    out.pairs.push_back({static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xffffffffu), v});
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const PairCount& a, const PairCount& b) { return std::pair{a.i, a.j} < std::pair{b.i, b.j}; });
  return out;
}

/// Number of edges kept for `nnz` candidate pairs: floor(retention * nnz).
inline std::size_t retained_edge_count(double retention, std::size_t nnz) {
  // The small offset absorbs representation error, e.g. 0.1 * 30 in binary.
  return static_cast<std::size_t>(std::floor(static_cast<long double>(retention) * nnz + 1e-9L));
}

/// Keeps the top floor(retention * nnz) pairs by count / max_count. Ties at
/// the cutoff go to the lexicographically smaller (i, j).
inline CooccurrenceGraph build_graph(const CooccurrenceCounts& counts, double retention = 0.1) {
  if (!(retention > 0.0 && retention <= 1.0)) throw Error(ErrorKind::InvalidConfig, "retention must lie in (0, 1]");
  CooccurrenceGraph g;
  g.vocab_size = counts.vocab_size;
  if (counts.pairs.empty()) return g;

  std::uint64_t max_count = 0;
  for (const auto& p : counts.pairs) max_count = std::max(max_count, p.count);
  std::vector<PairCount> ranked = counts.pairs;
  std::stable_sort(ranked.begin(), ranked.end(), [](const PairCount& a, const PairCount& b) {
    if (a.count != b.count) return a.count > b.count;
    return std::pair{a.i, a.j} < std::pair{b.i, b.j};
  });
  ranked.resize(retained_edge_count(retention, ranked.size()));
  std::sort(ranked.begin(), ranked.end(),
            [](const PairCount& a, const PairCount& b) { return std::pair{a.i, a.j} < std::pair{b.i, b.j}; });
  g.edges.reserve(ranked.size());
  for (const auto& p : ranked) {
    g.edges.push_back({p.i, p.j, static_cast<float>(static_cast<double>(p.count) / static_cast<double>(max_count))});
  }
  return g;
}

/// Symmetric adjacency lists (neighbors sorted by id) derived from a graph.
struct Adjacency {
  struct Neighbor {
    std::uint32_t node;
    double weight;
  };
  std::vector<std::vector<Neighbor>> neighbors;

  std::size_t size() const { return neighbors.size(); }
  std::size_t degree(std::uint32_t v) const { return neighbors[v].size(); }
};

inline Adjacency make_adjacency(const CooccurrenceGraph& g) {
  Adjacency adj;
  adj.neighbors.resize(g.vocab_size);
  for (const auto& e : g.edges) {
    adj.neighbors[e.i].push_back({e.j, e.weight});
    adj.neighbors[e.j].push_back({e.i, e.weight});
  }
  for (auto& n : adj.neighbors) {
    std::sort(n.begin(), n.end(), [](const auto& a, const auto& b) { return a.node < b.node; });
  }
  return adj;
}

// ---- CGCG ------------------------------------------------------------------

inline constexpr std::string_view kGraphMagic = "CGCG";

inline std::string encode_graph(const CooccurrenceGraph& g) {
  io::ByteWriter w;
  w.magic(kGraphMagic);
  w.u32(g.vocab_size);
  w.u64(g.edges.size());
  for (const auto& e : g.edges) {
    w.u32(e.i);
    w.u32(e.j);
    w.f32(e.weight);
  }
  return w.take();
}

inline CooccurrenceGraph decode_graph(std::string_view bytes) {
  io::ByteReader r(bytes, "graph");
  r.expect_magic(kGraphMagic);
  CooccurrenceGraph g;
  g.vocab_size = r.u32();
  const auto n = r.u64();
  r.require(n * 12);
  g.edges.reserve(n);
  for (std::uint64_t k = 0; k < n; ++k) {
    Edge e{r.u32(), r.u32(), r.f32()};
    if (e.i >= e.j || e.j >= g.vocab_size) {
      throw Error(ErrorKind::MalformedRecord, "graph edge " + std::to_string(k) + " has invalid endpoints");
    }
    if (!std::isfinite(e.weight)) throw Error(ErrorKind::NonFiniteValue, "graph edge " + std::to_string(k));
    g.edges.push_back(e);
  }
  return g;
}

inline void save_graph(const std::filesystem::path& path, const CooccurrenceGraph& g) {
  io::write_file(path, encode_graph(g));
}

inline CooccurrenceGraph load_graph(const std::filesystem::path& path) { return decode_graph(io::read_file(path)); }

}  // namespace vptd
