#pragma once

// Balanced K-means over node embeddings. Cluster sizes differ by at most one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vptd/binary_io.hpp"
#include "vptd/error.hpp"
#include "vptd/gnn.hpp"
#include "vptd/matrix.hpp"
#include "vptd/rng.hpp"

namespace vptd {

using ClusterId = std::uint32_t;

struct Clustering {
  std::uint32_t k = 0;
  std::uint32_t cluster_size = 0;
  std::vector<ClusterId> assignment;  // token -> cluster
  Matrix centroids;                   // k x d
  std::vector<std::vector<TokenId>> members;  // cluster -> sorted tokens
  std::uint32_t iterations = 0;

  std::uint32_t vocab_size() const { return static_cast<std::uint32_t>(assignment.size()); }
};

/// Rebuilds `members` from `assignment`.
inline void index_members(Clustering& c) {
  c.members.assign(c.k, {});
  for (TokenId t = 0; t < c.assignment.size(); ++t) c.members[c.assignment[t]].push_back(t);
}

inline ClusterId cluster_of(const Clustering& c, TokenId token) {
  if (token >= c.assignment.size()) {
    throw Error(ErrorKind::OutOfRangeToken,
                "token " + std::to_string(token) + " >= |V|=" + std::to_string(c.assignment.size()));
  }
  return c.assignment[token];
}

namespace detail {

inline Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

/// Squared distances, points x centroids.
inline Matrix squared_distances(const Matrix& X, const Matrix& C) {
  const Vector xn = X.rowwise().squaredNorm();
  const Vector cn = C.rowwise().squaredNorm();
  Matrix D = -2.0 * X * C.transpose();
  D.colwise() += xn;
  D.rowwise() += cn.transpose();
  return D.cwiseMax(0.0);
}

inline Matrix kmeans_plus_plus(const Matrix& X, std::uint32_t k, Rng& rng) {
  const auto n = X.rows();
  Matrix C(k, X.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  auto take = [&](Eigen::Index idx, std::uint32_t slot) {
    chosen[static_cast<std::size_t>(idx)] = true;
    C.row(slot) = X.row(idx);
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (X.row(i) - X.row(idx)).squaredNorm());
    }
  };
  take(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))), 0);
  for (std::uint32_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[static_cast<std::size_t>(i)];
        if (target < 0.0 && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {  // rounding at the tail
        for (Eigen::Index i = n; i-- > 0;)
          if (d2[static_cast<std::size_t>(i)] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      std::vector<Eigen::Index> free;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) free.push_back(i);
      pick = free[rng.below(free.size())];
    }
    take(pick, c);
  }
  return C;
}

/// Greedy capacity-constrained assignment: points with the largest gap between
/// their two nearest centroids choose first. Capacities are floor(n/k) plus
/// n mod k one-off extras, so the final sizes are exactly balanced.
inline std::vector<ClusterId> balanced_assign(const Matrix& D) {
  const auto n = static_cast<std::size_t>(D.rows());
  const auto k = static_cast<std::size_t>(D.cols());
  const std::size_t floor_cap = n / k;
  std::size_t extras = n % k;

  std::vector<double> margin(n);
  std::vector<ClusterId> nearest(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    ClusterId arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      if (d < best) {
        second = best;
        best = d;
        arg = static_cast<ClusterId>(c);
      } else if (d < second) {
        second = d;
      }
    }
    nearest[i] = arg;
    margin[i] = k > 1 ? second - best : 0.0;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return margin[a] > margin[b]; });

  std::vector<std::size_t> size(k, 0);
  auto has_room = [&](std::size_t c) { return size[c] < floor_cap || (size[c] == floor_cap && extras > 0); };
  auto place = [&](std::size_t c) {
    if (size[c] == floor_cap) --extras;
    ++size[c];
  };
  std::vector<ClusterId> assignment(n);
  std::vector<std::size_t> by_distance(k);
  for (std::size_t i : order) {
    std::size_t target = nearest[i];
    if (!has_room(target)) {
      std::iota(by_distance.begin(), by_distance.end(), 0);
      std::stable_sort(by_distance.begin(), by_distance.end(), [&](std::size_t a, std::size_t b) {
        return D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) <
               D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b));
      });
      target = *std::find_if(by_distance.begin(), by_distance.end(), has_room);
    }
    place(target);
    assignment[i] = static_cast<ClusterId>(target);
  }
  return assignment;
}

}  // namespace detail

/// k = ceil(|V| / cluster_size) clusters over L2-normalized rows, k-means++
/// seeding, balanced reassignment each iteration; returns the lowest-inertia state.
inline Clustering balanced_kmeans(const Matrix& embeddings, std::uint32_t cluster_size, std::uint32_t max_iter,
                                  std::uint64_t seed) {
  const auto n = static_cast<std::uint32_t>(embeddings.rows());
  if (cluster_size < 1 || cluster_size > n) {
    throw Error(ErrorKind::InvalidClusterSize,
                "cluster_size " + std::to_string(cluster_size) + " outside [1, " + std::to_string(n) + "]");
  }
  Clustering c;
  c.cluster_size = cluster_size;
  c.k = (n + cluster_size - 1) / cluster_size;
  const Matrix X = detail::l2_normalize_rows(embeddings);
  Rng rng(derive_seed(seed, "kmeans"));
  c.centroids = detail::kmeans_plus_plus(X, c.k, rng);

  // Stops at the first iteration that does not lower the inertia.
  double best_inertia = std::numeric_limits<double>::infinity();
  std::vector<ClusterId> best_assignment;
  Matrix best_centroids;
  for (std::uint32_t it = 0; it < std::max(1u, max_iter); ++it) {
    auto next = detail::balanced_assign(detail::squared_distances(X, c.centroids));
    const bool unchanged = next == c.assignment;
    c.assignment = std::move(next);
    ++c.iterations;
    Matrix sums = Matrix::Zero(c.k, X.cols());
    std::vector<std::size_t> counts(c.k, 0);
    for (std::uint32_t i = 0; i < n; ++i) {
      sums.row(c.assignment[i]) += X.row(i);
      ++counts[c.assignment[i]];
    }
    for (std::uint32_t j = 0; j < c.k; ++j) c.centroids.row(j) = sums.row(j) / static_cast<double>(counts[j]);
    double inertia = 0.0;
    for (std::uint32_t i = 0; i < n; ++i) inertia += (X.row(i) - c.centroids.row(c.assignment[i])).squaredNorm();
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_assignment = c.assignment;
      best_centroids = c.centroids;
    } else {
      break;
    }
    if (unchanged) break;
  }
  c.assignment = std::move(best_assignment);
  c.centroids = std::move(best_centroids);
  index_members(c);
  return c;
}

inline Clustering balanced_kmeans(const NodeEmbeddings& e, std::uint32_t cluster_size = 10,
                                  std::uint32_t max_iter = 100, std::uint64_t seed = 0) {
  return balanced_kmeans(e.values, cluster_size, max_iter, seed);
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::DimensionMismatch, "labelings differ in length");
  auto choose2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> table;
  std::map<std::uint32_t, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [_, v] : table) index += choose2(v);
  for (const auto& [_, v] : rows) sum_rows += choose2(v);
  for (const auto& [_, v] : cols) sum_cols += choose2(v);
  const double expected = sum_rows * sum_cols / choose2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// ---- files ------------------------------------------------------------------

inline std::string clustering_csv(const Clustering& c) {
  std::string out = "token_id,cluster_id\n";
  for (TokenId t = 0; t < c.assignment.size(); ++t) {
    out += std::to_string(t) + "," + std::to_string(c.assignment[t]) + "\n";
  }
  return out;
}

/// Centroids live next to the CSV: "x.csv" -> "x.centroids.cgce".
inline std::filesystem::path centroids_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".centroids.cgce");
  return p;
}

inline void save_clustering(const std::filesystem::path& csv, const Clustering& c, std::uint64_t seed) {
  io::write_file(csv, clustering_csv(c));
  nlohmann::ordered_json meta;
  meta["k"] = c.k;
  meta["cluster_size"] = c.cluster_size;
  meta["iterations"] = c.iterations;
  meta["seed"] = seed;
  io::write_file(centroids_path(csv), encode_cgce(c.centroids, meta));
}

inline Clustering parse_clustering_csv(std::string_view text) {
  Clustering c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  ClusterId max_cluster = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line == "token_id,cluster_id") continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      const auto token = std::stoul(line.substr(0, comma));
      const auto cluster = std::stoul(line.substr(comma + 1));
      if (token != c.assignment.size()) throw std::invalid_argument("token ids must be 0..|V|-1 in order");
      c.assignment.push_back(static_cast<ClusterId>(cluster));
      max_cluster = std::max(max_cluster, static_cast<ClusterId>(cluster));
    } catch (const std::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "clustering line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (c.assignment.empty()) throw Error(ErrorKind::MalformedRecord, "clustering is empty");
  c.k = max_cluster + 1;
  index_members(c);
  return c;
}

/// Loads the assignment CSV and, when present, the sibling centroid file.
inline Clustering load_clustering(const std::filesystem::path& csv) {
  Clustering c = parse_clustering_csv(io::read_file(csv));
  if (const auto cp = centroids_path(csv); std::filesystem::exists(cp)) {
    auto f = decode_cgce(io::read_file(cp));
    c.centroids = std::move(f.values);
    c.cluster_size = f.meta.value("cluster_size", 0u);
    c.iterations = f.meta.value("iterations", 0u);
  }
  return c;
}

}  // namespace vptd
