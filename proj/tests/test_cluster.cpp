#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "vptd/cluster.hpp"

using namespace vptd;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<std::size_t> sizes_of(const Clustering& c) {
  std::vector<std::size_t> s(c.k, 0);
  for (auto a : c.assignment) ++s[a];
  return s;
}

// Exhaustive best split of the rows into consecutive-size halves by within-cluster SSE.
std::vector<std::uint32_t> best_balanced_split(const Matrix& X) {
  const auto n = static_cast<std::uint32_t>(X.rows());
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::uint32_t> labels;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::uint32_t>(__builtin_popcount(mask)) != n / 2 || !(mask & 1u)) continue;
    double sse = 0.0;
    for (std::uint32_t side = 0; side < 2; ++side) {
      RowVector mean = RowVector::Zero(X.cols());
      std::uint32_t cnt = 0;
      for (std::uint32_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == side) {
          mean += X.row(i);
          ++cnt;
        }
      mean /= cnt;
      for (std::uint32_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == side) sse += (X.row(i) - mean).squaredNorm();
    }
    if (sse < best) {
      best = sse;
      labels.assign(n, 0);
      for (std::uint32_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1u;
    }
  }
  return labels;
}

}  // namespace

TEST(Kmeans, SingleClusterCentroidIsNormalizedMean) {
  Matrix X(3, 2);
  X << 3, 4, 0, 2, -1, 0;
  const auto c = balanced_kmeans(X, 3, 10, 0);
  EXPECT_EQ(c.k, 1u);
  EXPECT_EQ(c.assignment, (std::vector<ClusterId>{0, 0, 0}));
  EXPECT_NEAR(c.centroids(0, 0), (0.6 + 0.0 - 1.0) / 3.0, 1e-12);
  EXPECT_NEAR(c.centroids(0, 1), (0.8 + 1.0 + 0.0) / 3.0, 1e-12);
}

TEST(Kmeans, TwoTightPairs) {
  Matrix X(4, 2);
  X << 1.0, 0.01, 0.0, 1.0, 1.0, -0.01, 0.01, 1.0;
  const auto c = balanced_kmeans(X, 2, 50, 3);
  EXPECT_EQ(c.k, 2u);
  EXPECT_EQ(c.assignment[0], c.assignment[2]);
  EXPECT_EQ(c.assignment[1], c.assignment[3]);
  EXPECT_NE(c.assignment[0], c.assignment[1]);
}

TEST(Kmeans, MatchesExhaustiveSplitOnSeparatedData) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Matrix X(8, 3);
    RowVector ca(3), cb(3);
    ca << 1, 0, 0;
    cb << 0, 1, 0;
    std::vector<std::uint32_t> planted{0, 0, 0, 0, 1, 1, 1, 1};
    rng.shuffle(planted);
    for (std::uint32_t i = 0; i < 8; ++i) {
      X.row(i) = (planted[i] ? cb : ca) + 0.05 * RowVector::NullaryExpr(3, [&] { return rng.normal(); });
    }
    const auto c = balanced_kmeans(X, 4, 100, seed);
    const auto oracle = best_balanced_split(detail::l2_normalize_rows(X));
    EXPECT_DOUBLE_EQ(adjusted_rand_index(c.assignment, oracle), 1.0) << "seed " << seed;
    EXPECT_DOUBLE_EQ(adjusted_rand_index(oracle, planted), 1.0) << "seed " << seed;
  }
}

TEST(Kmeans, LargeVocabularyIsBalanced) {
  const Matrix X = random_matrix(16384, 4, 1);
  const auto c = balanced_kmeans(X, 10, 2, 0);
  EXPECT_EQ(c.k, 1639u);
  const auto s = sizes_of(c);
  EXPECT_EQ(*std::min_element(s.begin(), s.end()), 9u);
  EXPECT_EQ(*std::max_element(s.begin(), s.end()), 10u);
}

TEST(Kmeans, PartitionAndBalanceProperties) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = static_cast<Eigen::Index>(rng.range(2, 120));
    const auto cs = static_cast<std::uint32_t>(rng.range(1, static_cast<std::int64_t>(n)));
    const Matrix X = random_matrix(n, 3, trial);
    const auto c = balanced_kmeans(X, cs, 20, trial);
    EXPECT_EQ(c.k, (n + cs - 1) / cs);
    ASSERT_EQ(c.assignment.size(), static_cast<std::size_t>(n));
    const auto s = sizes_of(c);
    EXPECT_LE(*std::max_element(s.begin(), s.end()) - *std::min_element(s.begin(), s.end()), 1u);
    std::size_t total = 0;
    for (const auto& m : c.members) total += m.size();
    EXPECT_EQ(total, static_cast<std::size_t>(n));
  }
}

TEST(Kmeans, Deterministic) {
  const Matrix X = random_matrix(300, 5, 2);
  const auto a = balanced_kmeans(X, 10, 50, 4), b = balanced_kmeans(X, 10, 50, 4);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.centroids, b.centroids);
}

TEST(Kmeans, InvalidClusterSize) {
  const Matrix X = random_matrix(5, 2, 0);
  for (std::uint32_t cs : {0u, 6u}) {
    try {
      balanced_kmeans(X, cs, 10, 0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidClusterSize);
    }
  }
}

TEST(Clusters, LookupAndRange) {
  const Matrix X = random_matrix(20, 2, 3);
  const auto c = balanced_kmeans(X, 5, 10, 0);
  for (TokenId t = 0; t < 20; ++t) EXPECT_EQ(cluster_of(c, t), c.assignment[t]);
  try {
    cluster_of(c, 20);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OutOfRangeToken);
  }
}

TEST(Clusters, CsvRoundTrip) {
  const Matrix X = random_matrix(50, 3, 5);
  const auto c = balanced_kmeans(X, 7, 20, 1);
  const auto path = std::filesystem::temp_directory_path() / "vptd_test_clusters.csv";
  save_clustering(path, c, 1);
  const auto back = load_clustering(path);
  EXPECT_EQ(back.assignment, c.assignment);
  EXPECT_EQ(back.k, c.k);
  EXPECT_EQ(back.members, c.members);
  EXPECT_EQ(back.centroids.rows(), c.centroids.rows());
  EXPECT_TRUE(back.centroids.isApprox(c.centroids, 1e-6));
  EXPECT_EQ(io::read_file(path).substr(0, 20), "token_id,cluster_id\n");
  std::filesystem::remove(path);
  std::filesystem::remove(centroids_path(path));
}

TEST(Clusters, MalformedCsv) {
  for (const char* text : {"token_id,cluster_id\n0,1\n2,0\n", "0;1\n", ""}) {
    try {
      parse_clustering_csv(text);
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::MalformedRecord);
    }
  }
}

TEST(Ari, KnownValues) {
  const std::vector<std::uint32_t> a{0, 0, 1, 1}, relabeled{1, 1, 0, 0}, split{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, relabeled), 1.0);
  EXPECT_NEAR(adjusted_rand_index(a, split), -0.5, 1e-12);
  const std::vector<std::uint32_t> x{0, 0, 0, 1, 1, 1}, y{0, 0, 1, 1, 2, 2};
  // contingency sum 2, rows 6, cols 3, expected 6*3/15 = 1.2, max 4.5
  EXPECT_NEAR(adjusted_rand_index(x, y), (2.0 - 1.2) / (4.5 - 1.2), 1e-12);
}
