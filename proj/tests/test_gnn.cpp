#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "gradcheck.hpp"
#include "vptd/gnn.hpp"

using namespace vptd;

namespace {

GnnConfig scalar_config() {
  GnnConfig c;
  c.d_codebook = 1;
  c.d_hidden = 1;
  c.d_out = 1;
  c.n_heads = 1;
  return c;
}

void set_scalar(GnnParams& p, double w, double w1, double w2, double w3, double a) {
  p.proj.setOnes();
  for (auto& l : p.layers)
    for (auto& h : l.heads) {
      h.W.setConstant(w);
      h.W1.setConstant(w1);
      h.W2.setConstant(w2);
      h.W3.setConstant(w3);
      h.a.setConstant(a);
    }
}

Adjacency star(std::uint32_t degree) {
  CooccurrenceGraph g;
  g.vocab_size = degree + 1;
  for (std::uint32_t j = 1; j <= degree; ++j) g.edges.push_back({0, j, 1.0f});
  return make_adjacency(g);
}

}  // namespace

TEST(Params, InitIsDeterministicAndShaped) {
  GnnConfig c;
  const auto a = init_params(c, 7), b = init_params(c, 7), other = init_params(c, 8);
  EXPECT_EQ(a.proj, b.proj);
  EXPECT_NE(a.proj, other.proj);
  ASSERT_EQ(a.layers.size(), 2u);
  EXPECT_EQ(a.proj.rows(), 8);
  EXPECT_EQ(a.proj.cols(), 128);
  EXPECT_EQ(a.layers[0].heads[0].W1.rows(), 128);
  EXPECT_EQ(a.layers[0].heads[0].W1.cols(), 64);
  EXPECT_EQ(a.layers[1].heads[1].W.cols(), 16);
  EXPECT_EQ(a.layers[1].heads[1].a.cols(), 16);
}

TEST(Params, IndivisibleHeadsRejected) {
  GnnConfig c;
  c.d_hidden = 3;
  try {
    init_params(c, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
  }
}

TEST(Sampling, SmallDegreeKeepsAllNeighbors) {
  const auto adj = star(3);
  Rng rng(1);
  const std::vector<std::uint32_t> batch{0}, sizes{48};
  const auto sg = sample_neighborhood(adj, batch, sizes, rng);
  EXPECT_EQ(sg.in_edges[0].size(), 3u);
  EXPECT_EQ(sg.size(), 4u);
}

TEST(Sampling, LargeDegreeCapped) {
  const auto adj = star(100);
  Rng rng(2);
  const std::vector<std::uint32_t> batch{0}, sizes{48};
  const auto sg = sample_neighborhood(adj, batch, sizes, rng);
  ASSERT_EQ(sg.in_edges[0].size(), 48u);
  std::set<std::uint32_t> seen;
  for (const auto& e : sg.in_edges[0]) seen.insert(sg.nodes[e.src]);
  EXPECT_EQ(seen.size(), 48u);
  EXPECT_FALSE(seen.contains(0));
}

TEST(Sampling, SecondHopExpandsNewNodesOnly) {
  CooccurrenceGraph g;
  g.vocab_size = 4;
  g.edges = {{0, 1, 1.0f}, {1, 2, 1.0f}, {2, 3, 1.0f}};
  const auto adj = make_adjacency(g);
  Rng rng(3);
  const std::vector<std::uint32_t> batch{0}, sizes{48, 16};
  const auto sg = sample_neighborhood(adj, batch, sizes, rng);
  EXPECT_EQ(sg.nodes, (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(sg.in_edges[1].size(), 2u);
  EXPECT_TRUE(sg.in_edges[2].empty());
}

TEST(Forward, IsolatedNodeAttendsToItself) {
  auto c = scalar_config();
  const auto adj = star(0);
  auto p = init_params(c, 0);
  set_scalar(p, 2.0, 0.3, 0.4, 1.0, 1.0);
  Matrix cb(1, 1);
  cb << 1.5;
  const auto cache = forward(p, full_graph(adj), cb, c);
  EXPECT_DOUBLE_EQ(cache.layers[0].alpha[0][0], 1.0);
  EXPECT_DOUBLE_EQ(cache.output(0, 0), 2.0 * 2.0 * 1.5);
}

TEST(Forward, TwoNodeHandComputed) {
  auto c = scalar_config();
  CooccurrenceGraph g;
  g.vocab_size = 2;
  g.edges = {{0, 1, 1.0f}};
  auto p = init_params(c, 0);
  set_scalar(p, 1.0, 0.5, 0.5, 1.0, 1.0);
  Matrix cb = Matrix::Ones(2, 1);
  const auto cache = forward(p, full_graph(make_adjacency(g)), cb, c);
  for (double a : cache.layers[0].alpha[0]) EXPECT_DOUBLE_EQ(a, 0.5);
  EXPECT_DOUBLE_EQ(cache.layers[0].Z(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cache.layers[1].input(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cache.output(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cache.output(1, 0), 1.0);
}

TEST(Forward, AttentionIsADistribution) {
  const auto in = gradcheck::make_instance(11);
  const auto cache = forward(in.params, in.subgraph, in.codebook, in.config);
  for (const auto& layer : cache.layers)
    for (const auto& alpha : layer.alpha)
      for (std::size_t i = 0; i < in.subgraph.size(); ++i) {
        double s = 0.0;
        for (std::size_t k = cache.offset[i]; k < cache.offset[i + 1]; ++k) {
          EXPECT_GT(alpha[k], 0.0);
          s += alpha[k];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
}

TEST(Forward, EdgeDropoutNeverDropsSelf) {
  auto in = gradcheck::make_instance(12);
  Rng rng(5);
  const auto cache = forward(in.params, in.subgraph, in.codebook, in.config, {0.0, 0.9, &rng});
  for (std::size_t i = 0; i < cache.candidates.size(); ++i) {
    ASSERT_FALSE(cache.candidates[i].empty());
    EXPECT_EQ(cache.candidates[i][0].src, i);
  }
}

TEST(Loss, ContrastiveTwoIdenticalRows) {
  Matrix e(2, 2);
  e << 1, 0, 1, 0;
  const std::vector<LossEdge> edges{{0, 1, 1.0}};
  EXPECT_NEAR(contrastive_loss(e, edges, 0.1), std::log(2.0), 1e-12);
}

TEST(Loss, ContrastiveNonNegativeAndScaleInvariant) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix e(6, 3);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
    std::vector<LossEdge> edges{{0, 1, rng.uniform(0.1, 1.0)}, {2, 4, rng.uniform(0.1, 1.0)}};
    const double tau = rng.uniform(0.02, 0.5);
    const double l = contrastive_loss(e, edges, tau);
    EXPECT_GE(l, -1e-12);
    Matrix scaled = e;
    for (Eigen::Index i = 0; i < e.rows(); ++i) scaled.row(i) *= rng.uniform(0.1, 10.0);
    EXPECT_NEAR(contrastive_loss(scaled, edges, tau), l, 1e-9);
  }
}

TEST(Loss, ContrastiveNeedsPositives) {
  Matrix e = Matrix::Identity(3, 3);
  try {
    contrastive_loss(e, {}, 0.1);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.kind(), ErrorKind::NoPositivePairs);
  }
}

TEST(Loss, PpsExamples) {
  Matrix e(2, 2);
  e << 1, 0, 0, 1;
  const std::vector<LossEdge> w1{{0, 1, 1.0}}, wsmall{{0, 1, 0.5}};
  EXPECT_NEAR(pps_loss(e, w1, 0.9), 0.9, 1e-12);
  EXPECT_NEAR(pps_loss(e, wsmall, 0.9), 0.5 * 0.45, 1e-12);
  Matrix same(2, 2);
  same << 1, 0, 1, 0;
  EXPECT_EQ(pps_loss(same, w1, 0.9), 0.0);
}

TEST(Loss, PpsDividesByViolatingEdges) {
  Matrix e(3, 2);
  e << 1, 0, 0, 1, 1, 0;
  // (0,2) is satisfied and does not count toward the divisor.
  const std::vector<LossEdge> edges{{0, 1, 1.0}, {0, 2, 1.0}, {1, 2, 0.5}};
  EXPECT_NEAR(pps_loss(e, edges, 0.9), (0.9 + 0.5 * 0.45) / 2.0, 1e-12);
}

TEST(Loss, CompositeMatchesParts) {
  Rng rng(4);
  Matrix e(5, 3);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
  const std::vector<LossEdge> edges{{0, 1, 0.8}, {1, 3, 0.4}};
  const auto r = composite_loss(e, edges, 0.2, 0.9);
  EXPECT_NEAR(r.contrast, contrastive_loss(e, edges, 0.2), 1e-12);
  EXPECT_NEAR(r.pps, pps_loss(e, edges, 0.9), 1e-12);
  EXPECT_NEAR(r.total, r.contrast + r.pps, 1e-12);
}

TEST(Gradients, MatchFiniteDifferences) {
  const auto in = gradcheck::kink_safe_instance(100);
  const auto report = gradcheck::check(in);
  EXPECT_EQ(report.coordinates, in.params.parameter_count());
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Gradients, EdgelessBatchIsZero) {
  auto in = gradcheck::make_instance(21);
  in.edges.clear();
  const auto r = loss_and_gradients(in.params, in.subgraph, in.codebook, in.edges, in.config, 0.1);
  EXPECT_FALSE(r.loss.has_positive);
  EXPECT_EQ(global_norm(r.grads), 0.0);
}

TEST(Gradients, NoMessageEdgesLeavesAttentionUntouched) {
  auto in = gradcheck::make_instance(22);
  for (auto& e : in.subgraph.in_edges) e.clear();
  const auto r = loss_and_gradients(in.params, in.subgraph, in.codebook, in.edges, in.config, 0.1);
  ASSERT_TRUE(r.loss.has_positive);
  for (const auto& l : r.grads.layers)
    for (const auto& h : l.heads) {
      EXPECT_EQ(h.W1.norm(), 0.0);
      EXPECT_EQ(h.W2.norm(), 0.0);
      EXPECT_EQ(h.W3.norm(), 0.0);
      EXPECT_EQ(h.a.norm(), 0.0);
      EXPECT_GT(h.W.norm(), 0.0);
    }
}

TEST(Optimizer, WarmupAndCosine) {
  GnnConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(0, 1000, c), 0.0);
  EXPECT_NEAR(learning_rate(50, 1000, c), 2e-3, 1e-15);
  EXPECT_NEAR(learning_rate(100, 1000, c), 4e-3, 1e-15);
  EXPECT_NEAR(learning_rate(550, 1000, c), 2e-3, 1e-15);
  EXPECT_NEAR(learning_rate(1000, 1000, c), 0.0, 1e-15);
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  GnnConfig c;
  c.d_hidden = 4;
  c.d_out = 4;
  auto g = init_params(c, 0).zeros_like();
  g.proj(0, 0) = 3.0;
  g.layers[0].heads[0].a(0, 0) = 4.0;
  EXPECT_DOUBLE_EQ(clip_gradients(g, 0.5), 5.0);
  EXPECT_NEAR(g.proj(0, 0), 0.3, 1e-15);
  EXPECT_NEAR(g.layers[0].heads[0].a(0, 0), 0.4, 1e-15);
  EXPECT_NEAR(global_norm(g), 0.5, 1e-15);
}

TEST(Optimizer, ZeroGradientWithoutDecayIsANoOp) {
  GnnConfig c;
  c.d_hidden = 4;
  c.d_out = 4;
  c.weight_decay = 0.0;
  auto p = init_params(c, 0);
  const auto before = p;
  auto state = init_train_state(p, c);
  for (int i = 0; i < 5; ++i) optimizer_step(state, p, p.zeros_like(), 100, c);
  EXPECT_EQ(p.proj, before.proj);
  EXPECT_EQ(p.layers[1].heads[0].W, before.layers[1].heads[0].W);
}

TEST(Optimizer, DecoupledWeightDecay) {
  GnnConfig c;
  c.d_hidden = 4;
  c.d_out = 4;
  c.warmup_fraction = 0.0;
  auto p = init_params(c, 0);
  const auto before = p;
  auto state = init_train_state(p, c);
  optimizer_step(state, p, p.zeros_like(), 100, c);
  EXPECT_TRUE(p.proj.isApprox(before.proj * (1.0 - c.lr * c.weight_decay), 1e-14));
}

TEST(Temperature, Examples) {
  GnnConfig c;
  EXPECT_NEAR(adjust_temperature(0.1, 0.4, 0.2, c), 0.095, 1e-15);
  EXPECT_NEAR(adjust_temperature(0.14, 0.9, 0.2, c), 0.15, 1e-15);
  EXPECT_NEAR(adjust_temperature(0.08, 0.6, 0.2, c), 0.08, 1e-15);
  EXPECT_NEAR(adjust_temperature(0.02, 0.1, 0.0, c), 0.05, 1e-15);
}

namespace {

struct Planted {
  SyntheticCorpus data;
  CooccurrenceGraph graph;
};

const Planted& planted() {
  static const Planted p = [] {
    SyntheticSpec spec;
    spec.n_images = 200;
    Planted out{generate_synthetic_corpus(spec, 1), {}};
    out.graph = build_graph(count_cooccurrences(out.data.corpus));
    return out;
  }();
  return p;
}

GnnConfig small_training_config() {
  GnnConfig c;
  c.d_hidden = 32;
  c.d_out = 16;
  c.batch_size = 64;
  c.epochs = 15;
  c.seed = 3;
  return c;
}

double mean_similarity(const Matrix& emb, const PlantedTruth& truth, bool same_group) {
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < emb.rows(); ++i)
    for (Eigen::Index j = i + 1; j < emb.rows(); ++j) {
      if ((truth.group_of[i] == truth.group_of[j]) != same_group) continue;
      sum += cosine_similarity(emb.row(i), emb.row(j));
      ++n;
    }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST(Training, LossDecreasesAndGroupsSeparate) {
  const auto& p = planted();
  const auto r = train(p.graph, p.data.codebook, small_training_config());
  ASSERT_GE(r.epoch_losses.size(), 2u);
  EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
  EXPECT_EQ(r.embeddings.values.rows(), 200);
  EXPECT_EQ(r.embeddings.values.cols(), 16);
  EXPECT_GT(mean_similarity(r.embeddings.values, p.data.truth, true),
            mean_similarity(r.embeddings.values, p.data.truth, false));
}

TEST(Training, Deterministic) {
  const auto& p = planted();
  auto c = small_training_config();
  c.epochs = 3;
  const auto a = train(p.graph, p.data.codebook, c);
  const auto b = train(p.graph, p.data.codebook, c);
  EXPECT_EQ(a.embeddings.values, b.embeddings.values);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(encode_cgce(a.embeddings.values, embedding_metadata(a.embeddings)),
            encode_cgce(b.embeddings.values, embedding_metadata(b.embeddings)));
}

TEST(Training, EdgelessGraphRejected) {
  const auto& p = planted();
  CooccurrenceGraph empty{p.graph.vocab_size, {}};
  try {
    train(empty, p.data.codebook, small_training_config());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EdgelessGraph);
  }
}

TEST(Training, TemperatureFollowsRule) {
  const auto& p = planted();
  auto c = small_training_config();
  c.epochs = 5;
  const auto r = train(p.graph, p.data.codebook, c);
  EXPECT_DOUBLE_EQ(r.taus.front(), 0.02);
  for (std::size_t e = 1; e < r.taus.size(); ++e) {
    const double prev = r.taus[e - 1], cur = r.taus[e];
    const bool kept = cur == prev;
    const bool cooled = cur == std::max(c.tau_min, prev * 0.95);
    const bool warmed = cur == std::min(c.tau_max, prev * 1.1);
    EXPECT_TRUE(kept || cooled || warmed) << prev << " -> " << cur;
    EXPECT_LE(cur, c.tau_max);
  }
}

TEST(Embeddings, CgceRoundTrip) {
  NodeEmbeddings e;
  e.values = Matrix::Random(7, 3).cast<float>().cast<double>();
  e.config_hash = config_hash(GnnConfig{});
  e.seed = 42;
  e.epochs_run = 9;
  const auto path = std::filesystem::temp_directory_path() / "vptd_test_emb.cgce";
  save_embeddings(path, e);
  const auto back = load_embeddings(path);
  EXPECT_EQ(back.values, e.values);
  EXPECT_EQ(back.config_hash, e.config_hash);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.epochs_run, 9u);
  std::filesystem::remove(path);
}
