#pragma once

// Attentional GNN over the co-occurrence graph (GATv2-style scores with an
// edge-weight term), the weighted contrastive + positive-pair-similarity
// objective, hand-derived gradients, AdamW with warmup/cosine schedule, and
// the training loop that produces node embeddings for clustering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptd/binary_io.hpp"
#include "vptd/corpus.hpp"
#include "vptd/error.hpp"
#include "vptd/graph.hpp"
#include "vptd/matrix.hpp"
#include "vptd/rng.hpp"

namespace vptd {

struct GnnConfig {
  std::uint32_t d_codebook = 8;
  std::uint32_t d_hidden = 128;
  std::uint32_t d_out = 32;
  std::uint32_t n_layers = 2;
  std::uint32_t n_heads = 2;
  double dropout = 0.1;
  double edge_dropout = 0.1;
  double lr = 4e-3;
  double weight_decay = 0.01;
  double max_grad_norm = 0.5;
  std::uint32_t batch_size = 2048;
  std::vector<std::uint32_t> neighbor_sizes{48, 16};
  std::uint32_t epochs = 100;
  std::uint32_t patience = 10;
  double min_improvement = 1e-4;
  double warmup_fraction = 0.1;
  double tau0 = 0.02;
  double tau_min = 0.05;
  double tau_max = 0.15;
  double beta = 0.9;
  double leaky_slope = 0.2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json config_to_json(const GnnConfig& c) {
  nlohmann::ordered_json j;
  j["d_codebook"] = c.d_codebook;
  j["d_hidden"] = c.d_hidden;
  j["d_out"] = c.d_out;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["dropout"] = c.dropout;
  j["edge_dropout"] = c.edge_dropout;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["max_grad_norm"] = c.max_grad_norm;
  j["batch_size"] = c.batch_size;
  j["neighbor_sizes"] = c.neighbor_sizes;
  j["epochs"] = c.epochs;
  j["patience"] = c.patience;
  j["min_improvement"] = c.min_improvement;
  j["warmup_fraction"] = c.warmup_fraction;
  j["tau0"] = c.tau0;
  j["tau_min"] = c.tau_min;
  j["tau_max"] = c.tau_max;
  j["beta"] = c.beta;
  j["leaky_slope"] = c.leaky_slope;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  return j;
}

inline std::string config_hash(const GnnConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config_to_json(c).dump())));
  return buf;
}

inline void validate_config(const GnnConfig& c) {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::InvalidConfig, why); };
  if (c.d_codebook == 0 || c.d_hidden == 0 || c.d_out == 0) fail("dimensions must be positive");
  if (c.n_layers == 0 || c.n_heads == 0) fail("n_layers and n_heads must be positive");
  if (c.d_hidden % c.n_heads != 0) fail("d_hidden must be divisible by n_heads");
  if (c.d_out % c.n_heads != 0) fail("d_out must be divisible by n_heads");
  for (double r : {c.dropout, c.edge_dropout, c.warmup_fraction, c.weight_decay}) {
    if (!(r >= 0.0 && r <= 1.0)) fail("rates must lie in [0, 1]");
  }
  if (c.dropout >= 1.0) fail("dropout must be < 1");
  if (c.neighbor_sizes.size() != c.n_layers) fail("neighbor_sizes must have one entry per layer");
  if (c.batch_size < 2) fail("batch_size must be >= 2");
  if (!(c.lr > 0.0) || !(c.max_grad_norm > 0.0)) fail("lr and max_grad_norm must be positive");
  if (!(c.tau0 > 0.0) || !(c.tau_min > 0.0) || c.tau_min > c.tau_max) fail("invalid temperature range");
  if (!(c.beta > 0.0)) fail("beta must be positive");
}

// ---- parameters -------------------------------------------------------------

struct HeadParams {
  Matrix W;   // d_in x d_head, message transform
  Matrix W1;  // d_in x d_head, target term of the score
  Matrix W2;  // d_in x d_head, source term of the score
  Matrix W3;  // 1 x d_head, edge-weight term of the score
  Matrix a;   // 1 x d_head, attention vector
};

struct LayerParams {
  std::vector<HeadParams> heads;
};

struct GnnParams {
  Matrix proj;  // d_codebook x d_hidden
  std::vector<LayerParams> layers;

  /// Every tensor in a fixed order; gradients and optimizer moments share it.
  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out{&proj};
    for (auto& l : layers)
      for (auto& h : l.heads) out.insert(out.end(), {&h.W, &h.W1, &h.W2, &h.W3, &h.a});
    return out;
  }
  std::vector<const Matrix*> tensors() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<GnnParams*>(this)->tensors()) out.push_back(m);
    return out;
  }

  GnnParams zeros_like() const {
    GnnParams z = *this;
    for (Matrix* m : z.tensors()) m->setZero();
    return z;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Matrix* m : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
  }
};

inline std::uint32_t layer_input_dim(const GnnConfig& c, std::uint32_t) { return c.d_hidden; }
inline std::uint32_t layer_output_dim(const GnnConfig& c, std::uint32_t l) {
  return l + 1 == c.n_layers ? c.d_out : c.d_hidden;
}

/// Glorot-uniform initialization, deterministic in (config, seed).
inline GnnParams init_params(const GnnConfig& c, std::uint64_t seed) {
  validate_config(c);
  Rng rng(derive_seed(seed, "init"));
  auto glorot = [&](Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-limit, limit);
    return m;
  };
  GnnParams p;
  p.proj = glorot(c.d_codebook, c.d_hidden, c.d_codebook, c.d_hidden);
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const std::uint32_t din = layer_input_dim(c, l);
    const std::uint32_t dk = layer_output_dim(c, l) / c.n_heads;
    LayerParams layer;
    for (std::uint32_t k = 0; k < c.n_heads; ++k) {
      HeadParams h;
      h.W = glorot(din, dk, din, dk);
      h.W1 = glorot(din, dk, din, dk);
      h.W2 = glorot(din, dk, din, dk);
      h.W3 = glorot(1, dk, 1, dk);
      h.a = glorot(1, dk, dk, 1);
      layer.heads.push_back(std::move(h));
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// ---- neighborhood sampling ----------------------------------------------------

struct InEdge {
  std::uint32_t src;  // local index into SampledSubgraph::nodes
  double weight;
};

/// Local message-passing structure. The first `n_targets` nodes are the batch;
/// every node aggregates over its in-edges plus itself.
struct SampledSubgraph {
  std::vector<std::uint32_t> nodes;
  std::size_t n_targets = 0;
  std::vector<std::vector<InEdge>> in_edges;

  std::size_t size() const { return nodes.size(); }
};

/// Layered sampling: hop h draws min(sizes[h], degree) neighbors without
/// replacement for every node first reached at hop h-1 (the batch for h = 0).
inline SampledSubgraph sample_neighborhood(const Adjacency& adj, std::span<const std::uint32_t> batch,
                                           std::span<const std::uint32_t> sizes, Rng& rng) {
  SampledSubgraph sg;
  std::unordered_map<std::uint32_t, std::uint32_t> local;
  auto add = [&](std::uint32_t v) {
    auto [it, inserted] = local.try_emplace(v, static_cast<std::uint32_t>(sg.nodes.size()));
    if (inserted) {
      sg.nodes.push_back(v);
      sg.in_edges.emplace_back();
    }
    return std::pair{it->second, inserted};
  };
  std::vector<std::uint32_t> frontier;
  for (std::uint32_t v : batch) {
    if (v >= adj.size()) throw Error(ErrorKind::OutOfRangeToken, "batch node " + std::to_string(v));
    if (add(v).second) frontier.push_back(sg.nodes.size() - 1);
  }
  sg.n_targets = sg.nodes.size();
  for (std::uint32_t cap : sizes) {
    std::vector<std::uint32_t> next;
    for (std::uint32_t dst : frontier) {
      const auto& nbrs = adj.neighbors[sg.nodes[dst]];
      for (std::size_t pick : rng.sample_without_replacement(nbrs.size(), std::min<std::size_t>(cap, nbrs.size()))) {
        auto [src, fresh] = add(nbrs[pick].node);
        if (fresh) next.push_back(src);
        sg.in_edges[dst].push_back({src, nbrs[pick].weight});
      }
    }
    frontier = std::move(next);
  }
  return sg;
}

/// Every listed node with its complete neighborhood (neighbors outside `nodes`
/// are dropped). With all vocabulary nodes this is the exact full-graph pass.
inline SampledSubgraph full_subgraph(const Adjacency& adj, std::span<const std::uint32_t> nodes) {
  SampledSubgraph sg;
  sg.nodes.assign(nodes.begin(), nodes.end());
  sg.n_targets = sg.nodes.size();
  std::unordered_map<std::uint32_t, std::uint32_t> local;
  for (std::uint32_t i = 0; i < sg.nodes.size(); ++i) local[sg.nodes[i]] = i;
  sg.in_edges.resize(sg.nodes.size());
  for (std::uint32_t i = 0; i < sg.nodes.size(); ++i) {
    for (const auto& n : adj.neighbors[sg.nodes[i]]) {
      if (auto it = local.find(n.node); it != local.end()) sg.in_edges[i].push_back({it->second, n.weight});
    }
  }
  return sg;
}

inline SampledSubgraph full_graph(const Adjacency& adj) {
  std::vector<std::uint32_t> all(adj.size());
  for (std::uint32_t v = 0; v < all.size(); ++v) all[v] = v;
  return full_subgraph(adj, all);
}

// ---- forward ----------------------------------------------------------------

struct LayerCache {
  Matrix input;                    // n x d_in
  std::vector<Matrix> P, A, B;     // per head, n x d_head
  std::vector<Matrix> U;           // per head, total_candidates x d_head (score pre-activations)
  std::vector<std::vector<double>> alpha;  // per head, total_candidates
  Matrix Z;                        // n x d_out pre-activation
  Matrix mask;                     // dropout mask on the output (empty if none)
};

struct ForwardCache {
  Matrix X;      // n x d_codebook
  Matrix mask0;  // dropout mask on H0 (empty if none)
  std::vector<std::vector<InEdge>> candidates;  // per node: self first, then kept in-edges
  std::vector<std::size_t> offset;              // start of each node's candidates
  std::vector<LayerCache> layers;
  Matrix output;  // n x d_out
  std::size_t n_targets = 0;

  Matrix target_embeddings() const { return output.topRows(static_cast<Eigen::Index>(n_targets)); }
};

struct DropoutSpec {
  double feature = 0.0;
  double edge = 0.0;
  Rng* rng = nullptr;  // null disables dropout
};

namespace detail {

inline double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double leaky_grad(double x, double slope) { return x > 0.0 ? 1.0 : slope; }
inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.bernoulli(p) ? 0.0 : keep;
  return m;
}

}  // namespace detail

/// Runs all layers over the subgraph. H0 = Z[nodes] * W_proj; each layer is
/// softmax-weighted aggregation over {self} + in-edges (self weight 1), ELU on
/// hidden layers and identity on the last. Dropout applies only when
/// `drop.rng` is set.
inline ForwardCache forward(const GnnParams& params, const SampledSubgraph& sg, const Matrix& codebook,
                            const GnnConfig& config, const DropoutSpec& drop = {}) {
  const auto n = static_cast<Eigen::Index>(sg.size());
  ForwardCache cache;
  cache.n_targets = sg.n_targets;
  cache.X.resize(n, codebook.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto v = sg.nodes[static_cast<std::size_t>(r)];
    if (v >= codebook.rows()) throw Error(ErrorKind::OutOfRangeToken, "node " + std::to_string(v));
    cache.X.row(r) = codebook.row(v);
  }
  Matrix H = cache.X * params.proj;
  if (drop.rng && drop.feature > 0.0) {
    cache.mask0 = detail::dropout_mask(H.rows(), H.cols(), drop.feature, *drop.rng);
    H = H.cwiseProduct(cache.mask0);
  }

  cache.candidates.resize(sg.size());
  cache.offset.resize(sg.size() + 1, 0);
  for (std::size_t i = 0; i < sg.size(); ++i) {
    auto& c = cache.candidates[i];
    c.push_back({static_cast<std::uint32_t>(i), 1.0});
    for (const auto& e : sg.in_edges[i]) {
      if (drop.rng && drop.edge > 0.0 && drop.rng->bernoulli(drop.edge)) continue;
      c.push_back(e);
    }
    cache.offset[i + 1] = cache.offset[i] + c.size();
  }
  const std::size_t total = cache.offset.back();
  const double slope = config.leaky_slope;

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    const bool last = l + 1 == params.layers.size();
    LayerCache lc;
    lc.input = H;
    const auto dk = layer.heads.front().W.cols();
    lc.Z.setZero(n, dk * static_cast<Eigen::Index>(layer.heads.size()));
    for (std::size_t k = 0; k < layer.heads.size(); ++k) {
      const auto& hp = layer.heads[k];
      Matrix P = H * hp.W, A = H * hp.W1, B = H * hp.W2;
      Matrix U(static_cast<Eigen::Index>(total), dk);
      std::vector<double> alpha(total);
      for (std::size_t i = 0; i < sg.size(); ++i) {
        const auto& cand = cache.candidates[i];
        double max_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cand.size(); ++c) {
          const auto row = static_cast<Eigen::Index>(cache.offset[i] + c);
          U.row(row) = A.row(static_cast<Eigen::Index>(i)) + B.row(cand[c].src) + cand[c].weight * hp.W3;
          double score = 0.0;
          for (Eigen::Index d = 0; d < dk; ++d) score += hp.a(0, d) * detail::leaky(U(row, d), slope);
          alpha[cache.offset[i] + c] = score;
          max_score = std::max(max_score, score);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < cand.size(); ++c) {
          double& s = alpha[cache.offset[i] + c];
          s = std::exp(s - max_score);
          denom += s;
        }
        auto zrow = lc.Z.block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k) * dk, 1, dk);
        for (std::size_t c = 0; c < cand.size(); ++c) {
          double& s = alpha[cache.offset[i] + c];
          s /= denom;
          zrow += s * P.row(cand[c].src);
        }
      }
      lc.P.push_back(std::move(P));
      lc.A.push_back(std::move(A));
      lc.B.push_back(std::move(B));
      lc.U.push_back(std::move(U));
      lc.alpha.push_back(std::move(alpha));
    }
    if (last) {
      H = lc.Z;
    } else {
      H = lc.Z.unaryExpr([](double x) { return detail::elu(x); });
      if (drop.rng && drop.feature > 0.0) {
        lc.mask = detail::dropout_mask(H.rows(), H.cols(), drop.feature, *drop.rng);
        H = H.cwiseProduct(lc.mask);
      }
    }
    cache.layers.push_back(std::move(lc));
  }
  if (!H.allFinite()) throw Error(ErrorKind::NonFiniteActivation, "GNN output contains NaN or Inf");
  cache.output = std::move(H);
  return cache;
}

// ---- backward ---------------------------------------------------------------

/// Reverse-mode gradients of a scalar loss given dL/d(target embeddings).
inline GnnParams backward(const GnnParams& params, const ForwardCache& cache, const Matrix& grad_targets,
                          const GnnConfig& config) {
  GnnParams grads = params.zeros_like();
  const auto n = cache.output.rows();
  Matrix G = Matrix::Zero(n, cache.output.cols());
  G.topRows(grad_targets.rows()) = grad_targets;
  const double slope = config.leaky_slope;

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& lc = cache.layers[li];
    const auto& layer = params.layers[li];
    auto& glayer = grads.layers[li];
    if (li + 1 != params.layers.size()) {
      if (lc.mask.size() > 0) G = G.cwiseProduct(lc.mask);
      G = G.cwiseProduct(lc.Z.unaryExpr([](double x) { return detail::elu_grad(x); }));
    }
    Matrix dH = Matrix::Zero(n, lc.input.cols());
    const auto dk = layer.heads.front().W.cols();
    for (std::size_t k = 0; k < layer.heads.size(); ++k) {
      const auto& hp = layer.heads[k];
      auto& gh = glayer.heads[k];
      const Matrix& P = lc.P[k];
      const Matrix& U = lc.U[k];
      const auto& alpha = lc.alpha[k];
      Matrix dP = Matrix::Zero(n, dk), dA = Matrix::Zero(n, dk), dB = Matrix::Zero(n, dk);
      std::vector<double> dalpha;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& cand = cache.candidates[static_cast<std::size_t>(i)];
        const std::size_t base = cache.offset[static_cast<std::size_t>(i)];
        const RowVector g = G.block(i, static_cast<Eigen::Index>(k) * dk, 1, dk);
        dalpha.assign(cand.size(), 0.0);
        double weighted = 0.0;
        for (std::size_t c = 0; c < cand.size(); ++c) {
          dalpha[c] = g.dot(P.row(cand[c].src));
          weighted += alpha[base + c] * dalpha[c];
          dP.row(cand[c].src) += alpha[base + c] * g;
        }
        for (std::size_t c = 0; c < cand.size(); ++c) {
          const double de = alpha[base + c] * (dalpha[c] - weighted);
          const auto row = static_cast<Eigen::Index>(base + c);
          RowVector du(dk);
          for (Eigen::Index d = 0; d < dk; ++d) {
            const double u = U(row, d);
            gh.a(0, d) += de * detail::leaky(u, slope);
            du(d) = de * hp.a(0, d) * detail::leaky_grad(u, slope);
          }
          dA.row(i) += du;
          dB.row(cand[c].src) += du;
          gh.W3 += cand[c].weight * du;
        }
      }
      gh.W += lc.input.transpose() * dP;
      gh.W1 += lc.input.transpose() * dA;
      gh.W2 += lc.input.transpose() * dB;
      dH += dP * hp.W.transpose() + dA * hp.W1.transpose() + dB * hp.W2.transpose();
    }
    G = std::move(dH);
  }
  if (cache.mask0.size() > 0) G = G.cwiseProduct(cache.mask0);
  grads.proj = cache.X.transpose() * G;
  for (const Matrix* m : grads.tensors()) {
    if (!m->allFinite()) throw Error(ErrorKind::NonFiniteGradient, "gradient contains NaN or Inf");
  }
  return grads;
}

// ---- losses -----------------------------------------------------------------

/// A positive pair between two rows of the batch embedding matrix.
struct LossEdge {
  std::uint32_t a;
  std::uint32_t b;
  double weight;
};

struct LossResult {
  double contrast = 0.0;
  double pps = 0.0;
  double total = 0.0;
  bool has_positive = false;
  double mean_pos_sim = 0.0;
  double mean_neg_sim = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  Matrix grad;  // dL/d(embeddings)
};

namespace detail {

struct Normalized {
  Matrix Y;
  Vector norms;
};

inline Normalized normalize_rows(const Matrix& H) {
  Normalized out{H, Vector(H.rows())};
  for (Eigen::Index i = 0; i < H.rows(); ++i) {
    out.norms(i) = std::max(H.row(i).norm(), 1e-12);
    out.Y.row(i) /= out.norms(i);
  }
  return out;
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline void check_edges(std::span<const LossEdge> edges, Eigen::Index n) {
  for (const auto& e : edges) {
    if (e.a == e.b || e.a >= n || e.b >= n) throw Error(ErrorKind::DimensionMismatch, "loss edge outside the batch");
  }
}

}  // namespace detail

inline double cosine_similarity(const RowVector& x, const RowVector& y) {
  return x.dot(y) / (std::max(x.norm(), 1e-12) * std::max(y.norm(), 1e-12));
}

/// -log( sum_edges s * exp(sim/tau) / sum_{m != u} exp(sim/tau) ) over the batch.
inline double contrastive_loss(const Matrix& embeddings, std::span<const LossEdge> edges, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorKind::InvalidConfig, "tau must be positive");
  detail::check_edges(edges, embeddings.rows());
  if (edges.empty()) throw Error(ErrorKind::NoPositivePairs, "batch has no positive pairs");
  const auto nz = detail::normalize_rows(embeddings);
  const Matrix S = nz.Y * nz.Y.transpose();
  std::vector<double> den;
  for (Eigen::Index m = 0; m < S.rows(); ++m)
    for (Eigen::Index u = 0; u < S.cols(); ++u)
      if (m != u) den.push_back(S(m, u) / tau);
  std::vector<double> num;
  for (const auto& e : edges) num.push_back(std::log(e.weight) + S(e.a, e.b) / tau);
  return detail::log_sum_exp(den) - detail::log_sum_exp(num);
}

/// sum_edges s * max(0, beta*s - sim), divided by the number of violating edges.
inline double pps_loss(const Matrix& embeddings, std::span<const LossEdge> edges, double beta) {
  detail::check_edges(edges, embeddings.rows());
  double sum = 0.0;
  std::size_t violating = 0;
  for (const auto& e : edges) {
    const double sim = cosine_similarity(embeddings.row(e.a), embeddings.row(e.b));
    if (beta * e.weight > sim) {
      sum += e.weight * (beta * e.weight - sim);
      ++violating;
    }
  }
  return violating ? sum / static_cast<double>(violating) : 0.0;
}

/// L = L_contrast + L_pps with its gradient. An edgeless batch yields a zero
/// loss, zero gradient, and has_positive = false.
inline LossResult composite_loss(const Matrix& embeddings, std::span<const LossEdge> edges, double tau,
                                 double beta) {
  if (!(tau > 0.0)) throw Error(ErrorKind::InvalidConfig, "tau must be positive");
  detail::check_edges(edges, embeddings.rows());
  LossResult r;
  const auto nb = embeddings.rows();
  r.grad = Matrix::Zero(nb, embeddings.cols());
  if (edges.empty() || nb < 2) return r;
  r.has_positive = true;

  const auto nz = detail::normalize_rows(embeddings);
  const Matrix S = nz.Y * nz.Y.transpose();

  // Denominator: all ordered pairs m != u.
  double max_logit = -std::numeric_limits<double>::infinity();
  double sum_offdiag = 0.0;
  for (Eigen::Index m = 0; m < nb; ++m)
    for (Eigen::Index u = 0; u < nb; ++u)
      if (m != u) {
        max_logit = std::max(max_logit, S(m, u) / tau);
        sum_offdiag += S(m, u);
      }
  Matrix dS = Matrix::Zero(nb, nb);
  double den = 0.0;
  for (Eigen::Index m = 0; m < nb; ++m)
    for (Eigen::Index u = 0; u < nb; ++u)
      if (m != u) {
        dS(m, u) = std::exp(S(m, u) / tau - max_logit);
        den += dS(m, u);
      }
  const double lse_den = max_logit + std::log(den);
  dS /= den * tau;

  std::vector<double> num(edges.size());
  double sum_pos = 0.0;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    num[e] = std::log(edges[e].weight) + S(edges[e].a, edges[e].b) / tau;
    sum_pos += S(edges[e].a, edges[e].b);
  }
  const double lse_num = detail::log_sum_exp(num);
  r.contrast = lse_den - lse_num;
  for (std::size_t e = 0; e < edges.size(); ++e) dS(edges[e].a, edges[e].b) -= std::exp(num[e] - lse_num) / tau;

  std::size_t violating = 0;
  double hinge = 0.0;
  for (const auto& e : edges) {
    const double sim = S(e.a, e.b);
    if (beta * e.weight > sim) {
      hinge += e.weight * (beta * e.weight - sim);
      ++violating;
    }
  }
  if (violating) {
    r.pps = hinge / static_cast<double>(violating);
    for (const auto& e : edges) {
      if (beta * e.weight > S(e.a, e.b)) dS(e.a, e.b) -= e.weight / static_cast<double>(violating);
    }
  }
  r.total = r.contrast + r.pps;

  r.n_pos = edges.size();
  r.mean_pos_sim = sum_pos / static_cast<double>(r.n_pos);
  const auto n_ordered = static_cast<std::size_t>(nb * (nb - 1));
  r.n_neg = n_ordered - 2 * r.n_pos;
  r.mean_neg_sim = r.n_neg ? (sum_offdiag - 2.0 * sum_pos) / static_cast<double>(r.n_neg) : 0.0;

  const Matrix dY = (dS + dS.transpose()) * nz.Y;
  for (Eigen::Index i = 0; i < nb; ++i) {
    const RowVector y = nz.Y.row(i);
    r.grad.row(i) = (dY.row(i) - dY.row(i).dot(y) * y) / nz.norms(i);
  }
  return r;
}

/// Edges of the graph with both endpoints among the first `n_targets` nodes.
inline std::vector<LossEdge> batch_edges(const Adjacency& adj, const SampledSubgraph& sg) {
  std::unordered_map<std::uint32_t, std::uint32_t> local;
  for (std::uint32_t i = 0; i < sg.n_targets; ++i) local[sg.nodes[i]] = i;
  std::vector<LossEdge> out;
  for (std::uint32_t i = 0; i < sg.n_targets; ++i) {
    for (const auto& nb : adj.neighbors[sg.nodes[i]]) {
      if (nb.node <= sg.nodes[i]) continue;
      if (auto it = local.find(nb.node); it != local.end()) out.push_back({i, it->second, nb.weight});
    }
  }
  return out;
}

struct LossAndGradients {
  LossResult loss;
  GnnParams grads;
  ForwardCache cache;
};

/// Dropout-free loss and exact gradients of L_contrast + L_pps.
inline LossAndGradients loss_and_gradients(const GnnParams& params, const SampledSubgraph& sg,
                                           const Matrix& codebook, std::span<const LossEdge> edges,
                                           const GnnConfig& config, double tau) {
  LossAndGradients out;
  out.cache = forward(params, sg, codebook, config);
  out.loss = composite_loss(out.cache.target_embeddings(), edges, tau, config.beta);
  out.grads = backward(params, out.cache, out.loss.grad, config);
  return out;
}

/// Smallest distance of any piecewise-linear / hinge argument from its kink:
/// LeakyReLU score inputs, hidden ELU inputs and the pps hinge margins.
inline double min_kink_distance(const ForwardCache& cache, std::span<const LossEdge> edges, double beta) {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    for (const auto& U : cache.layers[l].U) d = std::min(d, U.cwiseAbs().minCoeff());
    if (l + 1 < cache.layers.size()) d = std::min(d, cache.layers[l].Z.cwiseAbs().minCoeff());
  }
  const Matrix emb = cache.target_embeddings();
  for (const auto& e : edges) {
    d = std::min(d, std::abs(beta * e.weight - cosine_similarity(emb.row(e.a), emb.row(e.b))));
  }
  return d;
}

// ---- optimization -----------------------------------------------------------

struct TrainState {
  std::uint64_t step = 0;
  GnnParams m;
  GnnParams v;
  double tau = 0.02;
  double best_loss = std::numeric_limits<double>::infinity();
  std::uint32_t epochs_since_best = 0;
};

inline TrainState init_train_state(const GnnParams& params, const GnnConfig& config) {
  return TrainState{0, params.zeros_like(), params.zeros_like(), config.tau0,
                    std::numeric_limits<double>::infinity(), 0};
}

/// Linear warmup from 0 over warmup_fraction of the steps, then cosine decay to 0.
inline double learning_rate(std::uint64_t step, std::uint64_t total_steps, const GnnConfig& c) {
  if (total_steps == 0) return c.lr;
  const double warm = c.warmup_fraction * static_cast<double>(total_steps);
  const auto s = static_cast<double>(step);
  if (s < warm) return c.lr * s / warm;
  const double span = static_cast<double>(total_steps) - warm;
  if (span <= 0.0) return c.lr;
  const double progress = std::min(1.0, (s - warm) / span);
  return 0.5 * c.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_norm(const GnnParams& g) {
  double sq = 0.0;
  for (const Matrix* m : g.tensors()) sq += m->squaredNorm();
  return std::sqrt(sq);
}

/// Scales grads in place so their global norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_gradients(GnnParams& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Matrix* m : grads.tensors()) *m *= scale;
  }
  return norm;
}

/// Clip, then one AdamW update with decoupled weight decay.
inline void optimizer_step(TrainState& state, GnnParams& params, GnnParams grads, std::uint64_t total_steps,
                           const GnnConfig& c) {
  clip_gradients(grads, c.max_grad_norm);
  const double lr = learning_rate(state.step, total_steps, c);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(c.adam_beta2, t);
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    *m[i] = c.adam_beta1 * *m[i] + (1.0 - c.adam_beta1) * *g[i];
    *v[i] = c.adam_beta2 * *v[i] + (1.0 - c.adam_beta2) * g[i]->cwiseAbs2();
    *p[i] *= (1.0 - lr * c.weight_decay);
    *p[i] -= lr * ((*m[i] / bc1).array() / ((*v[i] / bc2).array().sqrt() + c.adam_eps)).matrix();
  }
}

/// Per-epoch temperature rule driven by the positive/negative similarity gap.
inline double adjust_temperature(double tau, double mean_pos_sim, double mean_neg_sim, const GnnConfig& c) {
  if (!(tau > 0.0)) throw Error(ErrorKind::InvalidConfig, "tau must be positive");
  const double gap = mean_pos_sim - mean_neg_sim;
  if (gap < 0.3) return std::max(c.tau_min, tau * 0.95);
  if (gap > 0.5) return std::min(c.tau_max, tau * 1.1);
  return tau;
}

// ---- training ---------------------------------------------------------------

struct NodeEmbeddings {
  Matrix values;  // |V| x d_out
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint32_t epochs_run = 0;
};

struct TrainResult {
  NodeEmbeddings embeddings;
  GnnParams params;
  std::vector<double> epoch_losses;
  std::vector<double> taus;  // temperature in effect during each epoch
  std::uint32_t epochs_run = 0;
};

/// Called after every epoch with (epoch, mean loss, temperature used).
using EpochCallback = std::function<void(std::uint32_t, double, double)>;

/// Minibatch training with sampled neighborhoods; final embeddings come from a
/// dropout-free pass over the full graph. Deterministic in (graph, codebook, config).
inline TrainResult train(const CooccurrenceGraph& graph, const Codebook& codebook, const GnnConfig& config,
                         const EpochCallback& on_epoch = {}) {
  validate_config(config);
  if (graph.edges.empty()) throw Error(ErrorKind::EdgelessGraph, "graph has no edges");
  if (codebook.size() != graph.vocab_size) {
    throw Error(ErrorKind::DimensionMismatch, "codebook has " + std::to_string(codebook.size()) +
                                                  " rows but graph |V| = " + std::to_string(graph.vocab_size));
  }
  if (codebook.dim() != config.d_codebook) {
    throw Error(ErrorKind::DimensionMismatch, "codebook dim " + std::to_string(codebook.dim()) +
                                                  " != d_codebook " + std::to_string(config.d_codebook));
  }
  const Adjacency adj = make_adjacency(graph);
  const std::uint32_t V = graph.vocab_size;

  TrainResult out;
  out.params = init_params(config, config.seed);
  TrainState state = init_train_state(out.params, config);
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng sample_rng(derive_seed(config.seed, "sample"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  const DropoutSpec drop{config.dropout, config.edge_dropout, &dropout_rng};

  const std::uint64_t batches_per_epoch = (V + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = batches_per_epoch * config.epochs;
  std::vector<std::uint32_t> order(V);
  for (std::uint32_t v = 0; v < V; ++v) order[v] = v;

  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, pos_sum = 0.0, neg_sum = 0.0;
    std::size_t n_batches = 0, n_pos = 0, n_neg = 0;
    for (std::uint64_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min<std::size_t>(V, lo + config.batch_size);
      std::span<const std::uint32_t> batch(order.data() + lo, hi - lo);
      const SampledSubgraph sg = sample_neighborhood(adj, batch, config.neighbor_sizes, sample_rng);
      const auto edges = batch_edges(adj, sg);
      if (edges.empty()) continue;
      const ForwardCache cache = forward(out.params, sg, codebook.embeddings, config, drop);
      const LossResult loss = composite_loss(cache.target_embeddings(), edges, state.tau, config.beta);
      if (!std::isfinite(loss.total)) throw Error(ErrorKind::DivergedTraining, "loss is not finite");
      GnnParams grads = backward(out.params, cache, loss.grad, config);
      optimizer_step(state, out.params, std::move(grads), total_steps, config);
      loss_sum += loss.total;
      pos_sum += loss.mean_pos_sim * static_cast<double>(loss.n_pos);
      neg_sum += loss.mean_neg_sim * static_cast<double>(loss.n_neg);
      n_pos += loss.n_pos;
      n_neg += loss.n_neg;
      ++n_batches;
    }
    out.taus.push_back(state.tau);
    ++out.epochs_run;
    if (n_batches == 0) continue;
    const double epoch_loss = loss_sum / static_cast<double>(n_batches);
    out.epoch_losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss, state.tau);
    state.tau = adjust_temperature(state.tau, n_pos ? pos_sum / static_cast<double>(n_pos) : 0.0,
                                   n_neg ? neg_sum / static_cast<double>(n_neg) : 0.0, config);
    if (state.best_loss - epoch_loss >= config.min_improvement) {
      state.best_loss = epoch_loss;
      state.epochs_since_best = 0;
    } else if (++state.epochs_since_best >= config.patience) {
      break;
    }
  }

  const ForwardCache final_pass = forward(out.params, full_graph(adj), codebook.embeddings, config);
  out.embeddings.values = final_pass.output;
  out.embeddings.config_hash = config_hash(config);
  out.embeddings.seed = config.seed;
  out.embeddings.epochs_run = out.epochs_run;
  return out;
}

// ---- CGCE -------------------------------------------------------------------

inline constexpr std::string_view kEmbeddingMagic = "CGCE";

/// magic, u32 rows, u32 cols, f32 payload, u32 trailer length, JSON trailer.
inline std::string encode_cgce(const Matrix& m, const nlohmann::ordered_json& meta) {
  io::ByteWriter w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  io::write_f32_payload(w, m);
  const std::string trailer = meta.dump();
  w.u32(static_cast<std::uint32_t>(trailer.size()));
  w.bytes(trailer);
  return w.take();
}

struct CgceFile {
  Matrix values;
  nlohmann::json meta;
};

inline CgceFile decode_cgce(std::string_view bytes) {
  io::ByteReader r(bytes, "embeddings");
  r.expect_magic(kEmbeddingMagic);
  const auto rows = r.u32();
  const auto cols = r.u32();
  CgceFile f;
  f.values = io::read_f32_payload(r, rows, cols);
  const auto len = r.u32();
  const auto trailer = r.bytes(len);
  try {
    f.meta = nlohmann::json::parse(trailer);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("embedding metadata: ") + e.what());
  }
  return f;
}

inline nlohmann::ordered_json embedding_metadata(const NodeEmbeddings& e) {
  nlohmann::ordered_json meta;
  meta["config_hash"] = e.config_hash;
  meta["seed"] = e.seed;
  meta["epochs_run"] = e.epochs_run;
  return meta;
}

inline void save_embeddings(const std::filesystem::path& path, const NodeEmbeddings& e) {
  io::write_file(path, encode_cgce(e.values, embedding_metadata(e)));
}

inline NodeEmbeddings load_embeddings(const std::filesystem::path& path) {
  CgceFile f = decode_cgce(io::read_file(path));
  NodeEmbeddings e;
  e.values = std::move(f.values);
  e.config_hash = f.meta.value("config_hash", std::string{});
  e.seed = f.meta.value("seed", std::uint64_t{0});
  e.epochs_run = f.meta.value("epochs_run", std::uint32_t{0});
  return e;
}

}  // namespace vptd
