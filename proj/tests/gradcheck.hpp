#pragma once

// Central finite-difference gradient check for the GNN objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "vptd/gnn.hpp"

namespace gradcheck {

struct Instance {
  vptd::GnnConfig config;
  vptd::GnnParams params;
  vptd::CooccurrenceGraph graph;
  vptd::Matrix codebook;
  vptd::SampledSubgraph subgraph;
  std::vector<vptd::LossEdge> edges;
  double tau = 0.1;
};

/// Random weighted graph on n nodes with edge probability p.
inline vptd::CooccurrenceGraph random_graph(std::uint32_t n, double p, vptd::Rng& rng) {
  vptd::CooccurrenceGraph g;
  g.vocab_size = n;
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = i + 1; j < n; ++j)
      if (rng.bernoulli(p)) g.edges.push_back({i, j, static_cast<float>(rng.uniform(0.2, 1.0))});
  return g;
}

/// A 30-node, 2-layer, 2-head instance.
inline Instance make_instance(std::uint64_t seed, std::uint32_t n = 30) {
  Instance in;
  in.config.d_codebook = 4;
  in.config.d_hidden = 4;
  in.config.d_out = 4;
  in.config.n_layers = 2;
  in.config.n_heads = 2;
  in.config.neighbor_sizes = {48, 16};
  vptd::Rng rng(seed);
  in.graph = random_graph(n, 0.15, rng);
  in.codebook.resize(n, in.config.d_codebook);
  for (Eigen::Index i = 0; i < in.codebook.rows(); ++i)
    for (Eigen::Index j = 0; j < in.codebook.cols(); ++j) in.codebook(i, j) = rng.normal();
  in.params = vptd::init_params(in.config, seed);
  const auto adj = vptd::make_adjacency(in.graph);
  in.subgraph = vptd::full_graph(adj);
  in.edges = vptd::batch_edges(adj, in.subgraph);
  return in;
}

inline double objective(const Instance& in, const vptd::GnnParams& params) {
  const auto cache = vptd::forward(params, in.subgraph, in.codebook, in.config);
  return vptd::composite_loss(cache.target_embeddings(), in.edges, in.tau, in.config.beta).total;
}

struct Report {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline Report check(const Instance& in, double step = 1e-5, double floor = 1e-4) {
  const auto analytic = vptd::loss_and_gradients(in.params, in.subgraph, in.codebook, in.edges, in.config, in.tau);
  vptd::GnnParams probe = in.params;
  auto p = probe.tensors();
  auto g = analytic.grads.tensors();
  Report r;
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (Eigen::Index k = 0; k < p[t]->size(); ++k) {
      double& x = p[t]->data()[k];
      const double orig = x;
      x = orig + step;
      const double up = objective(in, probe);
      x = orig - step;
      const double down = objective(in, probe);
      x = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g[t]->data()[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      r.max_rel_error = std::max(r.max_rel_error, rel);
      ++r.coordinates;
    }
  }
  return r;
}

/// First seed at or after `start` whose instance keeps every kink argument at
/// least `margin` away from its kink.
inline Instance kink_safe_instance(std::uint64_t start, double margin = 1e-3) {
  for (std::uint64_t seed = start; seed < start + 1000; ++seed) {
    Instance in = make_instance(seed);
    if (in.edges.empty()) continue;
    const auto cache = vptd::forward(in.params, in.subgraph, in.codebook, in.config);
    if (vptd::min_kink_distance(cache, in.edges, in.config.beta) >= margin) return in;
  }
  throw std::runtime_error("no kink-safe instance found");
}

}  // namespace gradcheck
