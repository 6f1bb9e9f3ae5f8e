#pragma once

// Visual token decontamination: find the absent members of an image's dominant
// clusters and project their latent vectors out of the image-token states.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptd/analysis.hpp"
#include "vptd/binary_io.hpp"
#include "vptd/cluster.hpp"
#include "vptd/corpus.hpp"
#include "vptd/error.hpp"
#include "vptd/gnn.hpp"
#include "vptd/matrix.hpp"

namespace vptd {

struct EditPlan {
  std::string model_tag;
  std::uint32_t layer = 0;
  double gamma = 0.0;
  std::uint32_t n_dominant = 1;
  std::vector<ClusterId> dominant_cluster_ids;
  std::vector<TokenId> hallucinative_token_ids;  // ascending
  std::vector<TokenId> present_token_ids;        // ascending

  bool operator==(const EditPlan&) const = default;
};

inline EditPlan plan_edit(const TokenGrid& grid, const Clustering& clustering, std::uint32_t n_dominant,
                          std::uint32_t layer, double gamma, std::string model_tag = "") {
  if (!(gamma >= 0.0)) throw Error(ErrorKind::InvalidConfig, "gamma must be >= 0");
  if (n_dominant < 1) throw Error(ErrorKind::InvalidConfig, "n_dominant must be >= 1");
  EditPlan plan;
  plan.model_tag = std::move(model_tag);
  plan.layer = layer;
  plan.gamma = gamma;
  plan.n_dominant = n_dominant;
  plan.dominant_cluster_ids = dominant_clusters(grid, clustering, n_dominant);
  const auto present = present_tokens(grid);
  std::set<TokenId> hallucinative;
  for (ClusterId c : plan.dominant_cluster_ids)
    for (TokenId t : clustering.members.at(c))
      if (!present.contains(t)) hallucinative.insert(t);
  plan.hallucinative_token_ids.assign(hallucinative.begin(), hallucinative.end());
  plan.present_token_ids.assign(present.begin(), present.end());
  return plan;
}

inline nlohmann::ordered_json plan_to_json(const EditPlan& p) {
  nlohmann::ordered_json j;
  j["model_tag"] = p.model_tag;
  j["layer"] = p.layer;
  j["gamma"] = p.gamma;
  j["n_dominant"] = p.n_dominant;
  j["dominant_cluster_ids"] = p.dominant_cluster_ids;
  j["hallucinative_token_ids"] = p.hallucinative_token_ids;
  j["present_token_ids"] = p.present_token_ids;
  return j;
}

inline EditPlan plan_from_json(const nlohmann::json& j) {
  EditPlan p;
  try {
    p.model_tag = j.at("model_tag").get<std::string>();
    p.layer = j.at("layer").get<std::uint32_t>();
    p.gamma = j.at("gamma").get<double>();
    p.n_dominant = j.at("n_dominant").get<std::uint32_t>();
    p.dominant_cluster_ids = j.at("dominant_cluster_ids").get<std::vector<ClusterId>>();
    p.hallucinative_token_ids = j.at("hallucinative_token_ids").get<std::vector<TokenId>>();
    p.present_token_ids = j.at("present_token_ids").get<std::vector<TokenId>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("edit plan: ") + e.what());
  }
  if (!(p.gamma >= 0.0)) throw Error(ErrorKind::MalformedRecord, "edit plan: gamma must be >= 0");
  std::vector<TokenId> overlap;
  auto hal = p.hallucinative_token_ids, pres = p.present_token_ids;
  std::sort(hal.begin(), hal.end());
  std::sort(pres.begin(), pres.end());
  std::set_intersection(hal.begin(), hal.end(), pres.begin(), pres.end(), std::back_inserter(overlap));
  if (!overlap.empty()) {
    throw Error(ErrorKind::MalformedRecord,
                "edit plan: token " + std::to_string(overlap.front()) + " is both hallucinative and present");
  }
  p.hallucinative_token_ids = std::move(hal);
  p.present_token_ids = std::move(pres);
  return p;
}

inline EditPlan load_plan(const std::filesystem::path& path) {
  try {
    return plan_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("edit plan: ") + e.what());
  }
}

/// For each hallucinative vector a, in order, every row g becomes
///   g - gamma * (ĝ · â / ||â||²) * a,
/// reading the matrix as left by the previous vector. Zero rows or vectors
/// give a zero coefficient.
inline void decontaminate_in_place(Matrix& H, std::span<const RowVector> hal_vectors, double gamma) {
  for (const auto& a : hal_vectors) {
    if (a.size() != H.cols()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "hal vector dim " + std::to_string(a.size()) + " != hidden dim " + std::to_string(H.cols()));
    }
  }
  for (const auto& a : hal_vectors) {
    const double a_norm = a.norm();
    if (a_norm == 0.0) continue;
    const RowVector a_hat = a / a_norm;
    const double denom = a_hat.squaredNorm();
    for (Eigen::Index r = 0; r < H.rows(); ++r) {
      const double g_norm = H.row(r).norm();
      if (g_norm == 0.0) continue;
      const double coef = (H.row(r) / g_norm).dot(a_hat) / denom;
      H.row(r) -= gamma * coef * a;
    }
  }
}

inline Matrix decontaminate(Matrix H, std::span<const RowVector> hal_vectors, double gamma) {
  decontaminate_in_place(H, hal_vectors, gamma);
  return H;
}

// ---- files ------------------------------------------------------------------

inline constexpr std::string_view kHiddenMagic = "CGCH";

inline Matrix load_hidden(const std::filesystem::path& path) {
  return io::decode_plain_matrix(kHiddenMagic, io::read_file(path), "hidden states");
}

inline void save_hidden(const std::filesystem::path& path, const Matrix& H) {
  io::write_file(path, io::encode_plain_matrix(kHiddenMagic, H));
}

/// Embedding table: a CGCB matrix or a CGCE embedding file.
inline Matrix load_embedding_table(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.starts_with(kEmbeddingMagic)) return decode_cgce(bytes).values;
  return io::decode_plain_matrix(kCodebookMagic, bytes, "embedding table");
}

struct EditSummary {
  std::size_t n_edits = 0;
  double max_row_delta_norm = 0.0;
};

inline std::vector<RowVector> gather_hal_vectors(const Matrix& table, const EditPlan& plan) {
  std::vector<RowVector> out;
  for (TokenId t : plan.hallucinative_token_ids) {
    if (t >= table.rows()) {
      throw Error(ErrorKind::MissingToken,
                  "token " + std::to_string(t) + " >= table rows " + std::to_string(table.rows()));
    }
    out.emplace_back(table.row(t));
  }
  return out;
}

inline EditSummary apply_edit(const Matrix& hidden, const Matrix& table, const EditPlan& plan, Matrix& edited) {
  if (table.cols() != hidden.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "table dim " + std::to_string(table.cols()) + " != hidden dim " +
                                                  std::to_string(hidden.cols()));
  }
  auto hal = gather_hal_vectors(table, plan);
  edited = decontaminate(hidden, hal, plan.gamma);
  EditSummary s;
  s.n_edits = hal.size();
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    s.max_row_delta_norm = std::max(s.max_row_delta_norm, (edited.row(r) - hidden.row(r)).norm());
  }
  return s;
}

inline EditSummary apply_edit(const std::filesystem::path& hidden_path, const std::filesystem::path& table_path,
                              const EditPlan& plan, const std::filesystem::path& out_path) {
  const Matrix hidden = load_hidden(hidden_path);
  const Matrix table = load_embedding_table(table_path);
  Matrix edited;
  const auto summary = apply_edit(hidden, table, plan, edited);
  save_hidden(out_path, edited);
  return summary;
}

}  // namespace vptd
