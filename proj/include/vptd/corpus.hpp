#pragma once

// Tokenized images with panoptic segment annotations, the codebook they index,
// and a seeded generator of corpora with planted co-occurrence groups.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptd/binary_io.hpp"
#include "vptd/error.hpp"
#include "vptd/matrix.hpp"
#include "vptd/rng.hpp"

namespace vptd {

using TokenId = std::uint32_t;
using SegmentId = std::int32_t;
inline constexpr SegmentId kUnlabeled = -1;

struct TokenGrid {
  std::string image_id;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<TokenId> tokens;      // row-major, height * width
  std::vector<SegmentId> segments;  // row-major, -1 = unlabeled
  std::map<SegmentId, std::string> segment_labels;

  std::size_t size() const { return static_cast<std::size_t>(height) * width; }

  bool operator==(const TokenGrid&) const = default;
};

struct Codebook {
  Matrix embeddings;  // |V| x d_codebook

  std::uint32_t size() const { return static_cast<std::uint32_t>(embeddings.rows()); }
  std::uint32_t dim() const { return static_cast<std::uint32_t>(embeddings.cols()); }
};

struct Corpus {
  std::vector<TokenGrid> records;
  std::uint32_t codebook_size = 0;

  bool operator==(const Corpus&) const = default;
};

/// Ground truth of a synthetic corpus.
struct PlantedTruth {
  std::vector<std::uint32_t> group_of;                         // token -> group
  std::map<std::uint32_t, std::string> object_of_group;        // group -> primary label
  std::map<std::uint32_t, std::vector<std::string>> labels_of_group;  // group -> all labels
  std::uint32_t background_group = 0;
};

/// Checks the structural TokenGrid invariants; token bounds need the vocabulary
/// and are checked by validate_tokens.
inline void validate_grid(const TokenGrid& g) {
  if (g.height == 0 || g.width == 0) {
    throw Error(ErrorKind::MalformedRecord, g.image_id + ": height and width must be positive");
  }
  if (g.tokens.size() != g.size()) {
    throw Error(ErrorKind::MalformedRecord, g.image_id + ": len(tokens)=" + std::to_string(g.tokens.size()) +
                                                " != h*w=" + std::to_string(g.size()));
  }
  if (g.segments.size() != g.size()) {
    throw Error(ErrorKind::MalformedRecord, g.image_id + ": len(segments)=" +
                                                std::to_string(g.segments.size()) +
                                                " != h*w=" + std::to_string(g.size()));
  }
  for (SegmentId s : g.segments) {
    if (s < kUnlabeled) {
      throw Error(ErrorKind::MalformedRecord, g.image_id + ": negative segment id " + std::to_string(s));
    }
    if (s != kUnlabeled && !g.segment_labels.contains(s)) {
      throw Error(ErrorKind::MalformedRecord, g.image_id + ": segment " + std::to_string(s) + " has no label");
    }
  }
}

inline void validate_tokens(const TokenGrid& g, std::uint32_t vocab_size) {
  for (TokenId t : g.tokens) {
    if (t >= vocab_size) {
      throw Error(ErrorKind::InconsistentVocab, g.image_id + ": token " + std::to_string(t) +
                                                    " >= |V|=" + std::to_string(vocab_size));
    }
  }
}

// ---- JSON Lines ------------------------------------------------------------

inline nlohmann::ordered_json grid_to_json(const TokenGrid& g) {
  nlohmann::ordered_json j;
  j["image_id"] = g.image_id;
  j["height"] = g.height;
  j["width"] = g.width;
  j["tokens"] = g.tokens;
  j["segments"] = g.segments;
  nlohmann::ordered_json labels = nlohmann::ordered_json::object();
  for (const auto& [id, label] : g.segment_labels) labels[std::to_string(id)] = label;
  j["segment_labels"] = std::move(labels);
  return j;
}

inline TokenGrid grid_from_json(const nlohmann::json& j) {
  TokenGrid g;
  g.image_id = j.at("image_id").get<std::string>();
  g.height = j.at("height").get<std::uint32_t>();
  g.width = j.at("width").get<std::uint32_t>();
  g.tokens = j.at("tokens").get<std::vector<TokenId>>();
  g.segments = j.at("segments").get<std::vector<SegmentId>>();
  for (const auto& [key, value] : j.at("segment_labels").items()) {
    std::size_t used = 0;
    const long id = std::stol(key, &used);
    if (used != key.size()) throw std::invalid_argument("segment label key '" + key + "' is not an integer");
    g.segment_labels[static_cast<SegmentId>(id)] = value.get<std::string>();
  }
  return g;
}

/// Parses JSON Lines text. With `declared_vocab` every token must be below it;
/// otherwise |V| is inferred as max token + 1. Blank lines are skipped.
inline Corpus parse_corpus(std::istream& in, std::optional<std::uint32_t> declared_vocab = std::nullopt) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  TokenId max_token = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    TokenGrid g;
    try {
      g = grid_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      validate_grid(g);
    } catch (const Error& e) {
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (declared_vocab) {
      try {
        validate_tokens(g, *declared_vocab);
      } catch (const Error& e) {
        throw Error(ErrorKind::InconsistentVocab, "line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    for (TokenId t : g.tokens) max_token = std::max(max_token, t);
    corpus.records.push_back(std::move(g));
  }
  if (corpus.records.empty()) throw Error(ErrorKind::MalformedRecord, "corpus is empty");
  corpus.codebook_size = declared_vocab ? *declared_vocab : max_token + 1;
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& path,
                          std::optional<std::uint32_t> declared_vocab = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return parse_corpus(in, declared_vocab);
}

inline std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& g : corpus.records) {
    out += grid_to_json(g).dump();
    out += '\n';
  }
  return out;
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  io::write_file(path, serialize_corpus(corpus));
}

// ---- CGCB codebook ---------------------------------------------------------

inline constexpr std::string_view kCodebookMagic = "CGCB";

inline Codebook decode_codebook(std::string_view bytes) {
  Codebook cb{io::decode_plain_matrix(kCodebookMagic, bytes, "codebook")};
  if (cb.size() == 0 || cb.dim() == 0) throw Error(ErrorKind::InvalidSpec, "codebook has an empty dimension");
  return cb;
}

inline Codebook load_codebook(const std::filesystem::path& path) { return decode_codebook(io::read_file(path)); }

inline std::string encode_codebook(const Codebook& cb) { return io::encode_plain_matrix(kCodebookMagic, cb.embeddings); }

inline void save_codebook(const std::filesystem::path& path, const Codebook& cb) {
  io::write_file(path, encode_codebook(cb));
}

// ---- synthetic corpora -----------------------------------------------------

struct SyntheticSpec {
  std::uint32_t vocab_size = 200;
  std::uint32_t n_groups = 10;
  std::uint32_t n_images = 500;
  std::uint32_t grid_h = 16;
  std::uint32_t grid_w = 16;
  std::uint32_t objects_per_image = 3;
  double noise_rate = 0.1;
  std::uint32_t codebook_dim = 8;
  std::uint32_t labels_per_group = 1;
  // Each object draws from a random subset of this fraction of its group's tokens.
  double object_token_fraction = 1.0;
  // Object rectangle side range; 0 selects dim/4 and dim*5/8 of the grid.
  std::uint32_t min_object_size = 0;
  std::uint32_t max_object_size = 0;
};

struct SyntheticCorpus {
  Corpus corpus;
  PlantedTruth truth;
  Codebook codebook;
};

inline void validate_spec(const SyntheticSpec& s) {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::InvalidSpec, why); };
  if (s.vocab_size == 0 || s.n_groups < 2) fail("need vocab_size > 0 and n_groups >= 2");
  if (s.vocab_size % s.n_groups != 0) fail("vocab_size must be divisible by n_groups");
  if (s.n_images == 0) fail("n_images must be positive");
  if (s.grid_h == 0 || s.grid_w == 0) fail("grid dims must be positive");
  if (s.objects_per_image < 1) fail("objects_per_image must be >= 1");
  if (s.objects_per_image > s.n_groups - 1) fail("objects_per_image exceeds the number of object groups");
  if (s.objects_per_image > s.grid_h * s.grid_w) fail("grid too small to host the objects");
  if (!(s.noise_rate >= 0.0 && s.noise_rate <= 1.0)) fail("noise_rate must lie in [0, 1]");
  if (s.codebook_dim == 0) fail("codebook_dim must be positive");
  if (s.labels_per_group == 0) fail("labels_per_group must be positive");
  if (!(s.object_token_fraction > 0.0 && s.object_token_fraction <= 1.0)) fail("object_token_fraction must lie in (0, 1]");
  if (s.min_object_size > s.max_object_size && s.max_object_size != 0) fail("min_object_size > max_object_size");
}

inline std::string group_label(std::uint32_t group, std::uint32_t index, std::uint32_t labels_per_group) {
  std::string label = "object_" + std::to_string(group);
  if (labels_per_group > 1) label += static_cast<char>('a' + index % 26) + (index >= 26 ? std::to_string(index / 26) : "");
  return label;
}

/// Group n_groups-1 (after a seeded token permutation) is the background group;
/// the others host objects. Pure function of (spec, seed).
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  const std::uint32_t group_size = spec.vocab_size / spec.n_groups;
  const std::uint32_t background = spec.n_groups - 1;

  SyntheticCorpus out;
  auto& truth = out.truth;
  truth.background_group = background;

  Rng group_rng(derive_seed(seed, "groups"));
  std::vector<TokenId> perm(spec.vocab_size);
  for (TokenId t = 0; t < spec.vocab_size; ++t) perm[t] = t;
  group_rng.shuffle(perm);
  std::vector<std::vector<TokenId>> members(spec.n_groups);
  truth.group_of.assign(spec.vocab_size, 0);
  for (std::uint32_t i = 0; i < spec.vocab_size; ++i) {
    const std::uint32_t g = i / group_size;
    truth.group_of[perm[i]] = g;
    members[g].push_back(perm[i]);
  }
  for (auto& m : members) std::sort(m.begin(), m.end());
  for (std::uint32_t g = 0; g < spec.n_groups; ++g) {
    if (g == background) {
      truth.object_of_group[g] = "background";
      truth.labels_of_group[g] = {"background"};
      continue;
    }
    for (std::uint32_t a = 0; a < spec.labels_per_group; ++a) {
      truth.labels_of_group[g].push_back(group_label(g, a, spec.labels_per_group));
    }
    truth.object_of_group[g] = truth.labels_of_group[g].front();
  }

  const std::uint32_t short_side = std::min(spec.grid_h, spec.grid_w);
  const std::uint32_t min_side = spec.min_object_size ? spec.min_object_size : std::max(1u, short_side / 4);
  const std::uint32_t max_side =
      spec.max_object_size ? spec.max_object_size : std::max(min_side, short_side * 5 / 8);

  Rng rng(derive_seed(seed, "images"));
  out.corpus.codebook_size = spec.vocab_size;
  out.corpus.records.reserve(spec.n_images);
  for (std::uint32_t n = 0; n < spec.n_images; ++n) {
    TokenGrid g;
    std::ostringstream id;
    id << "img_" << std::setw(6) << std::setfill('0') << n;
    g.image_id = id.str();
    g.height = spec.grid_h;
    g.width = spec.grid_w;
    g.segments.assign(g.size(), kUnlabeled);
    g.tokens.assign(g.size(), 0);

    auto chosen = rng.sample_without_replacement(spec.n_groups - 1, spec.objects_per_image);
    std::vector<std::uint32_t> group_of_segment(chosen.begin(), chosen.end());
    std::vector<std::string> label_of_segment;
    std::vector<std::vector<TokenId>> palette_of_segment;
    for (std::uint32_t s = 0; s < spec.objects_per_image; ++s) {
      const auto& labels = truth.labels_of_group[group_of_segment[s]];
      label_of_segment.push_back(labels[rng.below(labels.size())]);
      const auto& m = members[group_of_segment[s]];
      if (spec.object_token_fraction < 1.0) {
        const auto keep = static_cast<std::size_t>(std::ceil(spec.object_token_fraction * static_cast<double>(m.size())));
        std::vector<TokenId> palette;
        for (std::size_t i : rng.sample_without_replacement(m.size(), keep)) palette.push_back(m[i]);
        palette_of_segment.push_back(std::move(palette));
      } else {
        palette_of_segment.push_back(m);
      }
      const auto rh = static_cast<std::uint32_t>(rng.range(min_side, max_side));
      const auto rw = static_cast<std::uint32_t>(rng.range(min_side, max_side));
      const std::uint32_t hh = std::min(rh, spec.grid_h);
      const std::uint32_t ww = std::min(rw, spec.grid_w);
      const auto top = static_cast<std::uint32_t>(rng.range(0, spec.grid_h - hh));
      const auto left = static_cast<std::uint32_t>(rng.range(0, spec.grid_w - ww));
      for (std::uint32_t r = top; r < top + hh; ++r) {
        for (std::uint32_t c = left; c < left + ww; ++c) g.segments[r * spec.grid_w + c] = static_cast<SegmentId>(s);
      }
    }
    for (std::size_t p = 0; p < g.size(); ++p) {
      const SegmentId s = g.segments[p];
      if (s != kUnlabeled) {
        const auto& m = palette_of_segment[static_cast<std::size_t>(s)];
        g.tokens[p] = m[rng.below(m.size())];
        g.segment_labels[s] = label_of_segment[static_cast<std::size_t>(s)];
      } else if (rng.bernoulli(spec.noise_rate)) {
        g.tokens[p] = static_cast<TokenId>(rng.below(spec.vocab_size));
      } else {
        const auto& m = members[background];
        g.tokens[p] = m[rng.below(m.size())];
      }
    }
    out.corpus.records.push_back(std::move(g));
  }

  Rng cb_rng(derive_seed(seed, "codebook"));
  out.codebook.embeddings.resize(spec.vocab_size, spec.codebook_dim);
  for (Eigen::Index i = 0; i < out.codebook.embeddings.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.codebook.embeddings.cols(); ++j) out.codebook.embeddings(i, j) = static_cast<float>(cb_rng.normal());
  }
  return out;
}

inline nlohmann::ordered_json truth_to_json(const PlantedTruth& t) {
  nlohmann::ordered_json j;
  j["group_of"] = t.group_of;
  j["background_group"] = t.background_group;
  nlohmann::ordered_json objects = nlohmann::ordered_json::object();
  nlohmann::ordered_json labels = nlohmann::ordered_json::object();
  for (const auto& [g, label] : t.object_of_group) objects[std::to_string(g)] = label;
  for (const auto& [g, ls] : t.labels_of_group) labels[std::to_string(g)] = ls;
  j["object_of_group"] = std::move(objects);
  j["labels_of_group"] = std::move(labels);
  return j;
}

inline PlantedTruth truth_from_json(const nlohmann::json& j) {
  PlantedTruth t;
  try {
    t.group_of = j.at("group_of").get<std::vector<std::uint32_t>>();
    t.background_group = j.at("background_group").get<std::uint32_t>();
    for (const auto& [g, label] : j.at("object_of_group").items()) t.object_of_group[std::stoul(g)] = label;
    for (const auto& [g, ls] : j.at("labels_of_group").items())
      t.labels_of_group[std::stoul(g)] = ls.get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("planted truth: ") + e.what());
  }
  return t;
}

inline PlantedTruth load_truth(const std::filesystem::path& path) {
  try {
    return truth_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("planted truth: ") + e.what());
  }
}

}  // namespace vptd
