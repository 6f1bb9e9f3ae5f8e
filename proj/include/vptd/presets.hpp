#pragma once

// Per-model defaults for the three reference LVLMs.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace vptd {

struct ModelPreset {
  std::string_view name;
  std::uint32_t cluster_size;
  std::uint32_t n_dominant;
  std::uint32_t layer;
  double gamma;
  std::uint32_t d_codebook;
  std::uint32_t d_hidden;
  std::uint32_t d_out;
  std::uint32_t codebook_size;
};

inline constexpr std::array<ModelPreset, 3> kPresets{{
    {"chameleon-7b", 10, 2, 25, 0.5, 256, 128, 256, 8192},
    {"janus-pro-7b", 10, 2, 27, 0.2, 8, 128, 32, 16384},
    {"emu3-13b", 10, 4, 21, 0.6, 4, 64, 32, 32768},
}};

inline std::optional<ModelPreset> find_preset(std::string_view name) {
  for (const auto& p : kPresets)
    if (p.name == name) return p;
  return std::nullopt;
}

}  // namespace vptd
