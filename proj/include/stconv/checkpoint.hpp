#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "stconv/model.hpp"
#include "stconv/tensor_io.hpp"

namespace stconv {

inline constexpr std::uint8_t kStarVersion = 1;

/// "STAR" archive: magic, version u8, entry count u32 LE, then per entry a u16 LE
/// name length, the UTF-8 name and an embedded STSR blob.
using StarEntries = std::vector<std::pair<std::string, AnyTensor>>;

void write_star(std::ostream& os, const StarEntries& entries);
StarEntries read_star(std::istream& is);

/// A checkpoint is the parameter store (float32) plus the model config, kept as
/// the entry "meta.config": the key=value text, one float64 per byte.
void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params, const ModelConfig& cfg);
void save_checkpoint(std::ostream& os, const ParamStore<float>& params, const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
};

/// Rejects archives whose parameter names or shapes disagree with the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint load_checkpoint(std::istream& is);

}  // namespace stconv
