#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "stconv/tensor.hpp"

namespace stconv {

// STSR layout:
//   0..3  magic "STSR"
//   4     version (1)
//   5     dtype (0 = float32, 1 = float64)
//   6     ndim (always 5)
//   7     reserved (0)
//   8..47 five little-endian u64 extents (N, C, T, H, W)
//   48..  row-major little-endian payload
inline constexpr std::uint8_t kStsrVersion = 1;
inline constexpr std::size_t kStsrHeaderBytes = 48;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write_stsr(std::ostream& os, const Tensor<T>& x);
template <typename T>
void write_stsr(const std::filesystem::path& path, const Tensor<T>& x);

/// Reads one tensor; throws FormatError on bad magic, version, dtype or truncation.
AnyTensor read_stsr(std::istream& is);
AnyTensor read_stsr(const std::filesystem::path& path);

/// Reads and converts to T. Conversion float64 -> float32 rounds.
template <typename T>
Tensor<T> read_stsr_as(std::istream& is);
template <typename T>
Tensor<T> read_stsr_as(const std::filesystem::path& path);

}  // namespace stconv
