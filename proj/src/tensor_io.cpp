#include "stconv/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace stconv {
namespace {

constexpr std::array<char, 4> kMagic{'S', 'T', 'S', 'R'};

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

template <typename T>
void write_payload(std::ostream& os, const Tensor<T>& x) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(x.ptr()), static_cast<std::streamsize>(x.numel() * sizeof(T)));
  } else {
    for (T v : x.data()) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      os.write(bytes.data(), sizeof(T));
    }
  }
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape5 shape) {
  Tensor<T> out(shape);
  const auto bytes = static_cast<std::streamsize>(out.numel() * static_cast<std::int64_t>(sizeof(T)));
  is.read(reinterpret_cast<char*>(out.ptr()), bytes);
  if (is.gcount() != bytes)
    throw FormatError("STSR: truncated payload (expected " + std::to_string(bytes) + " bytes, got " +
                      std::to_string(is.gcount()) + ")");
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : out.data()) {
      auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    }
  }
  return out;
}

}  // namespace

template <typename T>
void write_stsr(std::ostream& os, const Tensor<T>& x) {
  os.write(kMagic.data(), 4);
  const std::array<char, 4> meta{static_cast<char>(kStsrVersion), static_cast<char>(dtype_of<T>()), 5, 0};
  os.write(meta.data(), 4);
  for (std::int64_t d : x.shape().dims()) put_u64(os, static_cast<std::uint64_t>(d));
  write_payload(os, x);
  if (!os) throw FormatError("STSR: write failed");
}

template <typename T>
void write_stsr(const std::filesystem::path& path, const Tensor<T>& x) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("STSR: cannot open " + path.string() + " for writing");
  write_stsr(os, x);
}

AnyTensor read_stsr(std::istream& is) {
  std::array<unsigned char, kStsrHeaderBytes> header{};
  is.read(reinterpret_cast<char*>(header.data()), kStsrHeaderBytes);
  if (is.gcount() != static_cast<std::streamsize>(kStsrHeaderBytes))
    throw FormatError("STSR: truncated header");
  if (std::memcmp(header.data(), kMagic.data(), 4) != 0) throw FormatError("STSR: bad magic");
  if (header[4] != kStsrVersion) throw FormatError("STSR: unsupported version " + std::to_string(header[4]));
  if (header[6] != 5) throw FormatError("STSR: ndim must be 5");
  if (header[7] != 0) throw FormatError("STSR: reserved byte must be zero");
  std::array<std::int64_t, 5> d{};
  for (std::size_t i = 0; i < 5; ++i) {
    const std::uint64_t v = get_u64(header.data() + 8 + 8 * i);
    if (v == 0 || v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
      throw FormatError("STSR: invalid extent");
    d[i] = static_cast<std::int64_t>(v);
  }
  const Shape5 shape{d[0], d[1], d[2], d[3], d[4]};
  try {
    shape.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("STSR: ") + e.what());
  }
  switch (header[5]) {
    case static_cast<unsigned char>(DType::Float32): return read_payload<float>(is, shape);
    case static_cast<unsigned char>(DType::Float64): return read_payload<double>(is, shape);
    default: throw FormatError("STSR: unknown dtype code " + std::to_string(header[5]));
  }
}

AnyTensor read_stsr(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("STSR: cannot open " + path.string());
  return read_stsr(is);
}

template <typename T>
Tensor<T> read_stsr_as(std::istream& is) {
  return std::visit([](auto&& t) { return tensor_cast<T>(t); }, read_stsr(is));
}

template <typename T>
Tensor<T> read_stsr_as(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("STSR: cannot open " + path.string());
  return read_stsr_as<T>(is);
}

template void write_stsr(std::ostream&, const Tensor<float>&);
template void write_stsr(std::ostream&, const Tensor<double>&);
template void write_stsr(const std::filesystem::path&, const Tensor<float>&);
template void write_stsr(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_stsr_as<float>(std::istream&);
template Tensor<double> read_stsr_as<double>(std::istream&);
template Tensor<float> read_stsr_as<float>(const std::filesystem::path&);
template Tensor<double> read_stsr_as<double>(const std::filesystem::path&);

}  // namespace stconv
