#include "stconv/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "stconv/config.hpp"

namespace stconv {
namespace {

constexpr std::array<char, 4> kMagic{'S', 'T', 'A', 'R'};
constexpr const char* kConfigEntry = "meta.config";

void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("STAR: truncated ") + what);
}

}  // namespace

void write_star(std::ostream& os, const StarEntries& entries) {
  if (entries.size() > 0xffffffffULL) throw FormatError("STAR: too many entries");
  os.write(kMagic.data(), 4);
  os.put(static_cast<char>(kStarVersion));
  const auto count = static_cast<std::uint32_t>(entries.size());
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((count >> (8 * i)) & 0xff));
  for (const auto& [name, tensor] : entries) {
    if (name.empty() || name.size() > 0xffff) throw FormatError("STAR: bad entry name length");
    const auto len = static_cast<std::uint16_t>(name.size());
    os.put(static_cast<char>(len & 0xff));
    os.put(static_cast<char>(len >> 8));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    std::visit([&](const auto& t) { write_stsr(os, t); }, tensor);
  }
  if (!os) throw FormatError("STAR: write failed");
}

StarEntries read_star(std::istream& is) {
  std::array<unsigned char, 9> head{};
  read_exact(is, head.data(), head.size(), "header");
  if (std::memcmp(head.data(), kMagic.data(), 4) != 0) throw FormatError("STAR: bad magic");
  if (head[4] != kStarVersion) throw FormatError("STAR: unsupported version " + std::to_string(head[4]));
  std::uint32_t count = 0;
  for (int i = 3; i >= 0; --i) count = (count << 8) | head[5 + static_cast<std::size_t>(i)];
  StarEntries out;
  std::set<std::string> names;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::array<unsigned char, 2> lb{};
    read_exact(is, lb.data(), 2, "entry name length");
    const std::size_t len = lb[0] | (std::size_t{lb[1]} << 8);
    if (len == 0) throw FormatError("STAR: empty entry name");
    std::string name(len, '\0');
    read_exact(is, name.data(), len, "entry name");
    if (!names.insert(name).second) throw FormatError("STAR: duplicate entry " + name);
    try {
      out.emplace_back(name, read_stsr(is));
    } catch (const FormatError& err) {
      throw FormatError("STAR entry " + name + ": " + err.what());
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("STAR: trailing bytes after last entry");
  return out;
}

void save_checkpoint(std::ostream& os, const ParamStore<float>& params, const ModelConfig& cfg) {
  StarEntries entries;
  for (const auto& e : params) entries.emplace_back(e.name, e.value);
  const std::string text = cfg.to_text();
  Tensor<double> meta(Shape5{1, 1, 1, 1, static_cast<std::int64_t>(text.size())});
  for (std::size_t i = 0; i < text.size(); ++i)
    meta[static_cast<std::int64_t>(i)] = static_cast<unsigned char>(text[i]);
  entries.emplace_back(kConfigEntry, std::move(meta));
  write_star(os, entries);
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params, const ModelConfig& cfg) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, params, cfg);
}

Checkpoint load_checkpoint(std::istream& is) {
  StarEntries entries = read_star(is);
  const AnyTensor* meta = nullptr;
  for (const auto& [name, t] : entries)
    if (name == kConfigEntry) meta = &t;
  if (!meta || !std::holds_alternative<Tensor<double>>(*meta)) throw FormatError("checkpoint: missing meta.config");
  std::string text;
  for (double c : std::get<Tensor<double>>(*meta).data()) {
    if (c < 0 || c > 255 || c != static_cast<double>(static_cast<int>(c))) throw FormatError("checkpoint: bad meta.config");
    text.push_back(static_cast<char>(static_cast<int>(c)));
  }
  Checkpoint ck;
  try {
    for (const auto& kv : parse_key_values(text))
      if (!ck.config.apply(kv.key, kv.value)) throw ConfigError("unknown key '" + kv.key + "'");
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid meta.config: ") + e.what());
  }

  const ParamStore<float> layout = build<float>(ck.config, 0);
  std::size_t matched = 0;
  for (auto& [name, t] : entries) {
    if (name == kConfigEntry) continue;
    if (!layout.contains(name)) throw FormatError("checkpoint: unexpected parameter " + name);
    Tensor<float> v = std::visit([](auto&& x) { return tensor_cast<float>(x); }, t);
    if (!(v.shape() == layout.at(name).value.shape()))
      throw FormatError("checkpoint: parameter " + name + " has shape " + v.shape().str() + ", expected " +
                        layout.at(name).value.shape().str());
    ++matched;
  }
  if (matched != layout.size()) throw FormatError("checkpoint: missing parameters");
  // store in the canonical order regardless of archive order
  for (const auto& e : layout)
    for (auto& [name, t] : entries)
      if (name == e.name) ck.params.add(name, std::visit([](auto&& x) { return tensor_cast<float>(x); }, t));
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

}  // namespace stconv
