#pragma once

// Flat binary tensor container:
//   "TECG" | u32 version
//   repeated until EOF:
//     u32 name_len | name bytes (UTF-8) | u32 rank | u64 dims[rank] | f64 payload
// All integers and floats little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "transecg/tensor.hpp"

namespace transecg::nn {

inline constexpr std::array<char, 4> kContainerMagic = {'T', 'E', 'C', 'G'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  auto u = std::bit_cast<U>(v);
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xFFu);
  os.write(buf.data(), buf.size());
}

template <typename T>
bool read_le(std::istream& is, T& v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  std::array<unsigned char, sizeof(U)> buf{};
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) return false;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(buf[i]) << (8 * i);
  v = std::bit_cast<T>(u);
  return true;
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kContainerMagic.data(), kContainerMagic.size());
  detail::write_le<std::uint32_t>(os, kContainerVersion);
  for (const auto& [name, t] : tensors) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
    for (double v : t.data()) detail::write_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("tensor container: write failed");
}

inline std::vector<NamedTensor> read_tensors(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kContainerMagic)
    throw std::runtime_error("tensor container: bad magic");
  std::uint32_t version = 0;
  if (!detail::read_le(is, version) || version != kContainerVersion)
    throw std::runtime_error("tensor container: unsupported version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (true) {
    std::uint32_t name_len = 0;
    if (!detail::read_le(is, name_len)) {
      if (is.eof() && is.gcount() == 0) break;
      throw std::runtime_error("tensor container: truncated record header");
    }
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !detail::read_le(is, rank))
      throw std::runtime_error("tensor container: truncated record");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!detail::read_le(is, v)) throw std::runtime_error("tensor container: truncated dims for '" + name + "'");
      d = static_cast<std::size_t>(v);
    }
    std::vector<double> data(numel(shape));
    for (auto& v : data)
      if (!detail::read_le(is, v)) throw std::runtime_error("tensor container: truncated payload for '" + name + "'");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_tensors(os, tensors);
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return read_tensors(is);
}

}  // namespace transecg::nn
