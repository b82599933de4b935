#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "ftsp/tensor.hpp"

namespace ftsp {

// Binary tensor layout: "FTSP1", u32 rank, u32 extents[rank], f64 payload, all little-endian.
inline constexpr char kTensorMagic[5] = {'F', 'T', 'S', 'P', '1'};

namespace detail {

template <class T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
  }
  return value;
}

template <class T>
void write_le(std::ostream& os, T value) {
  value = to_little(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw IoError("unexpected end of tensor stream");
  return to_little(value);
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, sizeof(kTensorMagic));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (Real v : t.data()) detail::write_le<double>(os, static_cast<double>(v));
  if (!os) throw IoError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& is) {
  char magic[sizeof(kTensorMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) throw IoError("bad tensor magic");
  const auto rank = detail::read_le<std::uint32_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_le<std::uint32_t>(is);
  std::vector<Real> data(numel_of(shape));
  for (auto& v : data) v = static_cast<Real>(detail::read_le<double>(is));
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace ftsp
