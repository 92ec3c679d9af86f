#pragma once

#include <algorithm>
#include <bit>
#include <type_traits>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "latent_loop/errors.hpp"
#include "latent_loop/rng.hpp"
#include "latent_loop/tensor.hpp"

namespace latent_loop {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

struct NamedArray {
  std::string name;
  Tensor value;
};

/// "PERLW1" container.
///
///   magic    7 bytes  "PERLW1\0"
///   count    u32
///   per array:
///     name   u32 byte length, then UTF-8 bytes
///     rank   u8
///     dims   rank x u32
///     values prod(dims) x f64 (IEEE-754), row-major
///   checksum u64 FNV-1a over every preceding byte
///
/// All integers and floats are little-endian.
namespace checkpoint {

inline constexpr char kMagic[7] = {'P', 'E', 'R', 'L', 'W', '1', '\0'};

namespace detail {

template <typename T>
void put(std::vector<unsigned char>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw InputError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode(const std::vector<NamedArray>& arrays) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, value] : arrays) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (value.rank() > 255) throw ContractError("array '" + name + "' has rank above 255");
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(value.rank()));
    for (std::size_t d : value.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : value.values()) detail::put<double>(out, v);
  }
  detail::put<std::uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

inline std::vector<NamedArray> decode(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 + 8) throw InputError("checkpoint too short");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  {
    detail::Reader r(bytes, bytes.size());
    r.get_string(body);
    stored = r.get<std::uint64_t>();
  }
  if (stored != fnv1a64(bytes.data(), body)) throw InputError("checkpoint checksum mismatch");
  detail::Reader r(bytes, body);
  if (r.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw InputError("not a PERLW1 checkpoint (bad magic)");
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = r.get<double>();
    arrays.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (r.position() != body) throw InputError("checkpoint has trailing bytes before checksum");
  return arrays;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void save(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  write_bytes(path, encode(arrays));
}

inline std::vector<NamedArray> load(const std::filesystem::path& path) { return decode(read_bytes(path)); }

inline const Tensor& find(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return a.value;
  throw InputError("checkpoint has no array named '" + name + "'");
}

}  // namespace checkpoint
}  // namespace latent_loop
