#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fdu/tensor.hpp"

namespace fdu {

// On-disk tensor container ("tar" files throughout the run directories).
//
// Layout, all integers little-endian:
//   magic   : 8 bytes  "FDUTNSR\0"
//   version : u16      (currently 1)
//   count   : u32      number of entries
//   entry   : repeated `count` times
//     name_len : u32
//     name     : name_len bytes of UTF-8
//     dtype    : u8   (0=f32, 1=f64, 2=u8, 3=i64)
//     ndim     : u8
//     shape    : ndim x u64
//     payload  : numel * dtype_size bytes, contiguous row-major
//
// Entry names are unique. Payloads are written exactly as stored in memory
// on little-endian hosts; on big-endian hosts they are byte-swapped so the
// file format stays identical.

enum class ArchiveErrc {
  io,
  bad_magic,
  bad_version,
  truncated,
  duplicate_name,
  bad_dtype,
};

class ArchiveError : public std::runtime_error {
 public:
  ArchiveError(ArchiveErrc kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ArchiveErrc kind() const { return kind_; }

 private:
  ArchiveErrc kind_;
};

using AnyTensor = std::variant<TensorF, TensorD, TensorU8, TensorI64>;

inline DType any_tensor_dtype(const AnyTensor& t) {
  return std::visit(
      [](const auto& x) { return dtype_of<typename std::decay_t<decltype(x)>::data_type>::value; },
      t);
}

namespace detail {

constexpr char kArchiveMagic[8] = {'F', 'D', 'U', 'T', 'N', 'S', 'R', '\0'};
constexpr std::uint16_t kArchiveVersion = 1;

constexpr bool kLittleEndian = std::endian::native == std::endian::little;

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
bool read_le(std::istream& is, T& v) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(T));
  std::memcpy(&v, buf, sizeof(T));
  return true;
}

template <typename T>
void write_payload(std::ostream& os, const std::vector<T>& data) {
  if constexpr (kLittleEndian || sizeof(T) == 1) {
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(T)));
  } else {
    for (const T& v : data) write_le(os, v);
  }
}

template <typename T>
bool read_payload(std::istream& is, std::vector<T>& data) {
  if constexpr (kLittleEndian || sizeof(T) == 1) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(data.data()),
                                     static_cast<std::streamsize>(data.size() * sizeof(T))));
  } else {
    for (T& v : data) {
      if (!read_le(is, v)) return false;
    }
    return true;
  }
}

}  // namespace detail

/// Serialized size of an archive holding the given entries, computed from
/// the format definition (useful for integrity checks).
inline std::size_t archive_file_size(const std::map<std::string, AnyTensor>& entries) {
  std::size_t n = 8 + 2 + 4;  // magic + version + count
  for (const auto& [name, t] : entries) {
    n += 4 + name.size() + 1 + 1;
    std::visit(
        [&](const auto& x) {
          n += x.shape.size() * 8;
          n += x.data.size() * sizeof(typename std::decay_t<decltype(x)>::data_type);
        },
        t);
  }
  return n;
}

inline void write_archive(const std::filesystem::path& path,
                          const std::map<std::string, AnyTensor>& entries) {
  for (const auto& [name, t] : entries) {
    std::visit(
        [&](const auto& x) {
          if (x.shape.empty()) {
            throw std::invalid_argument("archive entry '" + name + "' has empty shape");
          }
        },
        t);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ArchiveError(ArchiveErrc::io, "cannot open for write: " + path.string());
  os.write(detail::kArchiveMagic, 8);
  detail::write_le<std::uint16_t>(os, detail::kArchiveVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(any_tensor_dtype(t)));
    std::visit(
        [&](const auto& x) {
          detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(x.shape.size()));
          for (const std::size_t d : x.shape) detail::write_le<std::uint64_t>(os, d);
          detail::write_payload(os, x.data);
        },
        t);
  }
  os.flush();
  if (!os) throw ArchiveError(ArchiveErrc::io, "write failed: " + path.string());
}

inline std::map<std::string, AnyTensor> read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError(ArchiveErrc::io, "cannot open for read: " + path.string());
  char magic[8];
  if (!is.read(magic, 8)) throw ArchiveError(ArchiveErrc::truncated, "truncated header");
  if (std::memcmp(magic, detail::kArchiveMagic, 8) != 0) {
    throw ArchiveError(ArchiveErrc::bad_magic, "bad magic in " + path.string());
  }
  std::uint16_t version = 0;
  if (!detail::read_le(is, version)) throw ArchiveError(ArchiveErrc::truncated, "truncated header");
  if (version != detail::kArchiveVersion) {
    throw ArchiveError(ArchiveErrc::bad_version,
                       "unsupported archive version " + std::to_string(version));
  }
  std::uint32_t count = 0;
  if (!detail::read_le(is, count)) throw ArchiveError(ArchiveErrc::truncated, "truncated header");

  std::map<std::string, AnyTensor> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint32_t name_len = 0;
    if (!detail::read_le(is, name_len)) {
      throw ArchiveError(ArchiveErrc::truncated, "truncated entry header");
    }
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw ArchiveError(ArchiveErrc::truncated, "truncated entry name");
    }
    std::uint8_t dtype_raw = 0, ndim = 0;
    if (!detail::read_le(is, dtype_raw) || !detail::read_le(is, ndim)) {
      throw ArchiveError(ArchiveErrc::truncated, "truncated entry header");
    }
    if (dtype_raw > 3) throw ArchiveError(ArchiveErrc::bad_dtype, "unknown dtype code");
    std::vector<std::size_t> shape(ndim);
    for (std::uint8_t d = 0; d < ndim; ++d) {
      std::uint64_t v = 0;
      if (!detail::read_le(is, v)) throw ArchiveError(ArchiveErrc::truncated, "truncated shape");
      shape[d] = static_cast<std::size_t>(v);
    }
    if (entries.count(name)) {
      throw ArchiveError(ArchiveErrc::duplicate_name, "duplicate entry '" + name + "'");
    }
    const std::size_t numel = shape_numel(shape);
    auto read_typed = [&](auto tag) -> AnyTensor {
      using T = decltype(tag);
      Tensor<T> t;
      t.shape = shape;
      t.data.resize(numel);
      if (!detail::read_payload(is, t.data)) {
        throw ArchiveError(ArchiveErrc::truncated, "truncated payload for '" + name + "'");
      }
      return t;
    };
    switch (static_cast<DType>(dtype_raw)) {
      case DType::f32: entries.emplace(name, read_typed(float{})); break;
      case DType::f64: entries.emplace(name, read_typed(double{})); break;
      case DType::u8: entries.emplace(name, read_typed(std::uint8_t{})); break;
      case DType::i64: entries.emplace(name, read_typed(std::int64_t{})); break;
    }
  }
  return entries;
}

/// Typed accessor; throws std::out_of_range / std::bad_variant_access on
/// missing name or dtype mismatch.
template <typename T>
const Tensor<T>& archive_get(const std::map<std::string, AnyTensor>& entries,
                             const std::string& name) {
  return std::get<Tensor<T>>(entries.at(name));
}

/// Stores a string as a u8 tensor entry (used for metadata like model specs).
inline AnyTensor string_entry(const std::string& s) {
  TensorU8 t;
  t.shape = {std::max<std::size_t>(s.size(), 1)};
  t.data.assign(s.begin(), s.end());
  if (t.data.empty()) t.data.push_back(0);
  return t;
}

inline std::string entry_string(const std::map<std::string, AnyTensor>& entries,
                                const std::string& name) {
  const TensorU8& t = archive_get<std::uint8_t>(entries, name);
  std::string s(t.data.begin(), t.data.end());
  if (s.size() == 1 && s[0] == '\0') return "";
  return s;
}

}  // namespace fdu
