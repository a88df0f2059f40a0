#pragma once

// Flat binary parameter archive: a versioned header followed by
// (path string, shape, raw little-endian float64 data) records. The on-disk
// layout is independent of the in-memory scalar type; float tensors are
// widened on save and narrowed on load.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gnoc/common.hpp"
#include "gnoc/tensor.hpp"

namespace gnoc {

struct ArchiveEntry {
  Shape shape;
  std::vector<double> values;
};

using Archive = std::map<std::string, ArchiveEntry>;

namespace detail {

constexpr char kArchiveMagic[8] = {'G', 'N', 'O', 'C', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kArchiveVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little,
                "archive writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  GNOC_CHECK(bool(is), CheckpointError, "archive: truncated file");
  return v;
}

}  // namespace detail

inline void save_archive(const std::string& path, const Archive& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  GNOC_CHECK(os.good(), CheckpointError, cat("archive: cannot open ", path));
  os.write(detail::kArchiveMagic, sizeof(detail::kArchiveMagic));
  detail::write_pod<std::uint32_t>(os, detail::kArchiveVersion);
  detail::write_pod<std::uint64_t>(os, entries.size());
  for (const auto& [name, e] : entries) {
    GNOC_CHECK(numel(e.shape) == e.values.size(), CheckpointError,
               cat("archive: shape/value mismatch for ", name));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  GNOC_CHECK(os.good(), CheckpointError, cat("archive: write failed for ", path));
}

inline Archive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  GNOC_CHECK(is.good(), CheckpointError, cat("archive: cannot open ", path));
  char magic[8];
  is.read(magic, sizeof(magic));
  GNOC_CHECK(bool(is) && std::memcmp(magic, detail::kArchiveMagic, 8) == 0,
             CheckpointError, cat("archive: bad magic in ", path));
  const auto version = detail::read_pod<std::uint32_t>(is);
  GNOC_CHECK(version == detail::kArchiveVersion, CheckpointError,
             cat("archive: unsupported version ", version, " in ", path));
  const auto count = detail::read_pod<std::uint64_t>(is);
  Archive entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    GNOC_CHECK(bool(is), CheckpointError, "archive: truncated entry name");
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    GNOC_CHECK(ndim <= 8, CheckpointError, "archive: implausible rank");
    ArchiveEntry e;
    for (std::uint32_t d = 0; d < ndim; ++d)
      e.shape.push_back(detail::read_pod<std::uint64_t>(is));
    e.values.resize(numel(e.shape));
    is.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    GNOC_CHECK(bool(is), CheckpointError, cat("archive: truncated data for ", name));
    entries.emplace(std::move(name), std::move(e));
  }
  return entries;
}

template <typename Real>
ArchiveEntry to_entry(const TensorPtrT<Real>& t) {
  ArchiveEntry e;
  e.shape = t->shape;
  e.values.assign(t->values.begin(), t->values.end());
  return e;
}

template <typename Real>
TensorPtrT<Real> from_entry(const ArchiveEntry& e) {
  auto t = TensorT<Real>::zeros(e.shape);
  for (std::size_t i = 0; i < e.values.size(); ++i)
    t->values[i] = static_cast<Real>(e.values[i]);
  return t;
}

}  // namespace gnoc
