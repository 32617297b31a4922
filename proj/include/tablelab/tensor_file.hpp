#pragma once

// "TBLS" container: little-endian binary
//   magic "TBLS" | u32 version | u64 meta_len | meta JSON bytes | u32 n_records
//   per record: u32 name_len | name | u8 dtype (0 = f32) | u32 ndim | u64 dims[ndim] | payload
// Used for checkpoints, traces, probe stores and shift vectors.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace tablelab {

static_assert(std::endian::native == std::endian::little, "TBLS I/O assumes a little-endian host");

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct TensorFile {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> records;

  const TensorRecord& get(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r;
    throw std::out_of_range("TBLS: no record named " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return true;
    return false;
  }
  void add(std::string name, std::vector<std::uint64_t> shape, std::vector<float> data) {
    TensorRecord r{std::move(name), std::move(shape), std::move(data)};
    if (r.numel() != r.data.size()) throw std::invalid_argument("TBLS: shape does not match payload for " + r.name);
    records.push_back(std::move(r));
  }
};

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("TBLS: truncated file");
  return v;
}
}  // namespace detail

inline void write_tensor_file(const std::string& path, const TensorFile& f) {
  if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("TBLS: cannot open " + path + " for writing");
  os.write("TBLS", 4);
  detail::put<std::uint32_t>(os, TensorFile::kVersion);
  const std::string meta = f.meta.dump();
  detail::put<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(f.records.size()));
  for (const auto& r : f.records) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put<std::uint8_t>(os, 0);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(r.shape.size()));
    for (auto s : r.shape) detail::put<std::uint64_t>(os, s);
    os.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("TBLS: write failed for " + path);
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("TBLS: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TBLS", 4) != 0) throw std::runtime_error("TBLS: bad magic in " + path);
  const auto version = detail::take<std::uint32_t>(is);
  if (version != TensorFile::kVersion) throw std::runtime_error("TBLS: unsupported version " + std::to_string(version));
  TensorFile f;
  const auto meta_len = detail::take<std::uint64_t>(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  f.meta = nlohmann::json::parse(meta);
  const auto n = detail::take<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord r;
    r.name.resize(detail::take<std::uint32_t>(is));
    is.read(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    if (detail::take<std::uint8_t>(is) != 0) throw std::runtime_error("TBLS: unsupported dtype in " + r.name);
    r.shape.resize(detail::take<std::uint32_t>(is));
    for (auto& s : r.shape) s = detail::take<std::uint64_t>(is);
    r.data.resize(r.numel());
    is.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("TBLS: truncated payload in " + r.name);
    f.records.push_back(std::move(r));
  }
  return f;
}

}  // namespace tablelab
