#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "repdib/tensor.hpp"

namespace repdib {

// Flat binary checkpoint: magic "RPDB", version u32, then one record per
// tensor: u32 name length, name bytes, u32 rank, u32 dims, little-endian f32
// payload. Records run to end of file.
struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                        static_cast<unsigned char>((x >> 8) & 0xff),
                        static_cast<unsigned char>((x >> 16) & 0xff),
                        static_cast<unsigned char>((x >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& x) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  x = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) |
      (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  put_u32(os, x);
}

inline bool get_f32(std::istream& is, float& f) {
  std::uint32_t x;
  if (!get_u32(is, x)) return false;
  std::memcpy(&f, &x, 4);
  return true;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  os.write("RPDB", 4);
  detail::put_u32(os, 1u);  // version
  for (const auto& r : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_u32(os, d);
    for (float f : r.data) detail::put_f32(os, f);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::vector<TensorRecord> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RPDB", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t version;
  if (!detail::get_u32(is, version) || version != 1u)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  std::vector<TensorRecord> out;
  std::uint32_t name_len;
  while (detail::get_u32(is, name_len)) {
    TensorRecord r;
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len))
      throw std::runtime_error("checkpoint: truncated record name in " + path);
    std::uint32_t rank;
    if (!detail::get_u32(is, rank))
      throw std::runtime_error("checkpoint: truncated shape in " + path);
    r.shape.resize(rank);
    for (auto& d : r.shape)
      if (!detail::get_u32(is, d))
        throw std::runtime_error("checkpoint: truncated shape in " + path);
    r.data.resize(r.numel());
    for (auto& f : r.data)
      if (!detail::get_f32(is, f))
        throw std::runtime_error("checkpoint: truncated payload in " + path);
    out.push_back(std::move(r));
  }
  return out;
}

// Name-indexed view over a record list.
class CheckpointReader {
 public:
  explicit CheckpointReader(std::vector<TensorRecord> records)
      : records_(std::move(records)) {
    for (auto& r : records_) index_[r.name] = &r;
  }
  explicit CheckpointReader(const std::string& path)
      : CheckpointReader(read_checkpoint(path)) {}

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const TensorRecord& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::runtime_error("checkpoint: missing record '" + name + "'");
    return *it->second;
  }

  const std::vector<TensorRecord>& records() const { return records_; }

 private:
  std::vector<TensorRecord> records_;
  std::map<std::string, TensorRecord*> index_;
};

// --- Conversions between in-memory state and f32 records. ------------------

template <typename S>
inline TensorRecord to_record(const std::string& name, const Tensor<S>& t) {
  TensorRecord r;
  r.name = name;
  r.shape = {static_cast<std::uint32_t>(t.rows),
             static_cast<std::uint32_t>(t.cols)};
  r.data.reserve(t.v.size());
  for (const S& x : t.v) r.data.push_back(static_cast<float>(x));
  return r;
}

template <typename S>
inline void from_record(const TensorRecord& r, Tensor<S>& t) {
  if (r.shape.size() != 2 ||
      static_cast<int>(r.shape[0]) != t.rows ||
      static_cast<int>(r.shape[1]) != t.cols)
    throw std::runtime_error("checkpoint: shape mismatch for '" + r.name + "'");
  for (std::size_t i = 0; i < r.data.size(); ++i)
    t.v[i] = static_cast<S>(r.data[i]);
}

// u64 values are split into four 16-bit chunks, each exactly representable
// as f32, so integer state survives the f32 payload format.
inline void push_u64(std::vector<float>& out, std::uint64_t x) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<float>((x >> (16 * i)) & 0xffffULL));
}

inline std::uint64_t pull_u64(const std::vector<float>& in, std::size_t& pos) {
  std::uint64_t x = 0;
  for (int i = 0; i < 4; ++i)
    x |= static_cast<std::uint64_t>(static_cast<std::uint32_t>(in[pos++]))
         << (16 * i);
  return x;
}

inline TensorRecord string_record(const std::string& name,
                                  const std::string& text) {
  TensorRecord r;
  r.name = name;
  r.shape = {static_cast<std::uint32_t>(text.size())};
  r.data.reserve(text.size());
  for (unsigned char ch : text) r.data.push_back(static_cast<float>(ch));
  return r;
}

inline std::string record_string(const TensorRecord& r) {
  std::string s;
  s.reserve(r.data.size());
  for (float f : r.data) s.push_back(static_cast<char>(static_cast<int>(f)));
  return s;
}

}  // namespace repdib
