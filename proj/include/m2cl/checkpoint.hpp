#pragma once

// Binary checkpoint container, all integers and floats little-endian:
//
//   "M2CL" u32 version
//   u32 meta_count  { str key, str value }*
//   u32 param_count { str name, u32 rank, u64 dim*, f64 value* }*
//
// where str = u32 length + bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "m2cl/model.hpp"

namespace m2cl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<double>>> params;

  template <typename T>
  static Checkpoint from_model(const M2Model<T>& model, std::map<std::string, std::string> meta = {}) {
    Checkpoint ck;
    ck.meta = std::move(meta);
    for (const auto& p : model.parameters().items()) ck.params.emplace_back(p.name, p.var.value().template cast<double>());
    return ck;
  }

  /// Copies values into a model with the same parameter table.
  template <typename T>
  void load_into(M2Model<T>& model) const {
    if (params.size() != model.parameters().size())
      throw DataError("checkpoint: parameter count " + std::to_string(params.size()) + " does not match model (" +
                      std::to_string(model.parameters().size()) + ")");
    for (const auto& [name, value] : params) {
      auto* p = model.parameters().find(name);
      if (!p) throw DataError("checkpoint: model has no parameter '" + name + "'");
      if (p->var.shape() != value.shape())
        throw DataError("checkpoint: shape mismatch for '" + name + "': " + shape_str(value.shape()) + " vs " +
                        shape_str(p->var.shape()));
      p->var.mutable_value() = value.template cast<T>();
    }
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError("checkpoint: missing metadata '" + key + "'");
    return it->second;
  }
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  void put(std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(buf, bytes);
  }
  std::ostream& out_;
};

class LeReader {
 public:
  LeReader(std::istream& in, std::string origin) : in_(in), origin_(std::move(origin)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const auto n = u32();
    if (n > (1u << 26)) fail("string length out of range");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) fail("truncated");
    return s;
  }
  [[noreturn]] void fail(const std::string& msg) const { throw DataError("checkpoint: " + origin_ + ": " + msg); }

 private:
  std::uint64_t get(int bytes) {
    unsigned char buf[8];
    in_.read(reinterpret_cast<char*>(buf), bytes);
    if (!in_) fail("truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
  std::string origin_;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  out.write("M2CL", 4);
  detail::LeWriter w(out);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (std::size_t i = 0; i < t.numel(); ++i) w.f64(t[i]);
  }
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot read " + path.string());
  detail::LeReader r(in, path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "M2CL", 4) != 0) r.fail("bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
  Checkpoint ck;
  for (auto n = r.u32(); n > 0; --n) {
    auto k = r.str();
    ck.meta[k] = r.str();
  }
  for (auto n = r.u32(); n > 0; --n) {
    auto name = r.str();
    const auto rank = r.u32();
    if (rank > 8) r.fail("rank out of range for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape_numel(shape) > (std::size_t{1} << 28)) r.fail("tensor too large: '" + name + "'");
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = r.f64();
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return ck;
}

}  // namespace m2cl
