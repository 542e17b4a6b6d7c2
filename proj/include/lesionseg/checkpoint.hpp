#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lesionseg/tensor.hpp"

namespace lesionseg {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Ordered named-tensor collection; the unit of persistence and transfer
// learning. Order is the graph topological order and is preserved on disk.
class Checkpoint {
 public:
  std::map<std::string, std::string> metadata;  // arch, seed, epoch, metric

  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw ConfigError("checkpoint: duplicate tensor name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("checkpoint: missing tensor " + name);
    return entries_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("checkpoint: missing tensor " + name);
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return ~crc;
}

struct ByteWriter {
  std::vector<std::uint8_t> buf;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
};

struct ByteReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw FormatError("checkpoint: truncated at byte offset " + std::to_string(pos));
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint16_t u16() {
    std::uint16_t v;
    raw(&v, 2);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
};

}  // namespace detail

// Format (little-endian): magic "SEGW", u32 version=1, u32 metadata length +
// UTF-8 key=value lines (newlines and backslashes inside values are escaped
// as \n and \\ so multi-line values survive), u32 tensor count; per tensor
// u16 name length, name,
// u8 dtype (0 = f32), u8 rank, u32 extents[rank], raw row-major payload;
// trailing u32 CRC32 of all preceding bytes.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  detail::ByteWriter w;
  w.raw("SEGW", 4);
  w.u32(1);
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) {
    meta += k + "=";
    for (char c : v) {
      if (c == '\\')
        meta += "\\\\";
      else if (c == '\n')
        meta += "\\n";
      else
        meta += c;
    }
    meta += "\n";
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, t] : ckpt.entries()) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int e : t.shape) w.u32(static_cast<std::uint32_t>(e));
    w.raw(t.data.data(), t.data.size() * sizeof(float));
  }
  w.u32(detail::crc32(w.buf.data(), w.buf.size()));

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!os) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 8) throw FormatError("checkpoint: truncated at byte offset 0");

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  if (detail::crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw FormatError("checkpoint: CRC mismatch at byte offset " +
                      std::to_string(buf.size() - 4));
  buf.resize(buf.size() - 4);

  detail::ByteReader r{buf};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "SEGW", 4) != 0)
    throw FormatError("checkpoint: bad magic at byte offset 0");
  std::uint32_t version = r.u32();
  if (version != 1)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " at byte offset 4");

  Checkpoint ckpt;
  std::uint32_t meta_len = r.u32();
  r.need(meta_len);
  std::string meta(reinterpret_cast<const char*>(buf.data() + r.pos), meta_len);
  r.pos += meta_len;
  std::istringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string value;
    for (std::size_t i = eq + 1; i < line.size(); ++i) {
      if (line[i] == '\\' && i + 1 < line.size()) {
        value += line[i + 1] == 'n' ? '\n' : line[i + 1];
        ++i;
      } else {
        value += line[i];
      }
    }
    ckpt.metadata[line.substr(0, eq)] = value;
  }

  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), name_len);
    r.pos += name_len;
    std::uint8_t dtype = r.u8();
    if (dtype != 0)
      throw FormatError("checkpoint: unknown dtype at byte offset " + std::to_string(r.pos - 1));
    std::uint8_t rank = r.u8();
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(r.u32());
    Tensor t(shape);
    r.raw(t.data.data(), t.data.size() * sizeof(float));
    ckpt.add(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace lesionseg
