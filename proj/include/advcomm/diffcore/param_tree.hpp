#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "advcomm/diffcore/tensor.hpp"

namespace advcomm::diffcore {

/// Named parameter tensors keyed by a dotted path such as "actor.coop.gnn.tap.k2".
/// Iteration is lexicographic by path, which keeps every traversal deterministic.
template <typename T>
class ParamTree {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void set(const std::string& path, Tensor<T> value) { entries_[path] = std::move(value); }

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  Tensor<T>& at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("param tree: no entry '" + path + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("param tree: no entry '" + path + "'");
    return it->second;
  }

  void erase(const std::string& path) { entries_.erase(path); }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  /// Entries whose path starts with `prefix`, keeping full paths.
  ParamTree subtree(const std::string& prefix) const {
    ParamTree out;
    for (auto it = entries_.lower_bound(prefix);
         it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
      out.entries_.insert(*it);
    }
    return out;
  }

  /// Copies every entry of `other` into this tree, overwriting duplicates.
  void merge(const ParamTree& other) {
    for (const auto& [k, v] : other.entries_) entries_[k] = v;
  }

  ParamTree zeros_like() const {
    ParamTree out;
    for (const auto& [k, v] : entries_) out.entries_.emplace(k, Tensor<T>(v.shape()));
    return out;
  }

  bool same_structure(const ParamTree& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    }
    return true;
  }

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& [k, v] : entries_) {
      for (T x : v.data()) acc += static_cast<double>(x) * static_cast<double>(x);
    }
    return acc;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : entries_) n += v.size();
    return n;
  }

  template <typename U>
  ParamTree<U> cast() const {
    ParamTree<U> out;
    for (const auto& [k, v] : entries_) out.set(k, v.template cast<U>());
    return out;
  }

  bool operator==(const ParamTree& other) const { return entries_ == other.entries_; }

 private:
  Map entries_;
};

// Checkpoint layout, all integers unsigned 32-bit little-endian:
//   "ADVC" | version | entry count
//   per entry: path length | UTF-8 path | rank | dims[rank] | float32 payload
inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'V', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
  std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& os, const ParamTree<T>& tree) {
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(tree.size()));
  for (const auto& [path, tensor] : tree) {
    detail::put_u32(os, static_cast<std::uint32_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : tensor.data()) detail::put_f32(os, static_cast<float>(v));
  }
}

template <typename T>
ParamTree<T> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const auto version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = detail::get_u32(is);
  ParamTree<T> tree;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = detail::get_u32(is);
    std::string path(len, '\0');
    if (!is.read(path.data(), len)) throw std::runtime_error("checkpoint: truncated path");
    const auto rank = detail::get_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(is);
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(detail::get_f32(is));
    tree.set(path, std::move(t));
  }
  return tree;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& file, const ParamTree<T>& tree) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + file.string());
  write_checkpoint(os, tree);
}

template <typename T>
ParamTree<T> load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + file.string());
  return read_checkpoint<T>(is);
}

}  // namespace advcomm::diffcore
