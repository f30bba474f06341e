#pragma once

#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "s2moe/rng.hpp"
#include "s2moe/tensor.hpp"

namespace s2moe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'S', '2', 'M', 'O', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "unsupported element type");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<std::uint8_t> raw;  // little-endian element bytes

  template <class T>
  static StoredTensor from(std::string name, const Shape& shape, std::span<const T> values) {
    StoredTensor s{std::move(name), dtype_of<T>(), shape, {}};
    if (numel(shape) != values.size()) throw ShapeError("stored tensor '" + s.name + "': shape/value mismatch");
    s.raw.resize(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(s.raw.data(), values.data(), s.raw.size());
    return s;
  }

  /// Element values converted to T.
  template <class T>
  std::vector<T> values() const {
    const std::size_t n = numel(shape);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (dtype == DType::f32) {
        float v;
        std::memcpy(&v, raw.data() + i * 4, 4);
        out[i] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, raw.data() + i * 8, 8);
        out[i] = static_cast<T>(v);
      }
    }
    return out;
  }
};

struct RngState {
  std::string name;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
};

struct Checkpoint {
  std::string config;               // canonical run configuration text
  std::vector<std::uint8_t> vocabulary;
  std::uint64_t step = 0;           // completed training steps
  std::uint64_t optimizer_steps = 0;
  std::vector<RngState> rngs;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const RngState* find_rng(std::string_view name) const {
    for (const auto& r : rngs)
      if (r.name == name) return &r;
    return nullptr;
  }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes);
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void put_bytes(std::span<const std::uint8_t> b) { out.insert(out.end(), b.begin(), b.end()); }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    auto b = get_bytes(n);
    return std::string(b.begin(), b.end());
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointError("checkpoint is truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> Checkpoint::encode() const {
  detail::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 8));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(config);
  w.put<std::uint64_t>(vocabulary.size());
  w.put_bytes(vocabulary);
  w.put<std::uint64_t>(step);
  w.put<std::uint64_t>(optimizer_steps);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rngs.size()));
  for (const auto& r : rngs) {
    w.put_string(r.name);
    w.put<std::uint64_t>(r.seed);
    w.put<std::uint64_t>(r.counter);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    w.put_bytes(t.raw);
  }
  return std::move(w.out);
}

inline Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.get_bytes(8);
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("incompatible checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config = r.get_string();
  const auto vocab = r.get_bytes(r.get<std::uint64_t>());
  c.vocabulary.assign(vocab.begin(), vocab.end());
  c.step = r.get<std::uint64_t>();
  c.optimizer_steps = r.get<std::uint64_t>();
  const auto n_rng = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_rng; ++i) {
    RngState s;
    s.name = r.get_string();
    s.seed = r.get<std::uint64_t>();
    s.counter = r.get<std::uint64_t>();
    c.rngs.push_back(std::move(s));
  }
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    StoredTensor t;
    t.name = r.get_string();
    const auto tag = r.get<std::uint8_t>();
    if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64)) {
      throw CheckpointError("tensor '" + t.name + "': unknown dtype tag " + std::to_string(tag));
    }
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("tensor '" + t.name + "': implausible rank " + std::to_string(rank));
    unsigned __int128 count = 1;
    for (std::uint32_t j = 0; j < rank; ++j) {
      t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      count *= t.shape.back();
      if (count > bytes.size()) throw CheckpointError("tensor '" + t.name + "': size exceeds file");
    }
    const auto raw = r.get_bytes(static_cast<std::size_t>(count) * dtype_size(t.dtype));
    t.raw.assign(raw.begin(), raw.end());
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

/// Writes to `path` through a temporary file and a rename, so an existing
/// checkpoint survives a failed write.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = c.encode();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot create '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::remove(tmp.c_str());
      throw CheckpointError("writing '" + tmp + "' failed (disk full?)");
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    const std::string why = std::strerror(errno);
    std::remove(tmp.c_str());
    throw CheckpointError("cannot move checkpoint into '" + path + "': " + why);
  }
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read '" + path + "'");
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::string& path) { return Checkpoint::decode(read_file_bytes(path)); }

/// Copies a stored tensor into `dst`, converting the element type.
template <class T>
void restore_tensor(const Checkpoint& c, const std::string& name, Tensor<T>& dst) {
  const auto* s = c.find(name);
  if (!s) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  if (s->shape != dst.shape()) {
    throw CheckpointError("tensor '" + name + "': checkpoint shape " + to_string(s->shape) + " does not match " +
                          to_string(dst.shape()));
  }
  const auto v = s->values<T>();
  auto out = dst.mutable_data();
  std::copy(v.begin(), v.end(), out.begin());
}

inline void restore_rng(const Checkpoint& c, const std::string& name, RngStream& dst) {
  const auto* s = c.find_rng(name);
  if (!s) throw CheckpointError("checkpoint has no RNG state '" + name + "'");
  dst = RngStream(s->seed, s->counter);
}

}  // namespace s2moe
