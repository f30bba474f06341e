#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "s2moe/config.hpp"
#include "s2moe/sample_text.hpp"

namespace s2moe {

enum class Split { train = 0, val = 1, test = 2 };

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

/// Byte vocabulary: the distinct bytes of the training split in ascending
/// order, followed by one reserved unknown id.
class ByteVocabulary {
 public:
  ByteVocabulary() { ids_.fill(-1); }

  static ByteVocabulary from_bytes(std::span<const std::uint8_t> bytes) {
    ByteVocabulary v;
    std::array<bool, 256> seen{};
    for (auto b : bytes) seen[b] = true;
    for (std::size_t b = 0; b < 256; ++b) {
      if (!seen[b]) continue;
      v.ids_[b] = static_cast<std::int32_t>(v.bytes_.size());
      v.bytes_.push_back(static_cast<std::uint8_t>(b));
    }
    return v;
  }

  /// Rebuilds a vocabulary from its ascending byte list.
  static ByteVocabulary from_alphabet(std::span<const std::uint8_t> alphabet) {
    ByteVocabulary v;
    for (std::size_t i = 0; i < alphabet.size(); ++i) {
      if (i > 0 && alphabet[i] <= alphabet[i - 1]) throw std::invalid_argument("vocabulary bytes must ascend");
      v.ids_[alphabet[i]] = static_cast<std::int32_t>(i);
      v.bytes_.push_back(alphabet[i]);
    }
    return v;
  }

  std::size_t size() const { return bytes_.size() + 1; }
  std::int32_t unk() const { return static_cast<std::int32_t>(bytes_.size()); }
  std::int32_t id(std::uint8_t b) const { return ids_[b] < 0 ? unk() : ids_[b]; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  std::vector<std::int32_t> encode(std::span<const std::uint8_t> bytes) const {
    std::vector<std::int32_t> out(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = id(bytes[i]);
    return out;
  }

 private:
  std::array<std::int32_t, 256> ids_;
  std::vector<std::uint8_t> bytes_;
};

/// Start offsets {0, b1, b2, n} of the train, val and test splits:
/// b1 = floor(n * train), b2 = floor(n * (train + val)).
inline std::array<std::size_t, 4> split_boundaries(std::size_t n, const SplitFractions& f) {
  f.validate();
  using u128 = unsigned __int128;
  const auto b1 = static_cast<std::size_t>(static_cast<u128>(n) * f.train_ppm / 1000000u);
  const auto b2 = static_cast<std::size_t>(static_cast<u128>(n) * (f.train_ppm + f.val_ppm) / 1000000u);
  return {0, b1, b2, n};
}

struct Corpus {
  ByteVocabulary vocab;
  std::array<std::vector<std::int32_t>, 3> tokens;
  std::array<std::size_t, 4> boundaries{};
  std::size_t seq_len = 0;

  const std::vector<std::int32_t>& split(Split s) const { return tokens[static_cast<std::size_t>(s)]; }

  /// Number of contiguous non-overlapping seq_len windows in a split.
  std::size_t sample_count(Split s) const { return split(s).size() / seq_len; }

  std::span<const std::int32_t> sample(Split s, std::size_t i) const {
    if (i >= sample_count(s)) throw std::out_of_range("sample index " + std::to_string(i) + " out of range");
    return std::span<const std::int32_t>(split(s)).subspan(i * seq_len, seq_len);
  }
};

/// Splits and encodes `bytes`. The vocabulary is built from the train split
/// unless `fixed` is given.
inline Corpus ingest_bytes(std::span<const std::uint8_t> bytes, const SplitFractions& fractions, std::size_t seq_len,
                           const ByteVocabulary* fixed = nullptr) {
  if (bytes.empty()) throw std::invalid_argument("corpus is empty");
  if (seq_len == 0) throw std::invalid_argument("sample length must be positive");
  Corpus c;
  c.seq_len = seq_len;
  c.boundaries = split_boundaries(bytes.size(), fractions);
  c.vocab = fixed ? *fixed : ByteVocabulary::from_bytes(bytes.subspan(0, c.boundaries[1]));
  for (std::size_t s = 0; s < 3; ++s) {
    c.tokens[s] = c.vocab.encode(bytes.subspan(c.boundaries[s], c.boundaries[s + 1] - c.boundaries[s]));
  }
  return c;
}

/// Reads the whole file. The pseudo-path "builtin:<bytes>" yields the
/// generated sample text of that length instead.
inline std::vector<std::uint8_t> read_corpus_bytes(const std::string& path) {
  constexpr std::string_view builtin = "builtin:";
  if (path.rfind(builtin, 0) == 0) {
    const auto n = detail::parse_unsigned<std::size_t>("corpus", path.substr(builtin.size()));
    const auto text = generate_sample_text(n);
    return {text.begin(), text.end()};
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error while reading corpus '" + path + "'");
  return bytes;
}

inline Corpus ingest_corpus(const std::string& path, const SplitFractions& fractions, std::size_t seq_len,
                            const ByteVocabulary* fixed = nullptr) {
  const auto bytes = read_corpus_bytes(path);
  if (bytes.empty()) throw std::invalid_argument("corpus '" + path + "' is empty");
  return ingest_bytes(bytes, fractions, seq_len, fixed);
}

}  // namespace s2moe
