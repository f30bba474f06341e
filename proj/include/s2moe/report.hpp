#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace s2moe {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class Seq>
std::string format_list(const Seq& values) {
  std::string s;
  bool first = true;
  for (const auto& v : values) {
    if (!first) s += ' ';
    first = false;
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      s += format_double(static_cast<double>(v));
    } else {
      s += std::to_string(v);
    }
  }
  return s;
}

/// Human-readable record: a "[section]" header followed by key=value lines.
class ReportWriter {
 public:
  explicit ReportWriter(std::string_view section) { out_ << '[' << section << "]\n"; }

  ReportWriter& field(std::string_view key, std::string_view value) {
    out_ << key << '=' << value << '\n';
    return *this;
  }
  ReportWriter& field(std::string_view key, double value) { return field(key, format_double(value)); }
  ReportWriter& field(std::string_view key, std::uint64_t value) { return field(key, std::to_string(value)); }
  ReportWriter& field(std::string_view key, std::size_t value, int) { return field(key, std::to_string(value)); }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

}  // namespace s2moe
