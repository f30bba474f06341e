#pragma once

#include <map>
#include <string>
#include <vector>

#include "s2moe/s2moe.hpp"

namespace testing_support {

using s2moe::RngStream;
using s2moe::Shape;
using s2moe::Tensor;

template <class T = double>
Tensor<T> random_tensor(const Shape& shape, RngStream& rng, double sd = 1.0, bool requires_grad = false) {
  std::vector<T> v(s2moe::numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.normal(0.0, sd));
  return Tensor<T>::from(shape, std::move(v), requires_grad);
}

template <class T>
std::vector<double> to_vec(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

template <class T>
std::vector<double> row(const Tensor<T>& t, std::size_t r) {
  const std::size_t d = t.last_dim();
  return std::vector<double>(t.data().begin() + r * d, t.data().begin() + (r + 1) * d);
}

template <class T>
std::map<std::string, std::vector<double>> weight_map(const s2moe::NamedTensors<T>& params) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, p] : params) out[name] = to_vec(p);
  return out;
}

/// Overwrites every parameter with N(0, sd) draws (bigger than the default
/// init so that gradients and routing margins are well conditioned).
template <class T>
void randomize(const s2moe::NamedTensors<T>& params, RngStream& rng, double sd) {
  for (const auto& [name, p] : params) {
    auto t = p;
    for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, sd));
  }
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : std::numeric_limits<double>::infinity();
}

inline s2moe::MoeLayerConfig layer_config(std::size_t d, std::size_t n, std::size_t h, bool stochastic,
                                          double init_std = 0.3) {
  s2moe::MoeLayerConfig c;
  c.router.experts = n;
  c.router.d_model = d;
  c.router.init_std = init_std;
  c.d_hidden = h;
  c.stochastic = stochastic;
  c.init_std = init_std;
  return c;
}

}  // namespace testing_support
