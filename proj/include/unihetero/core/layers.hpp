#pragma once

#include <cmath>
#include <string>

#include "unihetero/core/ops.hpp"
#include "unihetero/core/rng.hpp"

namespace unihetero {

template <class T>
Tensor<T> make_parameter(Shape shape, T fill = T(0)) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> make_normal_parameter(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal() * stddev);
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b with W stored as [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when constructed without bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double gain = 1.0)
      : weight(make_normal_parameter<T>({in, out}, gain / std::sqrt(static_cast<double>(in)), rng)) {
    if (with_bias) bias = make_parameter<T>({out});
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> weight;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : weight(make_parameter<T>({dim}, T(1))), bias(make_parameter<T>({dim})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, weight, bias); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace unihetero
