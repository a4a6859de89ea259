#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "fusionformer/model.hpp"
#include "fusionformer/rng.hpp"
#include "fusionformer/tensor.hpp"

namespace ff::test {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false,
                            double scale = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor::from(std::move(shape), random_values(n, seed, scale), requires_grad);
}

inline bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && same_bits(a.data(), b.data());
}

// T=3, J=3, D=4 with one block per encoder.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.frames = 3;
  c.joints = 3;
  c.dim = 4;
  c.heads = 2;
  c.cte_heads = 2;
  c.spatial_layers = c.temporal_layers = c.ste_layers = c.cte_layers = 1;
  c.refine_hidden = 4;
  return c;
}

}  // namespace ff::test
