#pragma once

#include <cmath>
#include <vector>

#include "mtbd/model.hpp"
#include "mtbd/rng.hpp"

namespace mtbd::testing {

// Small random model; depth is unrestricted so oracles stay cheap.
template <typename T = float>
Model<T> small_model(int layers, int width, int heads, int vocab, int context, std::uint64_t seed,
                     double scale = 0.3) {
  ModelConfig c;
  c.layers = layers;
  c.width = width;
  c.heads = heads;
  c.vocab = vocab;
  c.context = context;
  c.seed = seed;
  Model<T> m = init_model<T>(c, DepthCheck::relaxed);
  // Larger weights than the training init so every path carries signal.
  Rng rng(seed ^ 0x5eedULL);
  for (auto& t : m.params.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] += static_cast<T>(rng.normal() * scale);
  return m;
}

inline std::vector<double> random_distribution(Rng& rng, std::size_t n, double sharpness = 3.0) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (auto& x : p) sum += (x = std::exp(sharpness * rng.normal()));
  for (auto& x : p) x /= sum;
  return p;
}

}  // namespace mtbd::testing
