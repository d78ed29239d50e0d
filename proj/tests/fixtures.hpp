#pragma once

#include <vector>

#include "mlcl/model.hpp"
#include "mlcl/world.hpp"

namespace testutil {

inline const mlcl::TraceSet& small_traces() {
  static const mlcl::TraceSet tr = [] {
    const auto net = mlcl::generate_grid_network(4, 4, 120, 12);
    return mlcl::simulate_traces(net, 24, 200, 1, 17);
  }();
  return tr;
}

inline std::vector<mlcl::Episode> small_episodes(int count, int group, int window, std::uint64_t seed,
                                                 const mlcl::NoiseConfig& noise = {}) {
  std::vector<mlcl::Episode> out;
  for (int i = 0; i < count; ++i)
    out.push_back(mlcl::make_episode(small_traces(), group, window, noise, mlcl::stream_key(seed, "fixture", i)));
  return out;
}

/// Every tensor entry (biases included) uniform in (-a, a).
inline mlcl::MlclParams random_params(const mlcl::MlclDims& dims, std::uint64_t seed, double a = 0.5) {
  auto p = mlcl::MlclParams::init(dims, seed);
  mlcl::Rng rng(mlcl::stream_key(seed, "fixture-params"));
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    for (mlcl::tc::Index k = 0; k < p.tensors[i].size(); ++k) p.tensors[i].data()[k] = rng.uniform(-a, a);
  return p;
}

inline double max_estimate_diff(const mlcl::EstimateGrid& a, const mlcl::EstimateGrid& b) {
  double m = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t v = 0; v < a[t].size(); ++v)
      m = std::max({m, std::abs(a[t][v].x - b[t][v].x), std::abs(a[t][v].y - b[t][v].y)});
  return m;
}

}  // namespace testutil
