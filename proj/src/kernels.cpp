#include "fedpull/kernels.hpp"

namespace fedpull::kernels {

namespace {

inline float weighted_element(std::span<const std::span<const float>> inputs,
                              std::span<const double> weights, std::size_t e) {
  double acc = 0.0;
  for (std::size_t c = 0; c < inputs.size(); ++c)
    acc += weights[c] * static_cast<double>(inputs[c][e]);
  return static_cast<float>(acc);
}

}  // namespace

void serial::weighted_sum(std::span<const std::span<const float>> inputs,
                          std::span<const double> weights,
                          std::span<float> out) {
  for (std::size_t e = 0; e < out.size(); ++e)
    out[e] = weighted_element(inputs, weights, e);
}

void omp::weighted_sum(std::span<const std::span<const float>> inputs,
                       std::span<const double> weights, std::span<float> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::ptrdiff_t e = 0; e < n; ++e)
    out[static_cast<std::size_t>(e)] =
        weighted_element(inputs, weights, static_cast<std::size_t>(e));
}

}  // namespace fedpull::kernels
