#include <algorithm>
#include <cmath>

#include "eas/search.hpp"

namespace eas {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

double SurrogateModel::score(const ArchitectureSpec& spec) const {
  int conv_depth = 0;
  double width_sum = 0;
  int width_n = 0;
  for (const LayerSpec& l : spec.layers) {
    if (l.kind == LayerKind::Conv) ++conv_depth;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::FC) {
      width_sum += std::log2(static_cast<double>(l.width)) / 10.0;
      ++width_n;
    }
  }
  double depth_term =
      static_cast<double>(conv_depth) / (conv_depth + 6.0);
  double width_term = width_n > 0 ? width_sum / width_n : 0.0;

  uint64_t h = mix_seed(fnv1a(serialize(spec)), cfg.seed);
  double noise = ((h >> 11) * 0x1.0p-53 * 2.0 - 1.0) * cfg.noise_sigma;

  double s = cfg.base + cfg.depth_weight * depth_term +
             cfg.width_weight * width_term + noise;
  return std::clamp(s, 0.0, cfg.max_score);
}

}  // namespace eas
