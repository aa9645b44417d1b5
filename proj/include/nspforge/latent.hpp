#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "nspforge/errors.hpp"

namespace nspforge {

// Dense rank-3 latent tensor, row-major (frame, row, col). T is 1 for image
// records, the world frame count for video records.
struct LatentVideo {
  int t = 0, h = 0, w = 0;
  std::vector<double> data;

  LatentVideo() = default;
  LatentVideo(int t_, int h_, int w_)
      : t(t_), h(h_), w(w_), data(static_cast<size_t>(t_) * h_ * w_, 0.0) {
    if (t_ < 1 || h_ < 1 || w_ < 1)
      throw ShapeError("latent dims must be positive");
  }

  size_t numel() const { return data.size(); }
  size_t frame_size() const { return static_cast<size_t>(h) * w; }

  double& at(int f, int y, int x) {
    return data[(static_cast<size_t>(f) * h + y) * w + x];
  }
  double at(int f, int y, int x) const {
    return data[(static_cast<size_t>(f) * h + y) * w + x];
  }

  const double* frame(int f) const { return data.data() + f * frame_size(); }
  double* frame(int f) { return data.data() + f * frame_size(); }

  bool same_shape(const LatentVideo& o) const {
    return t == o.t && h == o.h && w == o.w;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double squared_distance(const LatentVideo& a, const LatentVideo& b) {
  if (!a.same_shape(b)) throw ShapeError("squared_distance: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace nspforge
