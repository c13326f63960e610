#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "aiap/tensor.hpp"

namespace aiap {

// Plain RGB raster, channel-first (c,h,w), values in [0,1].
struct ImageF {
  int c = 0, h = 0, w = 0;
  std::vector<float> data;

  ImageF() = default;
  ImageF(int c_, int h_, int w_, float fill = 0.f)
      : c(c_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

  float& at(int ch, int y, int x) {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  float at(int ch, int y, int x) const {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

ImageF read_png(const std::string& path);
void write_png(const std::string& path, const ImageF& img);

// Bilinear resample to (oh, ow); same-size input is copied verbatim.
inline ImageF resize_bilinear(const ImageF& src, int oh, int ow) {
  if (src.h == oh && src.w == ow) return src;
  ImageF dst(src.c, oh, ow);
  const double sy = static_cast<double>(src.h) / oh;
  const double sx = static_cast<double>(src.w) / ow;
  for (int ch = 0; ch < src.c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      const double fy = std::min((y + 0.5) * sy - 0.5, static_cast<double>(src.h - 1));
      const int y0 = std::max(0, static_cast<int>(std::floor(fy)));
      const int y1 = std::min(src.h - 1, y0 + 1);
      const double wy = std::max(0.0, fy - y0);
      for (int x = 0; x < ow; ++x) {
        const double fx = std::min((x + 0.5) * sx - 0.5, static_cast<double>(src.w - 1));
        const int x0 = std::max(0, static_cast<int>(std::floor(fx)));
        const int x1 = std::min(src.w - 1, x0 + 1);
        const double wx = std::max(0.0, fx - x0);
        const double v = (1 - wy) * ((1 - wx) * src.at(ch, y0, x0) + wx * src.at(ch, y0, x1)) +
                         wy * ((1 - wx) * src.at(ch, y1, x0) + wx * src.at(ch, y1, x1));
        dst.at(ch, y, x) = static_cast<float>(v);
      }
    }
  }
  return dst;
}

inline ImageF crop(const ImageF& src, int x, int y, int w, int h) {
  ImageF dst(src.c, h, w);
  for (int ch = 0; ch < src.c; ++ch)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) dst.at(ch, yy, xx) = src.at(ch, y + yy, x + xx);
  return dst;
}

template <typename Real>
TensorT<Real> to_tensor(const ImageF& img) {
  std::vector<Real> v(img.data.begin(), img.data.end());
  return TensorT<Real>::from({img.c, img.h, img.w}, std::move(v));
}

template <typename Real>
ImageF to_image(const TensorT<Real>& t) {
  if (t.rank() != 3) throw ShapeError("to_image expects (C,H,W), got " + shape_str(t.shape()));
  ImageF img(t.shape()[0], t.shape()[1], t.shape()[2]);
  auto vals = t.values();
  for (std::int64_t i = 0; i < t.numel(); ++i)
    img.data[static_cast<std::size_t>(i)] = static_cast<float>(vals[static_cast<std::size_t>(i)]);
  return img;
}

inline double mean_abs_diff(const ImageF& a, const ImageF& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(double(a.data[i]) - b.data[i]);
  return s / a.data.size();
}

}  // namespace aiap
