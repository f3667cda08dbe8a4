#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "iqa/tensor.hpp"

// Binary PPM (P6) raster I/O, conversions to planar float tensors in [0,1],
// bilinear resampling, and a perceptual heat colormap for overlays.

namespace iqa {

struct ImageU8 {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> rgb;  // interleaved, row-major, 3 bytes per pixel
};

inline ImageU8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw DataError("truncated PPM header: " + path);
    return tok;
  };
  if (next_token() != "P6")
    throw DataError("not a binary PPM (P6) file: " + path);
  ImageU8 img;
  img.w = parse_int(next_token(), "PPM width");
  img.h = parse_int(next_token(), "PPM height");
  int64_t maxval = parse_int(next_token(), "PPM maxval");
  if (img.w <= 0 || img.h <= 0)
    throw DataError("bad PPM dimensions in " + path);
  if (maxval != 255)
    throw DataError("unsupported PPM maxval " + std::to_string(maxval) +
                    " in " + path + " (only 255)");
  img.rgb.resize(static_cast<size_t>(img.h) * img.w * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (static_cast<size_t>(in.gcount()) != img.rgb.size())
    throw DataError("truncated PPM pixel data in " + path);
  return img;
}

inline void write_ppm(const std::string& path, const ImageU8& img) {
  if (static_cast<size_t>(img.h) * img.w * 3 != img.rgb.size())
    throw DataError("image buffer does not match its dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw DataError("write failed: " + path);
}

// (3, H, W) float tensor in [0, 1].
inline Tensor<float> image_to_tensor(const ImageU8& img) {
  auto t = Tensor<float>::zeros({3, img.h, img.w});
  auto d = t.data();
  int64_t plane = img.h * img.w;
  for (int64_t p = 0; p < plane; ++p)
    for (int64_t c = 0; c < 3; ++c)
      d[c * plane + p] = static_cast<float>(img.rgb[p * 3 + c]) / 255.0f;
  return t;
}

inline ImageU8 tensor_to_image(const Tensor<float>& t) {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw ShapeError("tensor_to_image: want (3,H,W), got " +
                     shape_str(t.shape()));
  ImageU8 img;
  img.h = t.dim(1);
  img.w = t.dim(2);
  img.rgb.resize(static_cast<size_t>(img.h) * img.w * 3);
  int64_t plane = img.h * img.w;
  auto d = t.data();
  for (int64_t p = 0; p < plane; ++p)
    for (int64_t c = 0; c < 3; ++c) {
      float v = std::clamp(d[c * plane + p], 0.0f, 1.0f);
      img.rgb[p * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
  return img;
}

// Bilinear resize of a (b, c, h, w) tensor; corner-aligned so source grid
// points map exactly onto their scaled positions. Data-path only (no grad).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  if (x.ndim() != 4) throw ShapeError("bilinear_resize: want (b,c,h,w)");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h <= 0 || out_w <= 0)
    throw ShapeError("bilinear_resize: bad target size");
  auto out = Tensor<T>::zeros({b, c, out_h, out_w});
  auto xd = x.data();
  auto od = out.data();
  double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  for (int64_t n = 0; n < b * c; ++n) {
    const T* src = xd.data() + n * h * w;
    T* dst = od.data() + n * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i) {
      double fy = i * sy;
      int64_t y0 = static_cast<int64_t>(fy);
      int64_t y1 = std::min(y0 + 1, h - 1);
      double wy = fy - y0;
      for (int64_t j = 0; j < out_w; ++j) {
        double fx = j * sx;
        int64_t x0 = static_cast<int64_t>(fx);
        int64_t x1 = std::min(x0 + 1, w - 1);
        double wx = fx - x0;
        double v00 = src[y0 * w + x0], v01 = src[y0 * w + x1];
        double v10 = src[y1 * w + x0], v11 = src[y1 * w + x1];
        dst[i * out_w + j] =
            static_cast<T>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                           wy * ((1 - wx) * v10 + wx * v11));
      }
    }
  }
  return out;
}

// Dark-blue -> green -> yellow perceptual ramp, linearly interpolated.
inline std::array<uint8_t, 3> heat_color(double t) {
  static constexpr double anchors[9][3] = {
      {0.267, 0.005, 0.329}, {0.283, 0.141, 0.458}, {0.254, 0.265, 0.530},
      {0.207, 0.372, 0.553}, {0.164, 0.471, 0.558}, {0.128, 0.567, 0.551},
      {0.135, 0.659, 0.518}, {0.267, 0.749, 0.441}, {0.993, 0.906, 0.144}};
  t = std::clamp(t, 0.0, 1.0);
  double pos = t * 8.0;
  int lo = std::min(static_cast<int>(pos), 7);
  double f = pos - lo;
  std::array<uint8_t, 3> rgb;
  for (int c = 0; c < 3; ++c) {
    double v = anchors[lo][c] * (1 - f) + anchors[lo + 1][c] * f;
    rgb[c] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return rgb;
}

// Alpha-blends the heat ramp over the base image; heat is row-major (h*w).
inline ImageU8 heat_overlay(const ImageU8& base, const std::vector<float>& heat,
                            double alpha = 0.6) {
  if (static_cast<int64_t>(heat.size()) != base.h * base.w)
    throw ShapeError("heat_overlay: heat size does not match image");
  ImageU8 out = base;
  for (int64_t p = 0; p < base.h * base.w; ++p) {
    auto hc = heat_color(heat[p]);
    for (int c = 0; c < 3; ++c) {
      double blended = alpha * hc[c] + (1 - alpha) * base.rgb[p * 3 + c];
      out.rgb[p * 3 + c] = static_cast<uint8_t>(std::lround(blended));
    }
  }
  return out;
}

}  // namespace iqa
