// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace percept {

/// 8-bit RGB PNG; values in [-1, 1] map to [0, 255].
void write_png(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_png(const std::filesystem::path& path);

/// The value a pixel takes after an 8-bit round trip.
inline float quantize8(float v) {
  const float c = std::min(1.0f, std::max(-1.0f, v));
  const long q = std::lround((c + 1.0f) * 127.5f);
  return float(q) / 127.5f - 1.0f;
}

}  // namespace percept
