#pragma once

// Image conventions shared across the library: float images live in [0, 1]
// with shape (C, H, W); the 8-bit boundary quantizes with round-half-up.

#include <cstdint>
#include <vector>

#include "nerfmark/tensor.hpp"

namespace nerfmark {

inline std::uint8_t quantize_u8(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(255.0f * c + 0.5f);
}

inline std::vector<std::uint8_t> quantize_image(const Tensor& t) {
  std::vector<std::uint8_t> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = quantize_u8(t[i]);
  return out;
}

inline float dequantize_u8(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

}  // namespace nerfmark
