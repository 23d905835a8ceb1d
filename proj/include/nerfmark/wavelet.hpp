#pragma once

// Single-level orthonormal Haar transform on batched multi-channel images.
//
// dwt_haar maps (B, C, H, W) -> (B, 4C, H/2, W/2) with subband blocks ordered
// [LL | LH | HL | HH]; iwt_haar is its exact inverse. For each 2x2 block
// (a b; c d):
//   LL = (a+b+c+d)/2   LH = (a-b+c-d)/2
//   HL = (a+b-c-d)/2   HH = (a-b-c+d)/2
// The 1/2 scaling makes the transform orthonormal, so energy is preserved
// and the adjoint used in the backward pass equals the inverse.

#include "nerfmark/tensor.hpp"

namespace nerfmark {

namespace detail {

inline void haar_analysis(const float* src, float* dst, int batch, int ch, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t sub = static_cast<std::size_t>(h2) * w2;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      const float* in = src + (static_cast<std::size_t>(b) * ch + c) * plane;
      float* ll = dst + (static_cast<std::size_t>(b) * 4 * ch + c) * sub;
      float* lh = dst + (static_cast<std::size_t>(b) * 4 * ch + ch + c) * sub;
      float* hl = dst + (static_cast<std::size_t>(b) * 4 * ch + 2 * ch + c) * sub;
      float* hh = dst + (static_cast<std::size_t>(b) * 4 * ch + 3 * ch + c) * sub;
      for (int y = 0; y < h2; ++y) {
        const float* r0 = in + static_cast<std::size_t>(2 * y) * w;
        const float* r1 = r0 + w;
        for (int x = 0; x < w2; ++x) {
          const float a = r0[2 * x], bb = r0[2 * x + 1];
          const float cc = r1[2 * x], dd = r1[2 * x + 1];
          const std::size_t i = static_cast<std::size_t>(y) * w2 + x;
          ll[i] = 0.5f * (a + bb + cc + dd);
          lh[i] = 0.5f * (a - bb + cc - dd);
          hl[i] = 0.5f * (a + bb - cc - dd);
          hh[i] = 0.5f * (a - bb - cc + dd);
        }
      }
    }
  }
}

inline void haar_synthesis(const float* src, float* dst, int batch, int ch, int h2, int w2) {
  const int h = 2 * h2, w = 2 * w2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t sub = static_cast<std::size_t>(h2) * w2;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      float* out = dst + (static_cast<std::size_t>(b) * ch + c) * plane;
      const float* ll = src + (static_cast<std::size_t>(b) * 4 * ch + c) * sub;
      const float* lh = src + (static_cast<std::size_t>(b) * 4 * ch + ch + c) * sub;
      const float* hl = src + (static_cast<std::size_t>(b) * 4 * ch + 2 * ch + c) * sub;
      const float* hh = src + (static_cast<std::size_t>(b) * 4 * ch + 3 * ch + c) * sub;
      for (int y = 0; y < h2; ++y) {
        float* r0 = out + static_cast<std::size_t>(2 * y) * w;
        float* r1 = r0 + w;
        for (int x = 0; x < w2; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w2 + x;
          const float s = ll[i], dh = lh[i], dv = hl[i], dd = hh[i];
          r0[2 * x] = 0.5f * (s + dh + dv + dd);
          r0[2 * x + 1] = 0.5f * (s - dh + dv - dd);
          r1[2 * x] = 0.5f * (s + dh - dv - dd);
          r1[2 * x + 1] = 0.5f * (s - dh - dv + dd);
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor dwt_haar(const Tensor& image) {
  if (image.rank() != 4) detail::fail_op("dwt_haar", "expects (B,C,H,W), got " + detail::shape_str(image.shape()));
  const int b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    detail::fail_op("dwt_haar", "spatial extents must be even, got " + detail::shape_str(image.shape()));
  Tensor out({b, 4 * c, h / 2, w / 2});
  detail::haar_analysis(image.ptr(), out.ptr(), b, c, h, w);

  GradTape* tape = detail::merge_tapes({&image}, "dwt_haar");
  if (!tape) return out;
  const int node = image.node();
  return tape->emit(std::move(out), {node},
                    [node, b, c, h, w](const Tensor& g, GradTape::Accum& sink) {
                      Tensor gi({b, c, h, w});
                      detail::haar_synthesis(g.ptr(), gi.ptr(), b, c, h / 2, w / 2);
                      sink.add(node, gi);
                    });
}

inline Tensor iwt_haar(const Tensor& subbands) {
  if (subbands.rank() != 4)
    detail::fail_op("iwt_haar", "expects (B,4C,H,W), got " + detail::shape_str(subbands.shape()));
  const int b = subbands.dim(0), c4 = subbands.dim(1), h2 = subbands.dim(2), w2 = subbands.dim(3);
  if (c4 % 4 != 0)
    detail::fail_op("iwt_haar", "channel count must be divisible by 4, got " +
                                    detail::shape_str(subbands.shape()));
  const int c = c4 / 4;
  Tensor out({b, c, 2 * h2, 2 * w2});
  detail::haar_synthesis(subbands.ptr(), out.ptr(), b, c, h2, w2);

  GradTape* tape = detail::merge_tapes({&subbands}, "iwt_haar");
  if (!tape) return out;
  const int node = subbands.node();
  return tape->emit(std::move(out), {node},
                    [node, b, c, h2, w2](const Tensor& g, GradTape::Accum& sink) {
                      Tensor gs({b, 4 * c, h2, w2});
                      detail::haar_analysis(g.ptr(), gs.ptr(), b, c, 2 * h2, 2 * w2);
                      sink.add(node, gs);
                    });
}

}  // namespace nerfmark
