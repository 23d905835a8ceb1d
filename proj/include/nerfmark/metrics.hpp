#pragma once

// Training losses for the coupling network and the image quality metrics
// used to report embedding/extraction fidelity.
//
// Losses run on float [0, 1] images and stay differentiable through the
// tensor ops. Metrics quantize both inputs to 8-bit (MAX = 255) first and
// compute their statistics globally over the image.

#include <cmath>
#include <limits>
#include <vector>

#include "nerfmark/image.hpp"
#include "nerfmark/tensor.hpp"
#include "nerfmark/wavelet.hpp"

namespace nerfmark {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class TrainPhase { kPretrain, kFull };

struct LossWeights {
  float lambda1 = 5.0f;
  float lambda2 = 0.5f;
  float lambda3 = 1.0f;
  TrainPhase phase = TrainPhase::kFull;

  // The pretrain phase drops the low-frequency constraint entirely.
  float effective_lambda2() const { return phase == TrainPhase::kPretrain ? 0.0f : lambda2; }
};

// Squared L2 distance summed over all elements (and the batch).
inline Tensor loss_emb(const Tensor& watermarked, const Tensor& cover) {
  if (watermarked.shape() != cover.shape())
    detail::fail_shapes("loss_emb", "shape mismatch", watermarked.shape(), cover.shape());
  Tensor diff = sub(watermarked, cover);
  return sum(mul(diff, diff));
}

// Squared L2 distance between the LL subbands of two image batches.
inline Tensor loss_lowf(const Tensor& cover, const Tensor& watermarked) {
  if (cover.shape() != watermarked.shape())
    detail::fail_shapes("loss_lowf", "shape mismatch", cover.shape(), watermarked.shape());
  if (cover.rank() != 4)
    detail::fail_op("loss_lowf", "expects (B,C,H,W), got " + detail::shape_str(cover.shape()));
  const int ch = cover.dim(1);
  Tensor ll_a = slice_ch(dwt_haar(cover), 0, ch);
  Tensor ll_b = slice_ch(dwt_haar(watermarked), 0, ch);
  Tensor diff = sub(ll_a, ll_b);
  return sum(mul(diff, diff));
}

// Expected squared L2 distance between recovered and embedded watermarks,
// estimated over the batch's z draws.
inline Tensor loss_ext(const std::vector<Tensor>& recovered, const Tensor& watermark) {
  if (recovered.empty()) detail::fail_op("loss_ext", "no recovered samples");
  Tensor acc;
  for (const Tensor& r : recovered) {
    Tensor one = loss_emb(r, watermark);
    acc = acc.size() == 0 ? one : add(acc, one);
  }
  return scale(acc, 1.0f / static_cast<float>(recovered.size()));
}

inline Tensor loss_ext(const Tensor& recovered, const Tensor& watermark) {
  return loss_ext(std::vector<Tensor>{recovered}, watermark);
}

struct LossParts {
  Tensor emb;
  Tensor lowf;
  Tensor ext;
};

inline Tensor loss_total(const LossParts& parts, const LossWeights& weights) {
  Tensor total = scale(parts.emb, weights.lambda1);
  total = add(total, scale(parts.lowf, weights.effective_lambda2()));
  total = add(total, scale(parts.ext, weights.lambda3));
  return total;
}

// ---------------------------------------------------------------------------
// Metrics (8-bit quantized, MAX = 255)
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail_shapes(op, "shape mismatch", a.shape(), b.shape());
  if (a.size() == 0) fail_op(op, "empty image");
}

inline double quantized_mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(quantize_u8(a[i])) - quantize_u8(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace detail

inline double psnr(const Tensor& a, const Tensor& b, double max_value = 255.0) {
  detail::require_same_shape("psnr", a, b);
  const double mse = detail::quantized_mse(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / mse);
}

inline double ssim(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("ssim", a, b);
  const double l_range = 255.0;
  const double c1 = (0.01 * l_range) * (0.01 * l_range);
  const double c2 = (0.03 * l_range) * (0.03 * l_range);
  const double c3 = c2 / 2.0;

  const std::size_t n = a.size();
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += quantize_u8(a[i]);
    sy += quantize_u8(b[i]);
  }
  const double mx = sx / static_cast<double>(n);
  const double my = sy / static_cast<double>(n);
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = quantize_u8(a[i]) - mx;
    const double dy = quantize_u8(b[i]) - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= static_cast<double>(n);
  vy /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  const double sigx = std::sqrt(vx);
  const double sigy = std::sqrt(vy);

  const double luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
  const double contrast = (2.0 * sigx * sigy + c2) / (vx + vy + c2);
  const double structure = (cov + c3) / (sigx * sigy + c3);
  return luminance * contrast * structure;
}

inline double rmse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("rmse", a, b);
  return std::sqrt(detail::quantized_mse(a, b));
}

inline double mae(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mae", a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += std::fabs(static_cast<double>(quantize_u8(a[i])) - quantize_u8(b[i]));
  return acc / static_cast<double>(a.size());
}

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

inline MetricReport compute_metrics(const Tensor& a, const Tensor& b) {
  return MetricReport{psnr(a, b), ssim(a, b), rmse(a, b), mae(a, b)};
}

}  // namespace nerfmark
