#pragma once

// The invertible watermark network: a stack of coupling blocks operating in
// the Haar wavelet domain. The forward pass embeds a watermark image into a
// cover image; the algebraically exact inverse pass extracts it again with
// the same parameters.
//
// Block l maps (I, M) -> (I', M'):
//   I' = I + f(M)
//   M' = M * exp(clamp(sigma(r(I')))) + y(I')
// with sigma a leaky rectifier (slope 0.01) and the exponent clamped to
// +-exp_clamp for numerical survivability. f, r, y are dense convolutional
// blocks of 7 layers whose final layer is zero-initialized, so a fresh stack
// is the identity map.

#include <string>
#include <utility>
#include <vector>

#include "nerfmark/rng.hpp"
#include "nerfmark/tensor.hpp"
#include "nerfmark/wavelet.hpp"

namespace nerfmark {

struct InnConfig {
  int blocks = 8;
  int growth = 16;              // dense-block growth width
  float sigma_slope = 0.01f;    // leaky slope of the coupling activation
  float exp_clamp = 5.0f;       // exponent clamp bound
};

namespace detail {

constexpr float kDenseSlope = 0.2f;  // activation between dense-block layers
constexpr int kDenseLayers = 7;

}  // namespace detail

// Seven 3x3 conv layers with dense connectivity; maps `channels` to
// `channels` feature maps at unchanged spatial size.
class DenseBlock {
 public:
  DenseBlock() = default;

  DenseBlock(int channels, int growth, Rng& rng) : channels_(channels), growth_(growth) {
    for (int layer = 0; layer < detail::kDenseLayers; ++layer) {
      const int cin = channels + layer * growth;
      const int cout = layer + 1 < detail::kDenseLayers ? growth : channels;
      const bool last = layer + 1 == detail::kDenseLayers;
      const float stddev = last ? 0.0f : detail::kaiming_std(cin * 9, detail::kDenseSlope);
      weights_.push_back(randn({cout, cin, 3, 3}, rng, stddev));
      biases_.push_back(Tensor::zeros({cout}));
    }
  }

  Tensor forward(const Tensor& x) const {
    std::vector<Tensor> features{x};
    for (int layer = 0; layer + 1 < detail::kDenseLayers; ++layer) {
      Tensor in = features.size() == 1 ? features[0] : concat_ch(features);
      features.push_back(leaky_relu(
          conv2d(in, weights_[static_cast<std::size_t>(layer)],
                 biases_[static_cast<std::size_t>(layer)], 1, 1),
          detail::kDenseSlope));
    }
    return conv2d(concat_ch(features), weights_.back(), biases_.back(), 1, 1);
  }

  template <class F>
  void visit_params(F&& fn) {
    for (int layer = 0; layer < detail::kDenseLayers; ++layer) {
      const std::string stem = "conv" + std::to_string(layer);
      fn(stem + ".w", weights_[static_cast<std::size_t>(layer)]);
      fn(stem + ".b", biases_[static_cast<std::size_t>(layer)]);
    }
  }

  int channels() const { return channels_; }

 private:
  int channels_ = 0;
  int growth_ = 0;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

class CouplingBlock {
 public:
  CouplingBlock() = default;

  CouplingBlock(int channels, const InnConfig& cfg, Rng& rng)
      : f_(channels, cfg.growth, rng),
        r_(channels, cfg.growth, rng),
        y_(channels, cfg.growth, rng),
        sigma_slope_(cfg.sigma_slope),
        exp_clamp_(cfg.exp_clamp) {}

  std::pair<Tensor, Tensor> forward(const Tensor& cover, const Tensor& mark) const {
    check_branches("coupling_forward", cover, mark);
    Tensor cover_next = add(cover, f_.forward(mark));
    Tensor scale_exp = nerfmark::exp(log_scale(cover_next));
    Tensor mark_next = add(mul(mark, scale_exp), y_.forward(cover_next));
    return {std::move(cover_next), std::move(mark_next)};
  }

  std::pair<Tensor, Tensor> inverse(const Tensor& cover_next, const Tensor& aux_next) const {
    check_branches("coupling_inverse", cover_next, aux_next);
    Tensor scale_exp = nerfmark::exp(neg(log_scale(cover_next)));
    Tensor aux = mul(sub(aux_next, y_.forward(cover_next)), scale_exp);
    Tensor cover = sub(cover_next, f_.forward(aux));
    return {std::move(cover), std::move(aux)};
  }

  template <class F>
  void visit_params(F&& fn) {
    f_.visit_params([&](const std::string& n, Tensor& t) { fn("f." + n, t); });
    r_.visit_params([&](const std::string& n, Tensor& t) { fn("r." + n, t); });
    y_.visit_params([&](const std::string& n, Tensor& t) { fn("y." + n, t); });
  }

 private:
  Tensor log_scale(const Tensor& cover_next) const {
    return clamp(leaky_relu(r_.forward(cover_next), sigma_slope_), -exp_clamp_, exp_clamp_);
  }

  static void check_branches(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::fail_shapes(op, "branch shape mismatch", a.shape(), b.shape());
    if (a.rank() != 4) detail::fail_op(op, "branches must be (B,C,H,W), got " + detail::shape_str(a.shape()));
  }

  DenseBlock f_, r_, y_;
  float sigma_slope_ = 0.01f;
  float exp_clamp_ = 5.0f;
};

// The shared parameter stack; embedding runs blocks 1..L, extraction L..1.
class CouplingStack {
 public:
  CouplingStack() = default;

  CouplingStack(int image_channels, const InnConfig& cfg, Rng& rng)
      : config_(cfg), image_channels_(image_channels) {
    const int branch = 4 * image_channels;
    for (int i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(branch, cfg, rng);
  }

  std::pair<Tensor, Tensor> forward(Tensor cover, Tensor mark) const {
    for (const CouplingBlock& block : blocks_) {
      auto [c, m] = block.forward(cover, mark);
      cover = std::move(c);
      mark = std::move(m);
    }
    return {std::move(cover), std::move(mark)};
  }

  std::pair<Tensor, Tensor> inverse(Tensor cover, Tensor aux) const {
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      auto [c, z] = blocks_[i].inverse(cover, aux);
      cover = std::move(c);
      aux = std::move(z);
    }
    return {std::move(cover), std::move(aux)};
  }

  template <class F>
  void visit_params(F&& fn) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].visit_params([&](const std::string& n, Tensor& t) {
        fn("block" + std::to_string(i) + "." + n, t);
      });
    }
  }

  // Replaces every parameter, including the zero-initialized output layers,
  // with small random values. Invertibility holds for arbitrary parameters;
  // tests use this to exercise a non-identity stack.
  void randomize_all(Rng& rng, float stddev = 0.02f) {
    visit_params([&](const std::string&, Tensor& t) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
    });
  }

  int blocks() const { return static_cast<int>(blocks_.size()); }
  int image_channels() const { return image_channels_; }
  const InnConfig& config() const { return config_; }

 private:
  InnConfig config_;
  int image_channels_ = 0;
  std::vector<CouplingBlock> blocks_;
};

// Watermarked image plus the forward pass's auxiliary output. `lost_info`
// stays in the wavelet domain; verification never uses it (a sampled z takes
// its place), but exactness tests do.
struct StegoBundle {
  Tensor stego;      // (B,C,H,W), unclamped
  Tensor lost_info;  // (B,4C,H/2,W/2)
};

inline StegoBundle embed(const Tensor& cover, const Tensor& watermark, const CouplingStack& stack) {
  if (cover.shape() != watermark.shape())
    detail::fail_shapes("embed", "cover/watermark shape mismatch", cover.shape(), watermark.shape());
  if (cover.rank() != 4)
    detail::fail_op("embed", "expects (B,C,H,W), got " + detail::shape_str(cover.shape()));
  auto [cover_wav, mark_wav] = stack.forward(dwt_haar(cover), dwt_haar(watermark));
  // Clamping to [0,1] happens only at export; the training path stays smooth.
  return StegoBundle{iwt_haar(cover_wav), std::move(mark_wav)};
}

inline std::pair<Tensor, Tensor> extract(const Tensor& stego, const Tensor& z,
                                         const CouplingStack& stack) {
  if (stego.rank() != 4)
    detail::fail_op("extract", "expects (B,C,H,W), got " + detail::shape_str(stego.shape()));
  Tensor stego_wav = dwt_haar(stego);
  if (z.shape() != stego_wav.shape())
    detail::fail_shapes("extract", "z must have the watermark-branch wavelet shape",
                        z.shape(), stego_wav.shape());
  auto [cover_wav, mark_wav] = stack.inverse(std::move(stego_wav), z);
  return {iwt_haar(cover_wav), iwt_haar(mark_wav)};
}

// i.i.d. standard normal z from the seeded generator.
inline Tensor sample_z(Shape shape, Rng& rng) { return randn(std::move(shape), rng); }

}  // namespace nerfmark
