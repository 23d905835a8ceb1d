#pragma once

// Image quality enhancement module: a residual convolutional encoder-decoder
// that pulls NeRF-rendered frames back toward their watermarked sources
// before extraction.
//
// Six encoder convs (stride-2 downsampling after stages 2 and 4), a mirrored
// decoder with transposed convs at the two upsampling points and stage-wise
// skip connections, and a zero-initialized output conv whose result is added
// to the input. A fresh model is therefore an exact identity map.

#include <string>
#include <vector>

#include "nerfmark/optim.hpp"
#include "nerfmark/rng.hpp"
#include "nerfmark/tensor.hpp"

namespace nerfmark {

struct IqemConfig {
  // Encoder stage widths; the decoder mirrors them.
  int widths[6] = {32, 64, 64, 128, 128, 128};
  float slope = 0.2f;
};

class IqemModel {
 public:
  IqemModel() = default;

  IqemModel(int image_channels, const IqemConfig& cfg, Rng& rng)
      : cfg_(cfg), channels_(image_channels) {
    auto conv = [&](const char* name, int cin, int cout, int k, bool zero) {
      const float stddev =
          zero ? 0.0f : detail::kaiming_std(cin * k * k, cfg.slope);
      weights_.push_back(randn({cout, cin, k, k}, rng, stddev));
      biases_.push_back(Tensor::zeros({cout}));
      names_.emplace_back(name);
    };
    auto tconv = [&](const char* name, int cin, int cout) {
      weights_.push_back(randn({cin, cout, 4, 4}, rng, detail::kaiming_std(cin * 16, cfg.slope)));
      biases_.push_back(Tensor::zeros({cout}));
      names_.emplace_back(name);
    };
    const int* w = cfg.widths;
    conv("enc1", image_channels, w[0], 3, false);
    conv("enc2", w[0], w[1], 3, false);
    conv("enc3", w[1], w[2], 3, false);  // stride 2
    conv("enc4", w[2], w[3], 3, false);
    conv("enc5", w[3], w[4], 3, false);  // stride 2
    conv("enc6", w[4], w[5], 3, false);
    conv("dec6", w[5], w[4], 3, false);
    tconv("dec5", w[4], w[3]);           // stride 2 up
    conv("dec4", w[3], w[2], 3, false);
    tconv("dec3", w[2], w[1]);           // stride 2 up
    conv("dec2", w[1], w[0], 3, false);
    conv("dec1", w[0], image_channels, 3, true);  // zero-init residual head
  }

  int channels() const { return channels_; }

  Tensor forward(const Tensor& image) const {
    check_input(image);
    auto act = [&](const Tensor& t) { return leaky_relu(t, cfg_.slope); };
    const Tensor& e0 = image;
    Tensor e1 = act(conv2d(e0, weights_[0], biases_[0], 1, 1));
    Tensor e2 = act(conv2d(e1, weights_[1], biases_[1], 1, 1));
    Tensor e3 = act(conv2d(e2, weights_[2], biases_[2], 2, 1));
    Tensor e4 = act(conv2d(e3, weights_[3], biases_[3], 1, 1));
    Tensor e5 = act(conv2d(e4, weights_[4], biases_[4], 2, 1));
    Tensor e6 = act(conv2d(e5, weights_[5], biases_[5], 1, 1));
    Tensor d6 = add(act(conv2d(e6, weights_[6], biases_[6], 1, 1)), e5);
    Tensor d5 = add(act(conv2d_transpose(d6, weights_[7], biases_[7], 2, 1)), e4);
    Tensor d4 = add(act(conv2d(d5, weights_[8], biases_[8], 1, 1)), e3);
    Tensor d3 = add(act(conv2d_transpose(d4, weights_[9], biases_[9], 2, 1)), e2);
    Tensor d2 = add(act(conv2d(d3, weights_[10], biases_[10], 1, 1)), e1);
    Tensor residual = conv2d(d2, weights_[11], biases_[11], 1, 1);
    return add(image, residual);
  }

  template <class F>
  void visit_params(F&& fn) {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      fn(names_[i] + ".w", weights_[i]);
      fn(names_[i] + ".b", biases_[i]);
    }
  }

 private:
  void check_input(const Tensor& image) const {
    if (image.rank() != 4 || image.dim(1) != channels_)
      detail::fail_op("enhance", "expects (B," + std::to_string(channels_) + ",H,W), got " +
                                     detail::shape_str(image.shape()));
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
      detail::fail_op("enhance", "spatial extents must be divisible by 4, got " +
                                     detail::shape_str(image.shape()));
  }

  IqemConfig cfg_;
  int channels_ = 0;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
  std::vector<std::string> names_;
};

// Restores a rendered image toward its watermarked source. Pure; clamping
// to [0,1] is left to the export path.
inline Tensor enhance(const IqemModel& model, const Tensor& rendered) {
  return model.forward(rendered);
}

struct IqemTrainConfig {
  int steps = 500;
  int batch = 1;
  std::uint64_t seed = 1;
};

// Minimizes the mean squared error between enhance(rendered) and the
// watermarked target. Independent of the coupling network's training.
inline std::vector<float> train_iqem(IqemModel& model,
                                     const std::vector<std::pair<Tensor, Tensor>>& pairs,
                                     const IqemTrainConfig& cfg, Adam& optimizer,
                                     int first_step = 0) {
  if (pairs.empty()) detail::fail_op("train_iqem", "no training pairs");
  for (const auto& [rendered, target] : pairs)
    if (rendered.shape() != target.shape())
      detail::fail_shapes("train_iqem", "pair shape mismatch", rendered.shape(), target.shape());

  const Rng base(cfg.seed);
  std::vector<float> curve;
  curve.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = first_step; step < first_step + cfg.steps; ++step) {
    Rng step_rng = base.derive(static_cast<std::uint64_t>(step));
    GradTape tape;
    auto refs = watch_params(model, tape);
    Tensor loss;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& [rendered, target] = pairs[step_rng.uniform_int(pairs.size())];
      Tensor diff = sub(model.forward(rendered), target);
      Tensor one = mean(mul(diff, diff));
      loss = loss.size() == 0 ? one : add(loss, one);
    }
    loss = scale(loss, 1.0f / static_cast<float>(cfg.batch));
    curve.push_back(loss.item());
    auto grads = tape.backward(loss);
    optimizer.step(refs, grads);
  }
  return curve;
}

}  // namespace nerfmark
