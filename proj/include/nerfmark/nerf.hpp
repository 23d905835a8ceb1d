#pragma once

// A small NeRF: positional-encoded MLP mapping (position, direction) to
// (color, density), alpha-compositing quadrature along camera rays, ray
// generation from poses, and photometric training on posed images.
//
// The continuous rendering integral is discretized the standard way:
//   alpha_i = 1 - exp(-sigma_i * delta_i)
//   T_i     = prod_{j<i} (1 - alpha_j) = exp(-sum_{j<i} sigma_j delta_j)
//   C       = sum_i T_i alpha_i c_i   (+ white background residual)

#include <cstdint>
#include <utility>
#include <vector>

#include "nerfmark/camera.hpp"
#include "nerfmark/data_io.hpp"
#include "nerfmark/optim.hpp"
#include "nerfmark/rng.hpp"
#include "nerfmark/tensor.hpp"

namespace nerfmark {

// ---------------------------------------------------------------------------
// Rays and encodings
// ---------------------------------------------------------------------------

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
  float t_near = 2.0f;
  float t_far = 6.0f;
};

// Frequency lift: sin(2^j pi v), cos(2^j pi v) for j = 0..L-1, emitted per
// frequency as [sin(all k) | cos(all k)].
inline std::vector<float> positional_encoding(const std::vector<float>& v, int levels) {
  if (levels < 1) detail::fail_op("positional_encoding", "levels must be >= 1");
  std::vector<float> out;
  out.reserve(2 * static_cast<std::size_t>(levels) * v.size());
  const float pi = 3.14159265358979323846f;
  for (int j = 0; j < levels; ++j) {
    const float freq = std::ldexp(pi, j);  // 2^j * pi
    for (float x : v) out.push_back(std::sin(freq * x));
    for (float x : v) out.push_back(std::cos(freq * x));
  }
  return out;
}

// Pinhole rays through every pixel center, row-major over (y, x).
inline std::vector<Ray> generate_rays(const CameraPose& pose, int width, int height,
                                      float t_near = 2.0f, float t_far = 6.0f) {
  if (width < 1 || height < 1) detail::fail_op("generate_rays", "empty image plane");
  if (t_near >= t_far) detail::fail_op("generate_rays", "t_near must be < t_far");
  pose.validate();  // rejects degenerate rotations
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      Ray ray;
      pinhole_ray(pose, static_cast<float>(x), static_cast<float>(y), width, height, ray.origin,
                  ray.dir);
      ray.t_near = t_near;
      ray.t_far = t_far;
      rays.push_back(ray);
    }
  }
  return rays;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct NerfConfig {
  int l_pos = 6;
  int l_dir = 4;
  int hidden = 128;
  int hidden_layers = 4;
  int color_hidden = 64;
  int n_samples = 64;
  float t_near = 2.0f;
  float t_far = 6.0f;
  bool white_background = true;
};

class NerfModel {
 public:
  NerfModel() = default;

  NerfModel(const NerfConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int in_pos = 6 * cfg.l_pos;  // 2 * L * 3
    const int in_dir = 6 * cfg.l_dir;
    auto dense = [&](int fan_in, int fan_out) {
      layers_w_.push_back(randn({fan_in, fan_out}, rng, std::sqrt(2.0f / static_cast<float>(fan_in))));
      layers_b_.push_back(Tensor::zeros({1, fan_out}));
    };
    dense(in_pos, cfg.hidden);
    for (int i = 1; i < cfg.hidden_layers; ++i) dense(cfg.hidden, cfg.hidden);
    dense(cfg.hidden, 1);                             // density head
    dense(cfg.hidden, cfg.hidden);                    // feature head
    dense(cfg.hidden + in_dir, cfg.color_hidden);     // color trunk
    dense(cfg.color_hidden, 3);                       // color head
  }

  const NerfConfig& config() const { return cfg_; }

  // Batched query. pos_enc: (N, 6*l_pos), dir_enc: (N, 6*l_dir).
  // Returns density (N,1), already rectified, and color (N,3) in (0,1).
  std::pair<Tensor, Tensor> forward(const Tensor& pos_enc, const Tensor& dir_enc) const {
    const int n_hidden = cfg_.hidden_layers;
    Tensor h = pos_enc;
    for (int i = 0; i < n_hidden; ++i)
      h = relu(add(matmul(h, layers_w_[static_cast<std::size_t>(i)]),
                   layers_b_[static_cast<std::size_t>(i)]));
    Tensor density = relu(add(matmul(h, layers_w_[static_cast<std::size_t>(n_hidden)]),
                              layers_b_[static_cast<std::size_t>(n_hidden)]));
    Tensor feature = add(matmul(h, layers_w_[static_cast<std::size_t>(n_hidden + 1)]),
                         layers_b_[static_cast<std::size_t>(n_hidden + 1)]);
    Tensor trunk = relu(add(
        matmul(concat_ch({feature, dir_enc}), layers_w_[static_cast<std::size_t>(n_hidden + 2)]),
        layers_b_[static_cast<std::size_t>(n_hidden + 2)]));
    Tensor color = sigmoid(add(matmul(trunk, layers_w_[static_cast<std::size_t>(n_hidden + 3)]),
                               layers_b_[static_cast<std::size_t>(n_hidden + 3)]));
    return {std::move(density), std::move(color)};
  }

  template <class F>
  void visit_params(F&& fn) {
    for (std::size_t i = 0; i < layers_w_.size(); ++i) {
      fn("layer" + std::to_string(i) + ".w", layers_w_[i]);
      fn("layer" + std::to_string(i) + ".b", layers_b_[i]);
    }
  }

 private:
  NerfConfig cfg_;
  std::vector<Tensor> layers_w_;
  std::vector<Tensor> layers_b_;
};

// ---------------------------------------------------------------------------
// Volume rendering
// ---------------------------------------------------------------------------

struct CompositeResult {
  Tensor rgb;            // (R,3)
  Tensor weights;        // (R,N) = T_i * alpha_i
  Tensor transmittance;  // (R,N) = T_i
  Tensor alpha;          // (R,N)
  Tensor weight_sum;     // (R,1)
};

// The quadrature core. sigma, delta: (R,N); rgb: (R,N,3).
inline CompositeResult composite_rays(const Tensor& sigma, const Tensor& rgb, const Tensor& delta,
                                      bool white_background) {
  if (sigma.rank() != 2 || delta.shape() != sigma.shape())
    detail::fail_shapes("composite_rays", "sigma/delta mismatch", sigma.shape(), delta.shape());
  const int n_rays = sigma.dim(0), n_samples = sigma.dim(1);
  if (rgb.shape() != Shape{n_rays, n_samples, 3})
    detail::fail_op("composite_rays", "rgb must be (R,N,3), got " + detail::shape_str(rgb.shape()));

  CompositeResult out;
  Tensor sigma_dt = mul(sigma, delta);
  out.alpha = sub(Tensor::ones(sigma.shape()), nerfmark::exp(neg(sigma_dt)));
  out.transmittance = nerfmark::exp(neg(cumsum_exclusive(sigma_dt)));
  out.weights = mul(out.transmittance, out.alpha);
  out.weight_sum = sum_axis(out.weights, 1);
  Tensor weighted = mul(reshape(out.weights, {n_rays, n_samples, 1}), rgb);
  out.rgb = reshape(sum_axis(weighted, 1), {n_rays, 3});
  if (white_background)
    out.rgb = add(out.rgb, sub(Tensor::ones({n_rays, 1}), out.weight_sum));
  return out;
}

namespace detail {

// Sample depths for a batch of rays; midpoint rule when rng is null,
// stratified otherwise. Fills (R,N) depth and delta arrays (last delta is a
// large terminal value).
inline void sample_depths(const std::vector<Ray>& rays, int n_samples, Rng* rng, Tensor& t_vals,
                          Tensor& delta) {
  const int n_rays = static_cast<int>(rays.size());
  t_vals = Tensor({n_rays, n_samples});
  delta = Tensor({n_rays, n_samples});
  for (int r = 0; r < n_rays; ++r) {
    const float span = rays[static_cast<std::size_t>(r)].t_far - rays[static_cast<std::size_t>(r)].t_near;
    const float base = rays[static_cast<std::size_t>(r)].t_near;
    for (int i = 0; i < n_samples; ++i) {
      const float u = rng ? rng->uniform() : 0.5f;
      t_vals[static_cast<std::size_t>(r) * n_samples + i] =
          base + span * (static_cast<float>(i) + u) / static_cast<float>(n_samples);
    }
    for (int i = 0; i + 1 < n_samples; ++i)
      delta[static_cast<std::size_t>(r) * n_samples + i] =
          t_vals[static_cast<std::size_t>(r) * n_samples + i + 1] -
          t_vals[static_cast<std::size_t>(r) * n_samples + i];
    delta[static_cast<std::size_t>(r) * n_samples + n_samples - 1] = 1e10f;
  }
}

// Positional encodings for all samples of all rays: (R*N, 6*l_pos) and
// (R*N, 6*l_dir). Pure data; gradients never flow into encodings.
inline void encode_samples(const std::vector<Ray>& rays, const Tensor& t_vals, int n_samples,
                           int l_pos, int l_dir, Tensor& pos_enc, Tensor& dir_enc) {
  const int n_rays = static_cast<int>(rays.size());
  const int fp = 6 * l_pos, fd = 6 * l_dir;
  pos_enc = Tensor({n_rays * n_samples, fp});
  dir_enc = Tensor({n_rays * n_samples, fd});
  const float pi = 3.14159265358979323846f;
  std::vector<float> freqs(static_cast<std::size_t>(std::max(l_pos, l_dir)));
  for (std::size_t j = 0; j < freqs.size(); ++j) freqs[j] = std::ldexp(pi, static_cast<int>(j));
  for (int r = 0; r < n_rays; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    for (int i = 0; i < n_samples; ++i) {
      const float t = t_vals[static_cast<std::size_t>(r) * n_samples + i];
      const float p[3] = {ray.origin.x + t * ray.dir.x, ray.origin.y + t * ray.dir.y,
                          ray.origin.z + t * ray.dir.z};
      float* prow = pos_enc.ptr() + (static_cast<std::size_t>(r) * n_samples + i) * fp;
      for (int j = 0; j < l_pos; ++j) {
        for (int k = 0; k < 3; ++k) prow[6 * j + k] = std::sin(freqs[static_cast<std::size_t>(j)] * p[k]);
        for (int k = 0; k < 3; ++k) prow[6 * j + 3 + k] = std::cos(freqs[static_cast<std::size_t>(j)] * p[k]);
      }
      const float d[3] = {ray.dir.x, ray.dir.y, ray.dir.z};
      float* drow = dir_enc.ptr() + (static_cast<std::size_t>(r) * n_samples + i) * fd;
      for (int j = 0; j < l_dir; ++j) {
        for (int k = 0; k < 3; ++k) drow[6 * j + k] = std::sin(freqs[static_cast<std::size_t>(j)] * d[k]);
        for (int k = 0; k < 3; ++k) drow[6 * j + 3 + k] = std::cos(freqs[static_cast<std::size_t>(j)] * d[k]);
      }
    }
  }
}

}  // namespace detail

// Renders a batch of rays. Differentiable when the model parameters are
// watched on a tape; stratified sampling when rng is non-null.
inline CompositeResult render_rays(const NerfModel& model, const std::vector<Ray>& rays,
                                   int n_samples, Rng* rng) {
  if (n_samples < 2) detail::fail_op("render_rays", "n_samples must be >= 2");
  if (rays.empty()) detail::fail_op("render_rays", "no rays");
  const NerfConfig& cfg = model.config();
  Tensor t_vals, delta, pos_enc, dir_enc;
  detail::sample_depths(rays, n_samples, rng, t_vals, delta);
  detail::encode_samples(rays, t_vals, n_samples, cfg.l_pos, cfg.l_dir, pos_enc, dir_enc);
  auto [density, color] = model.forward(pos_enc, dir_enc);
  const int n_rays = static_cast<int>(rays.size());
  Tensor sigma = reshape(density, {n_rays, n_samples});
  Tensor rgb = reshape(color, {n_rays, n_samples, 3});
  return composite_rays(sigma, rgb, delta, cfg.white_background);
}

inline Vec3 render_ray(const NerfModel& model, const Ray& ray, int n_samples, Rng* rng = nullptr) {
  CompositeResult res = render_rays(model, {ray}, n_samples, rng);
  return {res.rgb[0], res.rgb[1], res.rgb[2]};
}

// Deterministic full-frame render (midpoint sampling, chunked rays).
inline Tensor render_image(const NerfModel& model, const CameraPose& pose, int width, int height,
                           int n_samples) {
  const NerfConfig& cfg = model.config();
  std::vector<Ray> rays = generate_rays(pose, width, height, cfg.t_near, cfg.t_far);
  Tensor img({3, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t chunk = 4096;
  for (std::size_t start = 0; start < rays.size(); start += chunk) {
    const std::size_t stop = std::min(rays.size(), start + chunk);
    std::vector<Ray> part(rays.begin() + static_cast<std::ptrdiff_t>(start),
                          rays.begin() + static_cast<std::ptrdiff_t>(stop));
    CompositeResult res = render_rays(model, part, n_samples, nullptr);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const std::size_t pix = start + i;
      img[pix] = res.rgb[i * 3];
      img[plane + pix] = res.rgb[i * 3 + 1];
      img[2 * plane + pix] = res.rgb[i * 3 + 2];
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct NerfTrainConfig {
  int steps = 2000;
  int batch_rays = 128;
  std::uint64_t seed = 1;
};

// Minimizes mean squared photometric error over random ray batches drawn
// from the train split. Per-step randomness is derived statelessly from
// (seed, step), so training resumes bit-exactly from a checkpointed step.
inline std::vector<float> train_nerf(NerfModel& model, const Scene& scene,
                                     const NerfTrainConfig& train_cfg, Adam& optimizer,
                                     int first_step = 0) {
  auto train_frames = scene.split_frames("train");
  if (train_frames.empty()) detail::fail_op("train_nerf", "scene has no train frames");
  const NerfConfig& cfg = model.config();

  // Flatten every (ray, target color) pair once.
  std::vector<Ray> all_rays;
  std::vector<float> targets;
  for (const Frame* frame : train_frames) {
    const int w = frame->image.dim(2), h = frame->image.dim(1);
    std::vector<Ray> rays = generate_rays(frame->pose, w, h, cfg.t_near, cfg.t_far);
    all_rays.insert(all_rays.end(), rays.begin(), rays.end());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t pix = 0; pix < plane; ++pix) {
      targets.push_back(frame->image[pix]);
      targets.push_back(frame->image[plane + pix]);
      targets.push_back(frame->image[2 * plane + pix]);
    }
  }

  const Rng base(train_cfg.seed);
  std::vector<float> curve;
  curve.reserve(static_cast<std::size_t>(train_cfg.steps));
  for (int step = first_step; step < first_step + train_cfg.steps; ++step) {
    Rng step_rng = base.derive(static_cast<std::uint64_t>(step));
    std::vector<Ray> batch(static_cast<std::size_t>(train_cfg.batch_rays));
    Tensor target({train_cfg.batch_rays, 3});
    for (int i = 0; i < train_cfg.batch_rays; ++i) {
      const std::size_t pick = step_rng.uniform_int(all_rays.size());
      batch[static_cast<std::size_t>(i)] = all_rays[pick];
      for (int c = 0; c < 3; ++c)
        target[static_cast<std::size_t>(i) * 3 + c] = targets[pick * 3 + c];
    }

    GradTape tape;
    auto refs = watch_params(model, tape);
    CompositeResult res = render_rays(model, batch, cfg.n_samples, &step_rng);
    Tensor diff = sub(res.rgb, target);
    Tensor loss = mean(mul(diff, diff));
    curve.push_back(loss.item());
    auto grads = tape.backward(loss);
    optimizer.step(refs, grads);
  }
  return curve;
}

}  // namespace nerfmark
