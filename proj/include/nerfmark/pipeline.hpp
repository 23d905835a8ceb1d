#pragma once

// The workflow commands behind the `nerfmark` CLI: coupling-network
// training, per-frame embedding, NeRF training, rendering, enhancement
// training, extraction, multi-view verification, and the end-to-end run.
//
// Every command reads a flat key=value config (CLI flags override file
// values), derives all randomness from the single seed via named substreams,
// and writes its artifacts under work_dir. Outputs are byte-stable for a
// fixed seed: per-step randomness is derived statelessly from (seed, step),
// so training resumes from a checkpoint bit-exactly.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nerfmark/data_io.hpp"
#include "nerfmark/inn.hpp"
#include "nerfmark/iqem.hpp"
#include "nerfmark/metrics.hpp"
#include "nerfmark/nerf.hpp"
#include "nerfmark/optim.hpp"

namespace nerfmark {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace detail {

// Single source of truth for keys and defaults. Paper-stated values
// (lambdas, learning rate 10^-4.5, batch 2, 8 blocks) are the defaults.
inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> defaults = {
      {"seed", "1"},
      {"work_dir", "out"},
      {"resolution", "64"},
      {"scene.source", "toy:sphere"},  // toy:sphere | toy:cube | <dataset dir>
      {"scene.views", "8"},
      {"scene.phi", "-26"},
      {"scene.radius", "4"},
      {"watermark", "builtin"},  // builtin | <png path>
      {"corpus.source", "textures"},
      {"corpus.count", "64"},
      {"corpus.holdout", "8"},
      {"inn.blocks", "8"},
      {"inn.growth", "16"},
      {"inn.sigma_slope", "0.01"},
      {"inn.exp_clamp", "5"},
      {"inn.lambda1", "5"},
      {"inn.lambda2", "0.5"},
      {"inn.lambda3", "1"},
      {"inn.lr", "3.16227766e-05"},
      {"inn.batch", "2"},
      {"inn.steps", "1000"},
      {"inn.pretrain_fraction", "0.3"},
      {"inn.crop", "0"},  // train on aligned random crops of this size (0 = full frames)
      {"nerf.l_pos", "6"},
      {"nerf.l_dir", "4"},
      {"nerf.hidden", "128"},
      {"nerf.hidden_layers", "4"},
      {"nerf.color_hidden", "64"},
      {"nerf.samples", "64"},
      {"nerf.t_near", "2"},
      {"nerf.t_far", "6"},
      {"nerf.white_background", "1"},
      {"nerf.lr", "0.0005"},
      {"nerf.batch_rays", "128"},
      {"nerf.steps", "2000"},
      {"iqem.lr", "0.001"},
      {"iqem.steps", "500"},
      {"iqem.batch", "1"},
      {"verify.angles", "0,45,90"},
      {"verify.offset", "1"},
  };
  return defaults;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

class PipelineConfig {
 public:
  PipelineConfig() = default;

  // Parses `key = value` lines; '#' starts a comment; unknown keys are
  // rejected so typos fail loudly.
  static PipelineConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    PipelineConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config: " + path + ":" + std::to_string(line_no) +
                                 ": expected key = value");
      cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (detail::config_defaults().count(key) == 0)
      throw std::runtime_error("config: unknown key '" + key + "'");
    values_[key] = value;
  }

  std::string get(const std::string& key) const {
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    auto def = detail::config_defaults().find(key);
    if (def == detail::config_defaults().end())
      throw std::runtime_error("config: unknown key '" + key + "'");
    return def->second;
  }

  double get_f(const std::string& key) const { return std::stod(get(key)); }
  int get_i(const std::string& key) const { return std::stoi(get(key)); }
  std::uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
  bool get_b(const std::string& key) const {
    const std::string v = get(key);
    return v == "1" || v == "true" || v == "yes";
  }

  // Effective values for every known key, in sorted order.
  std::map<std::string, std::string> effective() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : detail::config_defaults()) out[k] = get(k);
    return out;
  }

  // Semantic hash stored in checkpoints. Step counts and the work directory
  // are excluded: training longer resumes from the same checkpoint, and
  // artifacts may be relocated.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (const auto& [k, v] : effective()) {
      if (k == "work_dir" || k == "inn.steps" || k == "nerf.steps" || k == "iqem.steps") continue;
      for (char c : k + "=" + v + "\n") {
        h ^= static_cast<std::uint8_t>(c);
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  void validate() const {
    if (get_f("inn.lambda1") < 0 || get_f("inn.lambda2") < 0 || get_f("inn.lambda3") < 0)
      throw std::runtime_error("config: loss weights must be non-negative");
    if (get_i("inn.blocks") < 1) throw std::runtime_error("config: inn.blocks must be >= 1");
    if (get_i("inn.batch") < 1 || get_i("inn.steps") < 0)
      throw std::runtime_error("config: bad inn batch/steps");
    const double pf = get_f("inn.pretrain_fraction");
    if (pf < 0.0 || pf > 1.0)
      throw std::runtime_error("config: inn.pretrain_fraction must be in [0,1]");
    const int res = get_i("resolution");
    if (res < 8 || res % 4 != 0)
      throw std::runtime_error("config: resolution must be a multiple of 4 and >= 8");
    const int crop = get_i("inn.crop");
    if (crop != 0 && (crop < 8 || crop % 4 != 0 || crop > res))
      throw std::runtime_error("config: inn.crop must be 0 or a multiple of 4 in [8, resolution]");
    if (get_i("scene.views") < 2) throw std::runtime_error("config: scene.views must be >= 2");
    if (get_i("corpus.count") <= get_i("corpus.holdout"))
      throw std::runtime_error("config: corpus.count must exceed corpus.holdout");
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Stage bookkeeping
// ---------------------------------------------------------------------------

struct StageResult {
  std::string name;
  std::vector<std::string> artifacts;
  std::map<std::string, double> metrics;
  double seconds = 0.0;
};

namespace detail {

// Deterministic substreams of the master seed, one per purpose.
enum Stream : std::uint64_t {
  kStreamScene = 1,
  kStreamCorpus = 2,
  kStreamInnInit = 3,
  kStreamInnData = 4,
  kStreamZ = 5,
  kStreamNerfInit = 6,
  kStreamNerfTrain = 7,
  kStreamIqemInit = 8,
  kStreamIqemTrain = 9,
  kStreamBaseline = 10,
};

inline Rng stream_rng(const PipelineConfig& cfg, Stream stream) {
  return Rng(cfg.get_u64("seed")).derive(static_cast<std::uint64_t>(stream));
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline std::string fmt_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  if (!append) {
    for (std::size_t i = 0; i < header.size(); ++i)
      out << header[i] << (i + 1 < header.size() ? "," : "\n");
  }
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i)
      out << row[i] << (i + 1 < row.size() ? "," : "\n");
}

inline std::filesystem::path work_dir(const PipelineConfig& cfg) {
  return std::filesystem::path(cfg.get("work_dir"));
}

// The scene the pipeline watermarks: either a dataset directory or a
// deterministic toy scene materialized under work_dir/scene.
inline std::string scene_dir(const PipelineConfig& cfg) {
  const std::string source = cfg.get("scene.source");
  if (source.rfind("toy:", 0) != 0) return source;
  const std::filesystem::path dir = work_dir(cfg) / "scene";
  Rng rng = stream_rng(cfg, kStreamScene);
  const ToyKind kind = source == "toy:cube" ? ToyKind::kCube : ToyKind::kSphere;
  Scene scene = generate_toy_scene(kind, cfg.get_i("scene.views"), cfg.get_i("resolution"), rng,
                                   static_cast<float>(cfg.get_f("scene.phi")),
                                   static_cast<float>(cfg.get_f("scene.radius")));
  save_scene(dir.string(), scene);
  return dir.string();
}

inline Tensor watermark_image(const PipelineConfig& cfg) {
  const int res = cfg.get_i("resolution");
  const std::string source = cfg.get("watermark");
  Tensor mark = source == "builtin" ? make_default_watermark(res)
                                    : composite_over_white(read_image(source));
  if (mark.shape() != Shape{3, res, res})
    throw std::runtime_error("watermark: expected a " + std::to_string(res) + "x" +
                             std::to_string(res) + " image, got " + shape_str(mark.shape()));
  return mark;
}

inline InnConfig inn_config(const PipelineConfig& cfg) {
  InnConfig icfg;
  icfg.blocks = cfg.get_i("inn.blocks");
  icfg.growth = cfg.get_i("inn.growth");
  icfg.sigma_slope = static_cast<float>(cfg.get_f("inn.sigma_slope"));
  icfg.exp_clamp = static_cast<float>(cfg.get_f("inn.exp_clamp"));
  return icfg;
}

inline NerfConfig nerf_config(const PipelineConfig& cfg) {
  NerfConfig ncfg;
  ncfg.l_pos = cfg.get_i("nerf.l_pos");
  ncfg.l_dir = cfg.get_i("nerf.l_dir");
  ncfg.hidden = cfg.get_i("nerf.hidden");
  ncfg.hidden_layers = cfg.get_i("nerf.hidden_layers");
  ncfg.color_hidden = cfg.get_i("nerf.color_hidden");
  ncfg.n_samples = cfg.get_i("nerf.samples");
  ncfg.t_near = static_cast<float>(cfg.get_f("nerf.t_near"));
  ncfg.t_far = static_cast<float>(cfg.get_f("nerf.t_far"));
  ncfg.white_background = cfg.get_b("nerf.white_background");
  return ncfg;
}

// Stack a (3,H,W) image into a single-sample batch.
inline Tensor as_batch(const Tensor& image) {
  return Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.data());
}

inline Tensor from_batch(const Tensor& batch) {
  return Tensor({batch.dim(1), batch.dim(2), batch.dim(3)}, batch.data());
}

inline Tensor clamp01(const Tensor& t) {
  Tensor out = t.clone();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(1.0f, std::max(0.0f, out[i]));
  return out;
}

inline std::vector<Tensor> corpus_images(const PipelineConfig& cfg) {
  const int res = cfg.get_i("resolution");
  const std::string source = cfg.get("corpus.source");
  std::vector<Tensor> corpus;
  if (source == "textures") {
    Rng rng = stream_rng(cfg, kStreamCorpus);
    corpus = generate_texture_corpus(cfg.get_i("corpus.count"), res, rng);
  } else if (source == "scene") {
    Scene scene = load_scene(scene_dir(cfg));
    for (const Frame* f : scene.split_frames("train")) corpus.push_back(f->image);
  } else {
    throw std::runtime_error("config: corpus.source must be 'textures' or 'scene'");
  }
  if (corpus.empty()) throw std::runtime_error("corpus is empty");
  for (const Tensor& img : corpus)
    if (img.shape() != Shape{3, res, res})
      throw std::runtime_error("corpus image size mismatch: expected " + std::to_string(res) +
                               "x" + std::to_string(res));
  return corpus;
}

inline void load_stack(const PipelineConfig& cfg, const std::string& ckpt_path,
                       CouplingStack& stack) {
  auto [tensors, meta] = load_checkpoint(ckpt_path);
  Rng dummy(0);
  stack = CouplingStack(3, inn_config(cfg), dummy);
  import_params(stack, tensors, "inn.");
}

inline void load_nerf(const PipelineConfig& cfg, const std::string& ckpt_path, NerfModel& model) {
  auto [tensors, meta] = load_checkpoint(ckpt_path);
  Rng dummy(0);
  model = NerfModel(nerf_config(cfg), dummy);
  import_params(model, tensors, "nerf.");
}

inline void load_iqem(const PipelineConfig& cfg, const std::string& ckpt_path, IqemModel& model) {
  auto [tensors, meta] = load_checkpoint(ckpt_path);
  Rng dummy(0);
  model = IqemModel(3, IqemConfig{}, dummy);
  import_params(model, tensors, "iqem.");
  (void)cfg;
}

// z for frame `index`, shared by every extraction variant so ablations are
// controlled comparisons.
inline Tensor frame_z(const PipelineConfig& cfg, std::size_t index, const Shape& shape) {
  Rng rng = stream_rng(cfg, kStreamZ).derive(index);
  return sample_z(shape, rng);
}

inline std::vector<std::string> sorted_pngs(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".png") files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .png files under " + dir);
  return files;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train-inn
// ---------------------------------------------------------------------------

inline StageResult cmd_train_inn(const PipelineConfig& cfg, bool resume = false) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  fs::create_directories(work);
  const std::string ckpt_path = (work / "inn.ckpt").string();
  const std::string curve_path = (work / "inn_loss.csv").string();

  std::vector<Tensor> corpus = detail::corpus_images(cfg);
  const int holdout = cfg.get_i("corpus.holdout");
  const int train_count = static_cast<int>(corpus.size()) - holdout;
  if (train_count < 1) throw std::runtime_error("train-inn: corpus smaller than holdout");
  const Tensor mark = detail::watermark_image(cfg);

  Rng init_rng = detail::stream_rng(cfg, detail::kStreamInnInit);
  CouplingStack stack(3, detail::inn_config(cfg), init_rng);
  Adam adam(AdamConfig{static_cast<float>(cfg.get_f("inn.lr")), 0.9f, 0.999f, 1e-8f});

  int start_step = 0;
  if (resume) {
    auto [tensors, meta] = load_checkpoint(ckpt_path);
    if (meta.config_hash != cfg.hash())
      throw std::runtime_error("train-inn: checkpoint was produced with a different config");
    import_params(stack, tensors, "inn.");
    adam.import_state(tensors, "adam.");
    start_step = static_cast<int>(meta.step);
  }

  const int total_steps = cfg.get_i("inn.steps");
  const int switch_step =
      static_cast<int>(cfg.get_f("inn.pretrain_fraction") * static_cast<double>(total_steps));
  const int batch = cfg.get_i("inn.batch");
  const LossWeights base_weights{static_cast<float>(cfg.get_f("inn.lambda1")),
                                 static_cast<float>(cfg.get_f("inn.lambda2")),
                                 static_cast<float>(cfg.get_f("inn.lambda3")), TrainPhase::kFull};
  const Rng data_base = detail::stream_rng(cfg, detail::kStreamInnData);
  const int res = cfg.get_i("resolution");
  const int crop = cfg.get_i("inn.crop") > 0 ? cfg.get_i("inn.crop") : res;

  // Copies an aligned crop of a (3,res,res) image into batch slot b.
  auto put_crop = [&](Tensor& dst, int b, const Tensor& src, int oy, int ox) {
    const std::size_t src_plane = static_cast<std::size_t>(res) * res;
    const std::size_t dst_plane = static_cast<std::size_t>(crop) * crop;
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < crop; ++y)
        std::copy(src.ptr() + static_cast<std::size_t>(ch) * src_plane +
                      static_cast<std::size_t>(oy + y) * res + ox,
                  src.ptr() + static_cast<std::size_t>(ch) * src_plane +
                      static_cast<std::size_t>(oy + y) * res + ox + crop,
                  dst.ptr() + (static_cast<std::size_t>(b) * 3 + ch) * dst_plane +
                      static_cast<std::size_t>(y) * crop);
  };

  std::vector<std::vector<std::string>> rows;
  for (int step = start_step; step < total_steps; ++step) {
    Rng step_rng = data_base.derive(static_cast<std::uint64_t>(step));

    Tensor cover({batch, 3, crop, crop});
    Tensor marks({batch, 3, crop, crop});
    for (int b = 0; b < batch; ++b) {
      const Tensor& img = corpus[step_rng.uniform_int(static_cast<std::uint64_t>(train_count))];
      // Even offsets keep the wavelet block grid aligned with full-frame use.
      const int max_off = (res - crop) / 2 + 1;
      const int oy = 2 * static_cast<int>(step_rng.uniform_int(static_cast<std::uint64_t>(max_off)));
      const int ox = 2 * static_cast<int>(step_rng.uniform_int(static_cast<std::uint64_t>(max_off)));
      put_crop(cover, b, img, oy, ox);
      put_crop(marks, b, mark, oy, ox);
    }

    LossWeights weights = base_weights;
    weights.phase = step < switch_step ? TrainPhase::kPretrain : TrainPhase::kFull;

    GradTape tape;
    auto refs = watch_params(stack, tape, "inn.");
    StegoBundle bundle = embed(cover, marks, stack);
    Tensor l_emb = loss_emb(bundle.stego, cover);
    Tensor l_lowf = loss_lowf(cover, bundle.stego);
    Tensor z = sample_z(bundle.lost_info.shape(), step_rng);
    auto [cover_rec, mark_rec] = extract(bundle.stego, z, stack);
    Tensor l_ext = loss_ext(mark_rec, marks);
    Tensor total = loss_total(LossParts{l_emb, l_lowf, l_ext}, weights);

    rows.push_back({std::to_string(step),
                    weights.phase == TrainPhase::kPretrain ? "pretrain" : "full",
                    detail::fmt_metric(weights.effective_lambda2()),
                    detail::fmt_metric(l_emb.item_f64()), detail::fmt_metric(l_lowf.item_f64()),
                    detail::fmt_metric(l_ext.item_f64()), detail::fmt_metric(total.item_f64())});

    auto grads = tape.backward(total);
    adam.step(refs, grads);
  }
  detail::write_csv(curve_path, {"step", "phase", "lambda2", "loss_emb", "loss_lowf", "loss_ext",
                                 "loss_total"},
                    rows, /*append=*/start_step > 0);

  // Hold-out evaluation: embedding fidelity and clean-stego extraction.
  double sum_embed_psnr = 0.0, sum_extract_psnr = 0.0;
  std::vector<std::vector<std::string>> eval_rows;
  for (int i = 0; i < holdout; ++i) {
    const Tensor& img = corpus[static_cast<std::size_t>(train_count + i)];
    StegoBundle bundle = embed(detail::as_batch(img), detail::as_batch(mark), stack);
    Tensor stego = detail::from_batch(bundle.stego);
    const double embed_psnr = psnr(img, stego);
    Tensor z = detail::frame_z(cfg, static_cast<std::size_t>(i), bundle.lost_info.shape());
    auto [cover_rec, mark_rec] = extract(bundle.stego, z, stack);
    const double extract_psnr = psnr(mark, detail::from_batch(mark_rec));
    sum_embed_psnr += embed_psnr;
    sum_extract_psnr += extract_psnr;
    eval_rows.push_back({std::to_string(i), detail::fmt_metric(embed_psnr),
                         detail::fmt_metric(extract_psnr)});
  }
  detail::write_csv((work / "inn_eval.csv").string(), {"holdout", "embed_psnr", "extract_psnr"},
                    eval_rows);

  std::unordered_map<std::string, Tensor> blob;
  export_params(stack, blob, "inn.");
  adam.export_state(blob, "adam.");
  CheckpointMeta meta;
  meta.seed = cfg.get_u64("seed");
  meta.step = static_cast<std::uint64_t>(total_steps);
  meta.config_hash = cfg.hash();
  meta.extra["phase_switch_step"] = std::to_string(switch_step);
  save_checkpoint(ckpt_path, blob, meta);

  StageResult result;
  result.name = "train-inn";
  result.artifacts = {ckpt_path, curve_path, (work / "inn_eval.csv").string()};
  if (holdout > 0) {
    result.metrics["holdout_embed_psnr"] = sum_embed_psnr / holdout;
    result.metrics["holdout_extract_psnr"] = sum_extract_psnr / holdout;
  }
  result.metrics["phase_switch_step"] = switch_step;
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

inline StageResult cmd_embed(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  CouplingStack stack;
  detail::load_stack(cfg, (work / "inn.ckpt").string(), stack);

  Scene scene = load_scene(detail::scene_dir(cfg));
  const Tensor mark = detail::watermark_image(cfg);

  Scene watermarked = scene;
  std::unordered_map<std::string, Tensor> lost;
  std::vector<std::vector<std::string>> rows;
  double sum_psnr = 0.0;
  int n_train = 0;
  for (std::size_t i = 0; i < watermarked.frames.size(); ++i) {
    Frame& frame = watermarked.frames[i];
    if (frame.split != "train") continue;
    StegoBundle bundle = embed(detail::as_batch(frame.image), detail::as_batch(mark), stack);
    Tensor stego = detail::clamp01(detail::from_batch(bundle.stego));
    lost["frame" + std::to_string(n_train)] = detail::from_batch(bundle.lost_info);
    MetricReport report = compute_metrics(frame.image, stego);
    rows.push_back({std::to_string(n_train), detail::fmt_metric(report.psnr),
                    detail::fmt_metric(report.ssim), detail::fmt_metric(report.mae),
                    detail::fmt_metric(report.rmse)});
    sum_psnr += report.psnr;
    frame.image = stego;
    ++n_train;
  }
  if (n_train == 0) throw std::runtime_error("embed: scene has no train frames");

  const std::string out_dir = (work / "watermarked").string();
  save_scene(out_dir, watermarked);
  CheckpointMeta meta;
  meta.seed = cfg.get_u64("seed");
  meta.config_hash = cfg.hash();
  save_checkpoint((work / "lost_info.ckpt").string(), lost, meta);
  detail::write_csv((work / "embed_metrics.csv").string(),
                    {"frame", "psnr", "ssim", "mae", "rmse"}, rows);

  StageResult result;
  result.name = "embed";
  result.artifacts = {out_dir, (work / "lost_info.ckpt").string(),
                      (work / "embed_metrics.csv").string()};
  result.metrics["mean_embed_psnr"] = sum_psnr / n_train;
  result.metrics["frames"] = n_train;
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// train-nerf
// ---------------------------------------------------------------------------

inline StageResult cmd_train_nerf(const PipelineConfig& cfg, bool resume = false) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  const std::string ckpt_path = (work / "nerf.ckpt").string();
  Scene scene = load_scene((work / "watermarked").string());

  Rng init_rng = detail::stream_rng(cfg, detail::kStreamNerfInit);
  NerfModel model(detail::nerf_config(cfg), init_rng);
  Adam adam(AdamConfig{static_cast<float>(cfg.get_f("nerf.lr")), 0.9f, 0.999f, 1e-8f});
  int start_step = 0;
  if (resume) {
    auto [tensors, meta] = load_checkpoint(ckpt_path);
    if (meta.config_hash != cfg.hash())
      throw std::runtime_error("train-nerf: checkpoint was produced with a different config");
    import_params(model, tensors, "nerf.");
    adam.import_state(tensors, "adam.");
    start_step = static_cast<int>(meta.step);
  }

  NerfTrainConfig tc;
  tc.steps = cfg.get_i("nerf.steps") - start_step;
  tc.batch_rays = cfg.get_i("nerf.batch_rays");
  tc.seed = detail::stream_rng(cfg, detail::kStreamNerfTrain).seed();
  std::vector<float> curve = train_nerf(model, scene, tc, adam, start_step);

  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < curve.size(); ++i)
    rows.push_back({std::to_string(start_step + static_cast<int>(i)),
                    detail::fmt_metric(curve[i])});
  detail::write_csv((work / "nerf_loss.csv").string(), {"step", "loss"}, rows,
                    /*append=*/start_step > 0);

  std::unordered_map<std::string, Tensor> blob;
  export_params(model, blob, "nerf.");
  adam.export_state(blob, "adam.");
  CheckpointMeta meta;
  meta.seed = cfg.get_u64("seed");
  meta.step = static_cast<std::uint64_t>(cfg.get_i("nerf.steps"));
  meta.config_hash = cfg.hash();
  save_checkpoint(ckpt_path, blob, meta);

  StageResult result;
  result.name = "train-nerf";
  result.artifacts = {ckpt_path, (work / "nerf_loss.csv").string()};
  if (!curve.empty()) result.metrics["final_loss"] = curve.back();
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

namespace detail {

struct NamedPose {
  std::string name;
  CameraPose pose;
};

// Pose specs: "train", "train:0,2", "circle:30,45,60", "circle:30,45@-20",
// or a transforms-style JSON file.
inline std::vector<NamedPose> parse_pose_spec(const PipelineConfig& cfg,
                                              const std::string& spec) {
  std::vector<NamedPose> out;
  const float phi = static_cast<float>(cfg.get_f("scene.phi"));
  const float radius = static_cast<float>(cfg.get_f("scene.radius"));
  if (spec.rfind("train", 0) == 0) {
    Scene scene = load_scene((work_dir(cfg) / "watermarked").string());
    auto train = scene.split_frames("train");
    std::vector<std::size_t> indices;
    if (spec.size() > 6 && spec[5] == ':') {
      std::stringstream ss(spec.substr(6));
      std::string tok;
      while (std::getline(ss, tok, ',')) indices.push_back(std::stoul(tok));
    } else {
      for (std::size_t i = 0; i < train.size(); ++i) indices.push_back(i);
    }
    for (std::size_t idx : indices) {
      if (idx >= train.size())
        throw std::runtime_error("render: train index " + std::to_string(idx) + " out of range");
      out.push_back({"r_" + std::to_string(idx), train[idx]->pose});
    }
    return out;
  }
  if (spec.rfind("circle:", 0) == 0) {
    std::string body = spec.substr(7);
    float use_phi = phi;
    const auto at = body.find('@');
    if (at != std::string::npos) {
      use_phi = std::stof(body.substr(at + 1));
      body.erase(at);
    }
    std::stringstream ss(body);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const float theta = std::stof(tok);
      char name[64];
      std::snprintf(name, sizeof name, "theta_%g", static_cast<double>(theta));
      out.push_back({name, circle_pose(theta, use_phi, radius)});
    }
    if (out.empty()) throw std::runtime_error("render: empty circle spec");
    return out;
  }
  // Otherwise: a JSON file of frames with transform matrices.
  std::ifstream in(spec);
  if (!in) throw std::runtime_error("render: cannot open pose spec " + spec);
  nlohmann::json doc;
  in >> doc;
  const auto& frames = doc.at("frames");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    CameraPose pose;
    pose.camera_angle_x = doc.contains("camera_angle_x")
                              ? doc["camera_angle_x"].get<float>()
                              : 0.6911112f;
    const auto& tm = frames[i].at("transform_matrix");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        pose.cam_to_world.at(r, c) = tm[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<float>();
    pose.validate();
    out.push_back({"pose_" + std::to_string(i), pose});
  }
  return out;
}

}  // namespace detail

inline StageResult cmd_render(const PipelineConfig& cfg, const std::string& pose_spec,
                              const std::string& subdir = "renders") {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  NerfModel model;
  detail::load_nerf(cfg, (work / "nerf.ckpt").string(), model);

  const fs::path out_dir = work / subdir;
  fs::create_directories(out_dir);
  const int res = cfg.get_i("resolution");
  auto poses = detail::parse_pose_spec(cfg, pose_spec);
  StageResult result;
  result.name = "render";
  for (const auto& np : poses) {
    Tensor img = render_image(model, np.pose, res, res, cfg.get_i("nerf.samples"));
    const std::string path = (out_dir / (np.name + ".png")).string();
    write_image(path, img);
    result.artifacts.push_back(path);
  }
  result.metrics["views"] = static_cast<double>(poses.size());
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// train-iqem
// ---------------------------------------------------------------------------

inline StageResult cmd_train_iqem(const PipelineConfig& cfg, bool resume = false) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  const std::string ckpt_path = (work / "iqem.ckpt").string();

  // Pair rendered frames with their watermarked sources by train index.
  Scene watermarked = load_scene((work / "watermarked").string());
  auto train = watermarked.split_frames("train");
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const fs::path render_path = work / "renders" / ("r_" + std::to_string(i) + ".png");
    if (!fs::exists(render_path))
      throw std::runtime_error("train-iqem: missing render " + render_path.string());
    Tensor rendered = composite_over_white(read_image(render_path.string()));
    pairs.emplace_back(detail::as_batch(rendered), detail::as_batch(train[i]->image));
  }

  Rng init_rng = detail::stream_rng(cfg, detail::kStreamIqemInit);
  IqemModel model(3, IqemConfig{}, init_rng);
  Adam adam(AdamConfig{static_cast<float>(cfg.get_f("iqem.lr")), 0.9f, 0.999f, 1e-8f});
  int start_step = 0;
  if (resume) {
    auto [tensors, meta] = load_checkpoint(ckpt_path);
    if (meta.config_hash != cfg.hash())
      throw std::runtime_error("train-iqem: checkpoint was produced with a different config");
    import_params(model, tensors, "iqem.");
    adam.import_state(tensors, "adam.");
    start_step = static_cast<int>(meta.step);
  }

  IqemTrainConfig tc;
  tc.steps = cfg.get_i("iqem.steps") - start_step;
  tc.batch = cfg.get_i("iqem.batch");
  tc.seed = detail::stream_rng(cfg, detail::kStreamIqemTrain).seed();
  std::vector<float> curve = train_iqem(model, pairs, tc, adam, start_step);

  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < curve.size(); ++i)
    rows.push_back({std::to_string(start_step + static_cast<int>(i)),
                    detail::fmt_metric(curve[i])});
  detail::write_csv((work / "iqem_loss.csv").string(), {"step", "loss"}, rows,
                    /*append=*/start_step > 0);

  std::unordered_map<std::string, Tensor> blob;
  export_params(model, blob, "iqem.");
  adam.export_state(blob, "adam.");
  CheckpointMeta meta;
  meta.seed = cfg.get_u64("seed");
  meta.step = static_cast<std::uint64_t>(cfg.get_i("iqem.steps"));
  meta.config_hash = cfg.hash();
  save_checkpoint(ckpt_path, blob, meta);

  StageResult result;
  result.name = "train-iqem";
  result.artifacts = {ckpt_path, (work / "iqem_loss.csv").string()};
  if (!curve.empty()) result.metrics["final_loss"] = curve.back();
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

// Extracts the watermark from every PNG under `images_dir`. With
// `use_iqem`, frames pass through the enhancement model first. If
// `lost_info_ckpt` is non-empty its archived tensors are used as z
// (exactness testing); otherwise z is drawn per frame index from the seed.
inline StageResult cmd_extract(const PipelineConfig& cfg, const std::string& images_dir,
                               bool use_iqem, const std::string& lost_info_ckpt = "",
                               const std::string& tag = "") {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  CouplingStack stack;
  detail::load_stack(cfg, (work / "inn.ckpt").string(), stack);

  IqemModel iqem;
  if (use_iqem) {
    const std::string iqem_path = (work / "iqem.ckpt").string();
    if (!fs::exists(iqem_path))
      throw std::runtime_error(
          "extract: IQEM requested but no checkpoint at " + iqem_path +
          " (run train-iqem first or pass --no-iqem)");
    detail::load_iqem(cfg, iqem_path, iqem);
  }

  std::unordered_map<std::string, Tensor> lost;
  if (!lost_info_ckpt.empty()) lost = load_checkpoint(lost_info_ckpt).first;

  const Tensor mark = detail::watermark_image(cfg);
  const std::string suffix = tag.empty() ? (use_iqem ? "" : "_plain") : tag;
  const fs::path out_dir = work / ("extracted" + suffix);
  fs::create_directories(out_dir);

  std::vector<std::vector<std::string>> rows;
  double sum_psnr = 0.0;
  const auto files = detail::sorted_pngs(images_dir);
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor image = composite_over_white(read_image(files[i]));
    Tensor batch = detail::as_batch(image);
    if (use_iqem) batch = enhance(iqem, batch);
    Tensor z;
    if (!lost.empty()) {
      auto it = lost.find("frame" + std::to_string(i));
      if (it == lost.end())
        throw std::runtime_error("extract: lost-info archive lacks frame" + std::to_string(i));
      z = detail::as_batch(it->second);
    } else {
      Tensor probe = dwt_haar(batch);
      z = detail::frame_z(cfg, i, probe.shape());
    }
    auto [cover_rec, mark_rec] = extract(batch, z, stack);
    Tensor recovered = detail::clamp01(detail::from_batch(mark_rec));
    const std::string out_path =
        (out_dir / ("wm_" + std::to_string(i) + ".png")).string();
    write_image(out_path, recovered);
    MetricReport report = compute_metrics(mark, recovered);
    rows.push_back({fs::path(files[i]).filename().string(), detail::fmt_metric(report.psnr),
                    detail::fmt_metric(report.ssim), detail::fmt_metric(report.mae),
                    detail::fmt_metric(report.rmse)});
    sum_psnr += report.psnr;
  }
  const std::string csv_path = (work / ("extract_metrics" + suffix + ".csv")).string();
  detail::write_csv(csv_path, {"image", "psnr", "ssim", "mae", "rmse"}, rows);

  StageResult result;
  result.name = "extract" + suffix;
  result.artifacts = {out_dir.string(), csv_path};
  result.metrics["mean_extract_psnr"] = sum_psnr / static_cast<double>(files.size());
  result.metrics["images"] = static_cast<double>(files.size());
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

namespace detail {

struct VerifyAngle {
  float theta;
  bool is_training_angle;
};

// "30,45,60 +1" -> {30,45,60} as training angles plus {31,46,61} as offsets.
inline std::vector<VerifyAngle> parse_angle_spec(const std::string& spec) {
  std::stringstream ss(spec);
  std::string tok;
  std::vector<float> base;
  std::vector<float> offsets;
  while (ss >> tok) {
    if (tok[0] == '+') {
      offsets.push_back(std::stof(tok.substr(1)));
    } else {
      std::stringstream cs(tok);
      std::string item;
      while (std::getline(cs, item, ',')) base.push_back(std::stof(item));
    }
  }
  if (base.empty()) throw std::runtime_error("verify: no base angles in spec '" + spec + "'");
  std::vector<VerifyAngle> out;
  for (float b : base) out.push_back({b, true});
  for (float off : offsets)
    for (float b : base) out.push_back({b + off, false});
  return out;
}

}  // namespace detail

inline StageResult cmd_verify(const PipelineConfig& cfg, const std::string& angle_spec) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);

  NerfModel nerf;
  detail::load_nerf(cfg, (work / "nerf.ckpt").string(), nerf);
  CouplingStack stack;
  detail::load_stack(cfg, (work / "inn.ckpt").string(), stack);
  const bool have_iqem = fs::exists(work / "iqem.ckpt");
  IqemModel iqem;
  if (have_iqem) detail::load_iqem(cfg, (work / "iqem.ckpt").string(), iqem);

  const Tensor mark = detail::watermark_image(cfg);
  const int res = cfg.get_i("resolution");
  const float phi = static_cast<float>(cfg.get_f("scene.phi"));
  const float radius = static_cast<float>(cfg.get_f("scene.radius"));

  auto run_extraction = [&](Tensor image, std::size_t z_index) {
    Tensor batch = detail::as_batch(std::move(image));
    if (have_iqem) batch = enhance(iqem, batch);
    Tensor probe = dwt_haar(batch);
    Tensor z = detail::frame_z(cfg, z_index, probe.shape());
    auto [cover_rec, mark_rec] = extract(batch, z, stack);
    return psnr(mark, detail::clamp01(detail::from_batch(mark_rec)));
  };

  auto angles = detail::parse_angle_spec(angle_spec);
  std::vector<std::vector<std::string>> rows;
  double sum_train = 0.0;
  int n_train = 0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const auto& a = angles[i];
    Tensor rendered = render_image(nerf, circle_pose(a.theta, phi, radius), res, res,
                                   cfg.get_i("nerf.samples"));
    const double score = run_extraction(rendered, i);
    rows.push_back({detail::fmt_metric(a.theta), a.is_training_angle ? "train" : "offset",
                    detail::fmt_metric(score)});
    if (a.is_training_angle) {
      sum_train += score;
      ++n_train;
    }
  }

  // Null hypothesis: extraction from an image unrelated to the pipeline.
  Rng noise_rng = detail::stream_rng(cfg, detail::kStreamBaseline);
  Tensor noise = rand_uniform({3, res, res}, noise_rng);
  const double baseline = run_extraction(noise, angles.size());
  rows.push_back({"-", "baseline", detail::fmt_metric(baseline)});

  const std::string csv_path = (work / "verify_report.csv").string();
  detail::write_csv(csv_path, {"theta", "class", "extract_psnr"}, rows);

  StageResult result;
  result.name = "verify";
  result.artifacts = {csv_path};
  result.metrics["mean_train_angle_psnr"] = n_train ? sum_train / n_train : 0.0;
  result.metrics["baseline_psnr"] = baseline;
  result.metrics["angles"] = static_cast<double>(angles.size());
  result.seconds = watch.seconds();
  return result;
}

// ---------------------------------------------------------------------------
// e2e
// ---------------------------------------------------------------------------

// Full workflow with one seed: train-inn, embed, train-nerf, render the
// training poses, train-iqem, extract with and without enhancement (same z),
// verify over an angle sweep derived from the training views, and write a
// manifest of every stage. Wall-clock timings live in a separate manifest
// section so the rest is reproducible byte-for-byte.
inline StageResult cmd_e2e(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  detail::Stopwatch watch;
  cfg.validate();
  const fs::path work = detail::work_dir(cfg);
  fs::create_directories(work);

  std::vector<StageResult> stages;
  stages.push_back(cmd_train_inn(cfg));
  stages.push_back(cmd_embed(cfg));
  stages.push_back(cmd_train_nerf(cfg));
  stages.push_back(cmd_render(cfg, "train"));
  stages.push_back(cmd_train_iqem(cfg));
  stages.push_back(cmd_extract(cfg, (work / "renders").string(), true));
  stages.push_back(cmd_extract(cfg, (work / "renders").string(), false));

  // Sweep the first training angles plus the configured offset.
  const int n_views = cfg.get_i("scene.views");
  std::string sweep;
  for (int i = 0; i < std::min(3, n_views); ++i) {
    if (i) sweep += ",";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", 360.0 * i / n_views);
    sweep += buf;
  }
  sweep += " +" + cfg.get("verify.offset");
  stages.push_back(cmd_verify(cfg, sweep));

  nlohmann::json manifest;
  manifest["seed"] = cfg.get_u64("seed");
  manifest["config"] = cfg.effective();
  manifest["stages"] = nlohmann::json::array();
  nlohmann::json timings = nlohmann::json::object();
  for (const StageResult& s : stages) {
    nlohmann::json js;
    js["name"] = s.name;
    js["artifacts"] = s.artifacts;
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [k, v] : s.metrics)
      metrics[k] = std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v);
    js["metrics"] = metrics;
    manifest["stages"].push_back(js);
    timings[s.name] = s.seconds;
  }
  manifest["timings"] = timings;

  const std::string manifest_path = (work / "manifest.json").string();
  std::ofstream out(manifest_path);
  out << manifest.dump(2) << "\n";

  StageResult result;
  result.name = "e2e";
  result.artifacts = {manifest_path};
  for (const StageResult& s : stages)
    for (const auto& [k, v] : s.metrics) result.metrics[s.name + "." + k] = v;
  result.seconds = watch.seconds();
  return result;
}

}  // namespace nerfmark
