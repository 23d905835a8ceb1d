#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "nerfmark/pipeline.hpp"

using namespace nerfmark;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(const std::string& work) {
  PipelineConfig cfg;
  cfg.set("work_dir", work);
  cfg.set("seed", "7");
  cfg.set("resolution", "16");
  cfg.set("scene.views", "4");
  cfg.set("corpus.count", "6");
  cfg.set("corpus.holdout", "2");
  cfg.set("inn.blocks", "2");
  cfg.set("inn.growth", "4");
  cfg.set("inn.steps", "8");
  cfg.set("inn.lr", "1e-3");
  cfg.set("nerf.hidden", "16");
  cfg.set("nerf.hidden_layers", "2");
  cfg.set("nerf.color_hidden", "8");
  cfg.set("nerf.samples", "8");
  cfg.set("nerf.steps", "30");
  cfg.set("nerf.batch_rays", "32");
  cfg.set("iqem.steps", "8");
  return cfg;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

std::string fresh(const std::string& name) {
  const fs::path dir = fs::path("nerfmark_test_tmp") / name;
  fs::remove_all(dir);
  return dir.string();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("config defaults carry the paper's stated values") {
  PipelineConfig cfg;
  CHECK(cfg.get_f("inn.lambda1") == 5.0);
  CHECK(cfg.get_f("inn.lambda2") == 0.5);
  CHECK(cfg.get_f("inn.lambda3") == 1.0);
  CHECK(cfg.get_f("inn.lr") == doctest::Approx(std::pow(10.0, -4.5)).epsilon(1e-8));
  CHECK(cfg.get_i("inn.batch") == 2);
  CHECK(cfg.get_i("inn.blocks") == 8);
}

TEST_CASE("config rejects unknown keys and bad values") {
  PipelineConfig cfg;
  CHECK_THROWS_AS(cfg.set("inn.typo", "1"), std::runtime_error);
  cfg.set("inn.lambda2", "-1");
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);

  PipelineConfig odd;
  odd.set("resolution", "18");  // not a multiple of 4
  CHECK_THROWS_AS(odd.validate(), std::runtime_error);
}

TEST_CASE("config file round trip with overrides, comments and hashing") {
  const fs::path dir = fresh("config");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "run.cfg");
    out << "# toy run\n";
    out << "seed = 11\n";
    out << "inn.steps = 4   # short\n";
  }
  PipelineConfig cfg = PipelineConfig::from_file((dir / "run.cfg").string());
  CHECK(cfg.get_u64("seed") == 11);
  CHECK(cfg.get_i("inn.steps") == 4);
  const std::uint64_t h1 = cfg.hash();
  cfg.set("inn.lambda1", "7");
  CHECK(cfg.hash() != h1);
  // Step counts are resume knobs, not semantics: they do not change the hash.
  cfg.set("inn.lambda1", "5");
  cfg.set("inn.steps", "5");
  CHECK(cfg.hash() == h1);
}

TEST_CASE("train-inn writes the loss schedule and checkpoint; resume is bit-exact") {
  const std::string work = fresh("inn_train");
  PipelineConfig cfg = tiny_config(work);
  cfg.set("inn.pretrain_fraction", "0.5");  // switch at step 4

  StageResult full = cmd_train_inn(cfg);
  CHECK(fs::exists(fs::path(work) / "inn.ckpt"));

  // Lambda2 must be zero before the boundary and the configured value after.
  std::ifstream csv(fs::path(work) / "inn_loss.csv");
  std::string line;
  std::getline(csv, line);  // header
  int step = 0;
  while (std::getline(csv, line)) {
    const bool pretrain = step < 4;
    if (pretrain) {
      CHECK(line.find(",pretrain,0.000000,") != std::string::npos);
    } else {
      CHECK(line.find(",full,0.500000,") != std::string::npos);
    }
    ++step;
  }
  CHECK(step == 8);
  CHECK(full.metrics.at("phase_switch_step") == 4.0);

  // Train 4 steps, then resume to 8: the resulting checkpoint must match
  // the single 8-step run byte for byte. Phase boundaries scale with the
  // total step count, so the replay uses a fraction of zero to keep the
  // schedule identical across the two histories.
  const std::string work_a = fresh("inn_straight");
  PipelineConfig cfg_a = tiny_config(work_a);
  cfg_a.set("inn.pretrain_fraction", "0");
  cmd_train_inn(cfg_a);

  const std::string work_b = fresh("inn_resume");
  PipelineConfig cfg_b = tiny_config(work_b);
  cfg_b.set("inn.pretrain_fraction", "0");
  cfg_b.set("inn.steps", "4");
  cmd_train_inn(cfg_b);
  cfg_b.set("inn.steps", "8");
  cmd_train_inn(cfg_b, /*resume=*/true);

  CHECK(slurp(fs::path(work_a) / "inn.ckpt") == slurp(fs::path(work_b) / "inn.ckpt"));
}

TEST_CASE("a 50-step INN smoke run emits a loss curve that decreases on average") {
  const std::string work = fresh("inn_smoke50");
  PipelineConfig cfg = tiny_config(work);
  cfg.set("inn.steps", "50");
  cfg.set("inn.lr", "3e-4");
  cfg.set("inn.exp_clamp", "2");
  cmd_train_inn(cfg);

  std::ifstream csv(fs::path(work) / "inn_loss.csv");
  std::string line;
  std::getline(csv, line);  // header
  std::vector<double> totals;
  while (std::getline(csv, line)) {
    const auto last_comma = line.rfind(',');
    totals.push_back(std::stod(line.substr(last_comma + 1)));
  }
  REQUIRE(totals.size() == 50);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 15; ++i) head += totals[static_cast<std::size_t>(i)];
  for (int i = 35; i < 50; ++i) tail += totals[static_cast<std::size_t>(i)];
  CHECK(tail < head);
}

TEST_CASE("zero-step INN: embed leaves frames unchanged after quantization") {
  const std::string work = fresh("embed_identity");
  PipelineConfig cfg = tiny_config(work);
  cfg.set("inn.steps", "0");
  cmd_train_inn(cfg);
  StageResult embed_result = cmd_embed(cfg);
  CHECK(std::isinf(embed_result.metrics.at("mean_embed_psnr")));
  CHECK(embed_result.metrics.at("frames") == 4.0);

  // Every training frame gets a metric row (header + 4 rows).
  CHECK(count_lines(fs::path(work) / "embed_metrics.csv") == 5);

  Scene original = load_scene((fs::path(work) / "scene").string());
  Scene marked = load_scene((fs::path(work) / "watermarked").string());
  for (std::size_t i = 0; i < original.frames.size(); ++i) {
    // Quantized originals equal the quantized stego frames.
    auto qa = quantize_image(original.frames[i].image);
    auto qb = quantize_image(marked.frames[i].image);
    CHECK(qa == qb);
  }
}

TEST_CASE("full tiny pipeline: render, iqem, extract, verify, e2e manifest") {
  const std::string work = fresh("e2e");
  PipelineConfig cfg = tiny_config(work);
  StageResult e2e = cmd_e2e(cfg);

  // Manifest lists every stage.
  std::ifstream in(fs::path(work) / "manifest.json");
  REQUIRE(in.good());
  nlohmann::json manifest;
  in >> manifest;
  std::vector<std::string> names;
  for (const auto& s : manifest["stages"]) names.push_back(s["name"].get<std::string>());
  const std::vector<std::string> expected = {"train-inn", "embed",   "train-nerf",
                                             "render",    "train-iqem", "extract",
                                             "extract_plain", "verify"};
  CHECK(names == expected);
  CHECK(manifest["timings"].size() == 8);

  // Renders exist for every training view and a metrics row per image.
  for (int i = 0; i < 4; ++i)
    CHECK(fs::exists(fs::path(work) / "renders" / ("r_" + std::to_string(i) + ".png")));
  CHECK(count_lines(fs::path(work) / "extract_metrics.csv") == 5);
  CHECK(count_lines(fs::path(work) / "extract_metrics_plain.csv") == 5);

  // Verify report: 3 train + 3 offset + baseline rows plus header.
  CHECK(count_lines(fs::path(work) / "verify_report.csv") == 8);

  // The ablation pair used the same z: both metrics exist.
  CHECK(e2e.metrics.count("extract.mean_extract_psnr") == 1);
  CHECK(e2e.metrics.count("extract_plain.mean_extract_psnr") == 1);

  // Config overrides are echoed in the manifest.
  CHECK(manifest["config"]["inn.steps"] == "8");
  CHECK(manifest["config"]["resolution"] == "16");
  CHECK(manifest["config"]["inn.lambda1"] == "5");
}

TEST_CASE("render: training pose output matches render_image directly") {
  const std::string work = fresh("render_direct");
  PipelineConfig cfg = tiny_config(work);
  cfg.set("inn.steps", "0");
  cmd_train_inn(cfg);
  cmd_embed(cfg);
  cmd_train_nerf(cfg);
  cmd_render(cfg, "train:1");

  NerfModel model;
  detail::load_nerf(cfg, (fs::path(work) / "nerf.ckpt").string(), model);
  Scene scene = load_scene((fs::path(work) / "watermarked").string());
  Tensor direct = render_image(model, scene.frames[1].pose, 16, 16, cfg.get_i("nerf.samples"));
  Tensor from_cmd = read_image((fs::path(work) / "renders" / "r_1.png").string());
  auto qa = quantize_image(direct);
  auto qb = quantize_image(from_cmd);
  CHECK(qa == qb);

  // A circle spec reproduces the toy generator's pose.
  cmd_render(cfg, "circle:90");
  Rng rng = detail::stream_rng(cfg, detail::kStreamScene);
  Scene toy = generate_toy_scene(ToyKind::kSphere, 4, 16, rng, -26.0f, 4.0f);
  Tensor direct_circle =
      render_image(model, toy.frames[1].pose, 16, 16, cfg.get_i("nerf.samples"));
  Tensor cmd_circle = read_image((fs::path(work) / "renders" / "theta_90.png").string());
  CHECK(quantize_image(direct_circle) == quantize_image(cmd_circle));
}

TEST_CASE("extract: exact lost-info z recovers the watermark up to quantization") {
  // Exact float-path invertibility is covered in the coupling tests; through
  // the 8-bit PNG boundary the stego pixels are quantized, so recovery is
  // limited by that noise rather than by the inverse pass.
  const std::string work = fresh("extract_exact");
  PipelineConfig cfg = tiny_config(work);
  cmd_train_inn(cfg);  // 8 steps: stack is no longer the identity
  cmd_embed(cfg);
  StageResult r = cmd_extract(cfg, (fs::path(work) / "watermarked" / "train").string(), false,
                              (fs::path(work) / "lost_info.ckpt").string(), "_exact");
  CHECK(r.metrics.at("mean_extract_psnr") >= 40.0);
}

TEST_CASE("extract with IQEM requested but missing checkpoint fails clearly") {
  const std::string work = fresh("extract_noiqem");
  PipelineConfig cfg = tiny_config(work);
  cfg.set("inn.steps", "0");
  cmd_train_inn(cfg);
  cmd_embed(cfg);
  try {
    cmd_extract(cfg, (fs::path(work) / "watermarked" / "train").string(), true);
    FAIL("expected a missing-checkpoint error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("train-iqem") != std::string::npos);
  }
}

TEST_CASE("verify angle spec expands base angles and offsets") {
  auto angles = detail::parse_angle_spec("30,45,60 +1");
  REQUIRE(angles.size() == 6);
  CHECK(angles[0].theta == doctest::Approx(30.0f));
  CHECK(angles[0].is_training_angle);
  CHECK(angles[3].theta == doctest::Approx(31.0f));
  CHECK_FALSE(angles[3].is_training_angle);
  CHECK(angles[5].theta == doctest::Approx(61.0f));
  CHECK_THROWS_AS(detail::parse_angle_spec("+1"), std::runtime_error);
}

TEST_CASE("the CLI binary runs a smoke command") {
  const fs::path cli = NERFMARK_CLI_PATH;
  REQUIRE(fs::exists(cli));
  const std::string work = fresh("cli_smoke");
  const std::string cmd = cli.string() +
                          " train-inn --seed 3 --out " + work +
                          " --set resolution=16 --set corpus.count=4 --set corpus.holdout=1" +
                          " --set inn.blocks=2 --set inn.growth=4 --set inn.steps=2 > /dev/null";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(fs::path(work) / "inn.ckpt"));

  // Unknown keys fail loudly.
  const std::string bad = cli.string() + " train-inn --set bogus=1 2> /dev/null";
  CHECK(std::system(bad.c_str()) != 0);
}
