// Command-line front end for the watermarking pipeline. Subcommands mirror
// the workflow stages; a flat key=value config file carries the
// hyperparameters and CLI flags override it.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "nerfmark/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string seed;
  std::string out_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Config file (key = value lines)");
  cmd->add_option("--seed", args.seed, "Master seed (overrides config)");
  cmd->add_option("--out", args.out_dir, "Work directory (overrides config)");
  cmd->add_option("--set", args.overrides, "Override a config key, e.g. --set inn.steps=100");
}

nerfmark::PipelineConfig build_config(const CommonArgs& args) {
  nerfmark::PipelineConfig cfg = args.config_path.empty()
                                     ? nerfmark::PipelineConfig()
                                     : nerfmark::PipelineConfig::from_file(args.config_path);
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.seed.empty()) cfg.set("seed", args.seed);
  if (!args.out_dir.empty()) cfg.set("work_dir", args.out_dir);
  cfg.validate();
  return cfg;
}

void report(const nerfmark::StageResult& result) {
  std::printf("[%s] done in %.1fs\n", result.name.c_str(), result.seconds);
  for (const auto& [key, value] : result.metrics)
    std::printf("  %-28s %s\n", key.c_str(), nerfmark::detail::fmt_metric(value).c_str());
  for (const std::string& artifact : result.artifacts)
    std::printf("  -> %s\n", artifact.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invertible-network watermarking for NeRF scenes"};
  app.require_subcommand(1);

  CommonArgs args;
  bool resume = false;
  bool no_iqem = false;
  std::string pose_spec = "train";
  std::string images_dir;
  std::string lost_info;
  std::string angle_spec = "0,45,90 +1";

  CLI::App* c_train_inn = app.add_subcommand("train-inn", "Train the coupling network");
  c_train_inn->add_flag("--resume", resume, "Continue from the existing checkpoint");
  CLI::App* c_embed = app.add_subcommand("embed", "Watermark every training frame");
  CLI::App* c_train_nerf = app.add_subcommand("train-nerf", "Train NeRF on the watermarked scene");
  c_train_nerf->add_flag("--resume", resume, "Continue from the existing checkpoint");
  CLI::App* c_render = app.add_subcommand("render", "Render views from the NeRF checkpoint");
  c_render->add_option("--poses", pose_spec,
                       "train | train:i,j | circle:t1,t2[@phi] | poses.json");
  CLI::App* c_train_iqem = app.add_subcommand("train-iqem", "Train the enhancement module");
  c_train_iqem->add_flag("--resume", resume, "Continue from the existing checkpoint");
  CLI::App* c_extract = app.add_subcommand("extract", "Extract watermarks from images");
  c_extract->add_option("--images", images_dir, "Directory of PNG frames")->required();
  c_extract->add_flag("--no-iqem", no_iqem, "Skip the enhancement pass");
  c_extract->add_option("--lost-info", lost_info,
                        "Use archived lost-information tensors as z (exactness checks)");
  CLI::App* c_verify = app.add_subcommand("verify", "Render, extract and report per view angle");
  c_verify->add_option("--angles", angle_spec, "e.g. \"30,45,60 +1\"");
  CLI::App* c_e2e = app.add_subcommand("e2e", "Run the whole pipeline with one seed");

  for (CLI::App* cmd : {c_train_inn, c_embed, c_train_nerf, c_render, c_train_iqem, c_extract,
                        c_verify, c_e2e})
    add_common(cmd, args);

  CLI11_PARSE(app, argc, argv);

  try {
    const nerfmark::PipelineConfig cfg = build_config(args);
    nerfmark::StageResult result;
    if (c_train_inn->parsed()) {
      result = nerfmark::cmd_train_inn(cfg, resume);
    } else if (c_embed->parsed()) {
      result = nerfmark::cmd_embed(cfg);
    } else if (c_train_nerf->parsed()) {
      result = nerfmark::cmd_train_nerf(cfg, resume);
    } else if (c_render->parsed()) {
      result = nerfmark::cmd_render(cfg, pose_spec);
    } else if (c_train_iqem->parsed()) {
      result = nerfmark::cmd_train_iqem(cfg, resume);
    } else if (c_extract->parsed()) {
      result = nerfmark::cmd_extract(cfg, images_dir, !no_iqem, lost_info);
    } else if (c_verify->parsed()) {
      result = nerfmark::cmd_verify(cfg, angle_spec);
    } else if (c_e2e->parsed()) {
      result = nerfmark::cmd_e2e(cfg);
    }
    report(result);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "nerfmark: %s\n", e.what());
    return 1;
  }
  return 0;
}
