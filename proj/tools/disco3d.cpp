// disco3d command-line tool.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include "disco3d/core/errors.hpp"
#include "disco3d/eval/checkpoint.hpp"
#include "disco3d/eval/io.hpp"
#include "disco3d/eval/pipeline.hpp"
#include "disco3d/oracle.hpp"

namespace {

using namespace disco3d;
using eval::ExperimentConfig;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out = "results";
};

struct Overrides {
  std::optional<uint64_t> scene_seed;
  std::optional<int> s1_iters;
  std::optional<double> s1_lr;
  std::optional<int> s1_rank;
  std::optional<double> alpha;
  std::optional<int> d_iters;
  std::optional<double> d_lr;
  std::optional<std::string> omega;
  std::optional<double> cfg_teacher;
  std::optional<std::string> mask;
  std::optional<int> s3_iters;
  std::optional<double> l1;
  std::optional<double> perc;
  bool skip_stage1 = false;
  bool nvs_direct = false;
  bool alpha_sweep = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment JSON")->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "experiment seed");
  app->add_option("--out", c.out, "results directory");
}

void add_stage1(CLI::App* app, Overrides& o) {
  app->add_option("--scene-seed", o.scene_seed);
  app->add_option("--iters", o.s1_iters);
  app->add_option("--lr", o.s1_lr);
  app->add_option("--rank", o.s1_rank);
}

void add_ablation(CLI::App* app, Overrides& o) {
  app->add_flag("--skip-stage1", o.skip_stage1, "use the base teacher without Stage-1 adaptation");
  app->add_flag("--nvs-direct", o.nvs_direct, "replace distillation by direct teacher sampling");
  app->add_flag("--alpha-sweep", o.alpha_sweep, "also distill with alpha in {0, 1, 10, 1e2}");
}

// Distillation flags without --iters and --lr, for commands spanning several stages.
void add_distill_shared(CLI::App* app, Overrides& o) {
  app->add_option("--alpha", o.alpha);
  app->add_option("--omega", o.omega)->check(CLI::IsMember({"const", "sigma_sq"}));
  app->add_option("--cfg-teacher", o.cfg_teacher);
  add_ablation(app, o);
}

void add_distill(CLI::App* app, Overrides& o) {
  app->add_option("--iters", o.d_iters);
  app->add_option("--lr", o.d_lr);
  add_distill_shared(app, o);
}

void add_stage3(CLI::App* app, Overrides& o) {
  app->add_option("--mask", o.mask)->check(CLI::IsMember({"none", "gt"}));
  app->add_option("--iters", o.s3_iters);
  app->add_option("--l1", o.l1);
  app->add_option("--perc", o.perc);
}

ExperimentConfig resolve(const Common& c, const Overrides& o) {
  ExperimentConfig cfg = eval::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (o.scene_seed) cfg.scene.seed = *o.scene_seed;
  if (o.s1_iters) cfg.stage1.iters = *o.s1_iters;
  if (o.s1_lr) cfg.stage1.lr = *o.s1_lr;
  if (o.s1_rank) cfg.stage1.rank = *o.s1_rank;
  if (o.alpha) cfg.distill.alpha = *o.alpha;
  if (o.d_iters) cfg.distill.iters = *o.d_iters;
  if (o.d_lr) cfg.distill.lr = *o.d_lr;
  if (o.omega) cfg.distill.omega = distill::omega_kind_from_string(*o.omega);
  if (o.cfg_teacher) cfg.distill.cfg_teacher = *o.cfg_teacher;
  if (o.mask) cfg.stage3.gt_mask = *o.mask == "gt";
  if (o.s3_iters) cfg.stage3.iters = *o.s3_iters;
  if (o.l1) cfg.stage3.loss.l1_weight = *o.l1;
  if (o.perc) cfg.stage3.loss.perceptual_weight = *o.perc;
  cfg.ablation.skip_stage1 = cfg.ablation.skip_stage1 || o.skip_stage1;
  cfg.ablation.nvs_direct = cfg.ablation.nvs_direct || o.nvs_direct;
  cfg.ablation.alpha_sweep = cfg.ablation.alpha_sweep || o.alpha_sweep;
  if (eval::deterministic_env()) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

void print_rows(const eval::RunResult& r) {
  for (const auto& m : r.rows)
    std::printf("%-14s reproj %.5f  embed_sim %.4f  dir_sim %.4f  psnr %.2f\n", m.condition.c_str(), m.reproj,
                m.embed_sim, m.embed_dir_sim, m.psnr_oracle);
}

int run_oracle(const Common& c, int dim, int n) {
  ExperimentConfig cfg = eval::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  std::filesystem::create_directories(c.out);
  const auto rows = oracle::oracle_sweep(dim, n, {0, 100, 500, 900}, cfg.seed);
  oracle::write_oracle_csv(c.out + "/oracle.csv", rows);
  for (const auto& r : rows)
    std::printf("D=%d t=%4d cosine %.4f rel_err %.4f se %.4g\n", r.D, r.t, r.cosine, r.rel_err, r.se);
  return kExitOk;
}

int run_preview(const Common& c, const std::string& checkpoint) {
  const ExperimentConfig cfg = resolve(c, {});
  const eval::SourceScene src = eval::make_source(cfg);
  const editor::Editor ed = checkpoint.empty() ? eval::base_models(cfg).editor
                                               : eval::editor_from_checkpoint(eval::load_checkpoint(checkpoint));
  const Tensor edited = eval::edit_views(ed, src.views, cfg.edit.code, cfg.distill.sampler, cfg.seed);
  std::filesystem::create_directories(c.out);
  eval::write_grid(c.out + "/edit_preview.png", {src.views.images, edited, src.oracle_views.images});
  std::printf("wrote %s/edit_preview.png\n", c.out.c_str());
  return kExitOk;
}

int run_train_embedder(const std::string& path, int steps, uint64_t seed) {
  eval::EmbedderTrainConfig tc;
  tc.steps = steps;
  tc.seed = seed;
  double acc = 0.0;
  const eval::ToyEmbedder emb = eval::train_embedder(tc, &acc);
  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  emb.save(path);
  std::printf("embedder saved to %s, final batch accuracy %.3f\n", path.c_str(), acc);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disco3d: consistency-distilled multi-view editing at desk scale"};
  app.require_subcommand(1);
  Common common;
  Overrides ov;

  auto* worldgen = app.add_subcommand("worldgen", "render the source scene, oracle edit and manifest");
  add_common(worldgen, common);
  auto* stage1 = app.add_subcommand("stage1", "adapt the NVS teacher to the scene");
  add_common(stage1, common);
  add_stage1(stage1, ov);
  auto* distill_cmd = app.add_subcommand("distill", "distill consistency into the editor");
  add_common(distill_cmd, common);
  add_distill(distill_cmd, ov);
  auto* stage3 = app.add_subcommand("stage3", "update the Gaussian splat scene with the edited views");
  add_common(stage3, common);
  add_distill_shared(stage3, ov);
  add_stage3(stage3, ov);
  auto* eval_cmd = app.add_subcommand("eval", "distill and write metrics for every condition");
  add_common(eval_cmd, common);
  add_distill(eval_cmd, ov);
  auto* run = app.add_subcommand("run", "every stage end to end");
  add_common(run, common);
  run->add_option("--scene-seed", ov.scene_seed);
  run->add_option("--rank", ov.s1_rank);
  add_distill_shared(run, ov);
  run->add_option("--mask", ov.mask)->check(CLI::IsMember({"none", "gt"}));
  run->add_option("--l1", ov.l1);
  run->add_option("--perc", ov.perc);

  auto* oracle_cmd = app.add_subcommand("oracle", "score-difference gradient against the closed form");
  add_common(oracle_cmd, common);
  int oracle_dim = 2, oracle_n = 10000;
  oracle_cmd->add_option("--dim", oracle_dim)->check(CLI::Range(1, 3));
  oracle_cmd->add_option("--samples", oracle_n)->check(CLI::PositiveNumber);

  auto* preview = app.add_subcommand("edit-preview", "grid of source, edited and oracle views");
  add_common(preview, common);
  std::string preview_ckpt;
  preview->add_option("--checkpoint", preview_ckpt, "editor checkpoint (default: base editor)");

  auto* embed = app.add_subcommand("train-embedder", "train the toy evaluation embedder");
  std::string embed_out = eval::default_embedder_path();
  int embed_steps = eval::EmbedderTrainConfig{}.steps;
  uint64_t embed_seed = 0;
  embed->add_option("--out", embed_out);
  embed->add_option("--steps", embed_steps)->check(CLI::PositiveNumber);
  embed->add_option("--seed", embed_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (oracle_cmd->parsed()) return run_oracle(common, oracle_dim, oracle_n);
    if (preview->parsed()) return run_preview(common, preview_ckpt);
    if (embed->parsed()) return run_train_embedder(embed_out, embed_steps, embed_seed);
    eval::Stage until = eval::Stage::All;
    if (worldgen->parsed()) until = eval::Stage::Worldgen;
    if (stage1->parsed()) until = eval::Stage::Stage1;
    if (distill_cmd->parsed()) until = eval::Stage::Distill;
    if (eval_cmd->parsed()) until = eval::Stage::Eval;
    const ExperimentConfig cfg = resolve(common, ov);
    const eval::RunResult r = eval::run_pipeline(cfg, common.out, until);
    print_rows(r);
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitValidation;
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
}
