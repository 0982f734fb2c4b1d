#include "disco3d/eval/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "disco3d/core/errors.hpp"
#include "disco3d/eval/checkpoint.hpp"
#include "disco3d/eval/io.hpp"
#include "disco3d/eval/metrics.hpp"
#include "json.hpp"

#ifndef DISCO3D_ASSET_DIR
#define DISCO3D_ASSET_DIR "assets"
#endif

namespace disco3d::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

uint64_t base_key(const ExperimentConfig& cfg) {
  const auto& p = cfg.pretrain;
  const json j{{"scenes", p.scenes},          {"base", p.scene_seed_base}, {"teacher_steps", p.teacher_steps},
               {"editor_steps", p.editor_steps}, {"lr", p.lr},              {"height", cfg.scene.height},
               {"width", cfg.scene.width},    {"views", cfg.scene.views},  {"clip", cfg.scene.clip_length}};
  return fnv1a(j.dump());
}

// Writes next to the destination, then renames, so a cache entry is never half-written.
void save_atomic(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, ck);
  fs::rename(tmp, path);
}

void write_curve(const std::string& path, const std::string& column, const std::vector<double>& values) {
  std::ostringstream out;
  out << "iter," << column << "\n";
  for (size_t i = 0; i < values.size(); ++i) out << i << "," << fmt_double(values[i]) << "\n";
  write_text(path, out.str());
}

MetricRow average_rows(const std::vector<MetricRow>& rows) {
  MetricRow m;
  m.condition = rows.front().condition;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    m.reproj += r.reproj / n;
    m.reproj_skipped += r.reproj_skipped;
    m.embed_sim += r.embed_sim / n;
    m.embed_dir_sim += r.embed_dir_sim / n;
    m.embed_dir_consistency += r.embed_dir_consistency / n;
    m.embed_skipped += r.embed_skipped;
    m.psnr_oracle += r.psnr_oracle / n;
  }
  return m;
}

}  // namespace

SourceScene make_source(const ExperimentConfig& cfg) {
  const auto& s = cfg.scene;
  SourceScene out;
  out.scene = worldgen::generate_scene(s.seed, s.complexity);
  out.oracle = {cfg.edit.code, 0, static_cast<uint64_t>(cfg.edit.variant)};
  const auto traj = worldgen::default_trajectory(out.scene, s.views);
  out.views = worldgen::render_views(out.scene, traj, s.height, s.width, s.clip_length);
  out.oracle_views =
      worldgen::render_views(worldgen::apply_edit(out.scene, out.oracle), traj, s.height, s.width, s.clip_length);
  return out;
}

std::string cache_root(const ExperimentConfig& cfg) {
  if (!cfg.cache_dir.empty()) return cfg.cache_dir;
  if (const char* env = std::getenv("DISCO3D_CACHE"); env && *env) return env;
  return ".disco3d_cache";
}

BaseModels base_models(const ExperimentConfig& cfg) {
  const std::string dir = cache_root(cfg) + "/base-" + hex(base_key(cfg));
  const std::string tpath = dir + "/teacher.dc3k", epath = dir + "/editor.dc3k";
  if (fs::exists(tpath) && fs::exists(epath)) {
    return {teacher_from_checkpoint(load_checkpoint(tpath)), editor_from_checkpoint(load_checkpoint(epath))};
  }
  fs::create_directories(dir);
  const auto& p = cfg.pretrain;
  std::vector<worldgen::Scene> worlds;
  for (int i = 0; i < p.scenes; ++i)
    worlds.push_back(worldgen::generate_scene(p.scene_seed_base + static_cast<uint64_t>(i),
                                              i % 2 ? worldgen::Complexity::Medium : worldgen::Complexity::Small));
  spdlog::info("pretraining base teacher ({} steps) and editor ({} steps) into {}", p.teacher_steps, p.editor_steps,
               dir);
  nvs::PretrainConfig tc;
  tc.steps = p.teacher_steps;
  tc.lr = p.lr;
  tc.views = cfg.scene.views;
  tc.clip_length = cfg.scene.clip_length;
  tc.height = cfg.scene.height;
  tc.width = cfg.scene.width;
  nvs::Teacher teacher = nvs::pretrain_base(worlds, tc);
  save_atomic(tpath, to_checkpoint(teacher, base_key(cfg)));
  editor::EditorPretrainConfig ec;
  ec.steps = p.editor_steps;
  ec.lr = p.lr;
  ec.views = cfg.scene.views;
  ec.height = cfg.scene.height;
  ec.width = cfg.scene.width;
  editor::Editor ed = editor::pretrain_editor(worlds, ec);
  save_atomic(epath, to_checkpoint(ed, base_key(cfg)));
  return {std::move(teacher), std::move(ed)};
}

nvs::Teacher stage1_teacher(const ExperimentConfig& cfg, const nvs::Teacher& base, const worldgen::ViewSet& views,
                            std::vector<double>* losses) {
  const json key{{"base", base_key(cfg)},
                 {"scene", cfg.scene.seed},
                 {"complexity", static_cast<int>(cfg.scene.complexity)},
                 {"iters", cfg.stage1.iters},
                 {"lr", cfg.stage1.lr},
                 {"rank", cfg.stage1.rank},
                 {"seed", cfg.seed}};
  const std::string stem = cache_root(cfg) + "/stage1-" + hex(fnv1a(key.dump()));
  if (fs::exists(stem + ".dc3k") && fs::exists(stem + ".csv")) {
    if (losses) {
      losses->clear();
      std::istringstream in(read_text(stem + ".csv"));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) losses->push_back(std::stod(line.substr(line.find(',') + 1)));
    }
    return teacher_from_checkpoint(load_checkpoint(stem + ".dc3k"));
  }
  nvs::Teacher t = base.clone();
  nvs::Stage1Config s1 = cfg.stage1;
  s1.seed = cfg.seed;
  const nvs::TrainLog log = nvs::finetune_stage1(t, views, s1);
  fs::create_directories(cache_root(cfg));
  write_curve(stem + ".csv", "loss", log.losses);
  save_atomic(stem + ".dc3k", to_checkpoint(t, fnv1a(key.dump())));
  if (losses) *losses = log.losses;
  return t;
}

Tensor edit_views(const editor::Editor& editor, const worldgen::ViewSet& views, int code,
                  const editor::SamplerConfig& sampler, uint64_t seed) {
  Rng rng = Rng::derive(seed, 20);
  return editor::sample(editor, views.images, code, sampler, rng);
}

Tensor refl_views(const editor::Editor& editor, const worldgen::ViewSet& views, int code,
                  const editor::SamplerConfig& sampler, uint64_t seed) {
  Rng rng = Rng::derive(seed, 20);
  const Tensor z_T = editor::initial_latent(editor, views.views(), views.height(), views.width(), rng);
  Rng trng = Rng::derive(seed, 22);
  const int t = static_cast<int>(trng.uniform_int(sampler.refl_lo, sampler.refl_hi));
  ag::NoGradGuard ng;
  Tensor out = editor::refl_sample_at(editor, views.images, code, sampler, z_T, t).images.value();
  for (auto& v : out.vec()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor nvs_direct_views(const nvs::Teacher& teacher, const editor::Editor& editor, const worldgen::ViewSet& views,
                        int code, const ExperimentConfig& cfg, uint64_t seed) {
  Rng rng = Rng::derive(seed, 21);
  const Tensor ref_edit = editor::edit_reference(editor, views.image(views.ref_index), code, cfg.distill.sampler, rng);
  const auto maps = worldgen::make_render_maps(ref_edit, views);
  const int64_t row = ref_edit.numel();
  Tensor out(views.images.shape());
  for (const auto& clip : views.clips) {
    const auto cond = nvs::make_condition(views, maps, ref_edit, clip);
    const Tensor imgs = nvs::sample_clip(teacher, cond, rng, 50, cfg.distill.cfg_teacher);
    for (size_t k = 0; k < clip.size(); ++k) {
      const double* src = clip[k] == views.ref_index ? ref_edit.data() : imgs.data() + static_cast<int64_t>(k) * row;
      std::copy(src, src + row, out.data() + clip[k] * row);
    }
  }
  return out;
}

MetricRow evaluate(const std::string& condition, const Tensor& edited, const SourceScene& src,
                   const Embedder& embedder, bool all_pairs) {
  MetricRow r;
  r.condition = condition;
  const PairScore rp = reproj_inconsistency(edited, src.views, all_pairs);
  r.reproj = rp.value;
  r.reproj_skipped = rp.skipped;
  const auto edited_scene = worldgen::apply_edit(src.scene, src.oracle);
  const EmbedReport e =
      embed_metrics(edited, src.views.images, describe(src.scene), describe(edited_scene), embedder, all_pairs);
  r.embed_sim = e.sim_mean;
  r.embed_dir_sim = e.dir_sim_mean;
  r.embed_dir_consistency = e.dir_consistency_mean;
  r.embed_skipped = e.pairs_skipped;
  r.psnr_oracle = psnr(edited, src.oracle_views.images);
  return r;
}

std::string default_embedder_path() {
  if (const char* env = std::getenv("DISCO3D_ASSETS"); env && *env) return std::string(env) + "/toy_embedder.dc3k";
  return std::string(DISCO3D_ASSET_DIR) + "/toy_embedder.dc3k";
}

ToyEmbedder load_embedder(const ExperimentConfig& cfg) {
  return ToyEmbedder::load(cfg.embedder_path.empty() ? default_embedder_path() : cfg.embedder_path);
}

const MetricRow* RunResult::find(const std::string& condition) const {
  for (const auto& r : rows)
    if (r.condition == condition) return &r;
  return nullptr;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "condition,reproj_inconsistency,reproj_pairs_skipped,embed_sim,embed_dir_sim,embed_dir_consistency,"
         "embed_pairs_skipped,psnr_oracle\n";
  for (const auto& r : rows)
    out << r.condition << "," << fmt_double(r.reproj) << "," << r.reproj_skipped << "," << fmt_double(r.embed_sim)
        << "," << fmt_double(r.embed_dir_sim) << "," << fmt_double(r.embed_dir_consistency) << "," << r.embed_skipped
        << "," << fmt_double(r.psnr_oracle) << "\n";
  write_text(path, out.str());
}

namespace {

RunResult run_stages(const ExperimentConfig& cfg, const std::string& out, Stage until) {
  RunResult result;
  write_text(out + "/config.json", config_to_json(cfg));
  const SourceScene src = make_source(cfg);
  write_scene_json(out + "/scene.json", src.scene, src.views.traj);
  write_viewset(out + "/source", src.views);
  write_grid(out + "/grids/source.png", {src.views.images, src.oracle_views.images});
  if (until == Stage::Worldgen) return result;

  const BaseModels base = base_models(cfg);
  std::vector<double> s1_losses;
  const nvs::Teacher teacher =
      cfg.ablation.skip_stage1 ? base.teacher.clone() : stage1_teacher(cfg, base.teacher, src.views, &s1_losses);
  if (!cfg.ablation.skip_stage1) write_curve(out + "/curves/stage1.csv", "loss", s1_losses);
  save_checkpoint(out + "/checkpoints/teacher.dc3k", to_checkpoint(teacher, config_hash(cfg)));
  if (until == Stage::Stage1) return result;

  const ToyEmbedder embedder = load_embedder(cfg);
  const Embedder emb = embedder.as_embedder();
  const int code = cfg.edit.code;
  auto evaluate_sampler = [&](const std::string& name, const std::function<Tensor(uint64_t)>& make) {
    std::vector<MetricRow> rows;
    Tensor first;
    for (int s = 0; s < cfg.eval_samples; ++s) {
      Tensor edited = make(cfg.seed * 1000 + static_cast<uint64_t>(s));
      rows.push_back(evaluate(name, edited, src, emb, cfg.all_pairs));
      if (s == 0) first = std::move(edited);
    }
    result.rows.push_back(average_rows(rows));
    return first;
  };

  const Tensor undistilled = evaluate_sampler(
      "undistilled", [&](uint64_t s) { return edit_views(base.editor, src.views, code, cfg.distill.sampler, s); });
  evaluate_sampler("undistilled_refl",
                   [&](uint64_t s) { return refl_views(base.editor, src.views, code, cfg.distill.sampler, s); });
  Tensor edited;
  std::string edited_name;
  if (cfg.ablation.nvs_direct) {
    edited_name = "nvs_direct";
    edited = evaluate_sampler(
        edited_name, [&](uint64_t s) { return nvs_direct_views(teacher, base.editor, src.views, code, cfg, s); });
  } else {
    distill::DistillConfig dc = cfg.distill;
    dc.seed = cfg.seed;
    distill::DistillState st = distill::init_state(base.editor, teacher, src.views, code, dc);
    distill::train(st, src.views, dc);
    result.distill_log = st.history;
    distill::write_log_csv(out + "/curves/distill.csv", st.history);
    save_checkpoint(out + "/checkpoints/editor.dc3k", to_checkpoint(st.editor, config_hash(cfg)));
    edited_name = "distilled";
    edited = evaluate_sampler(
        edited_name, [&](uint64_t s) { return edit_views(st.editor, src.views, code, cfg.distill.sampler, s); });
    evaluate_sampler("distilled_refl",
                     [&](uint64_t s) { return refl_views(st.editor, src.views, code, cfg.distill.sampler, s); });
  }
  write_grid(out + "/grids/edits.png", {src.views.images, src.oracle_views.images, undistilled, edited});

  if (cfg.ablation.alpha_sweep) {
    std::vector<Tensor> grid{src.views.images};
    for (double a : {0.0, 1.0, 10.0, 1e2}) {
      distill::DistillConfig dc = cfg.distill;
      dc.seed = cfg.seed;
      dc.alpha = a;
      distill::DistillState st = distill::init_state(base.editor, teacher, src.views, code, dc);
      distill::train(st, src.views, dc);
      const std::string name = "alpha_" + fmt_double(a);
      distill::write_log_csv(out + "/curves/" + name + ".csv", st.history);
      grid.push_back(evaluate_sampler(
          name, [&](uint64_t s) { return edit_views(st.editor, src.views, code, cfg.distill.sampler, s); }));
    }
    write_grid(out + "/grids/alpha_sweep.png", grid);
  }
  write_metrics_csv(out + "/metrics.csv", result.rows);
  if (until == Stage::Distill || until == Stage::Eval) return result;

  splat::OptimConfig fit = cfg.stage3.optim;
  fit.iters = cfg.stage3.fit_iters;
  fit.seed = cfg.seed;
  const splat::GaussianCloud cloud = splat::fit_initial(src.views, cfg.stage3.gaussians, fit, cfg.stage3.loss);
  splat::save_cloud(out + "/checkpoints/source.dc3g", cloud);
  std::optional<Tensor> mask;
  if (cfg.stage3.gt_mask)
    mask = worldgen::gt_mask(src.scene, src.oracle, src.views.traj, src.views.height(), src.views.width());
  splat::OptimConfig upd = fit;
  upd.iters = cfg.stage3.iters;
  const splat::GaussianCloud updated = splat::update_with_edits(cloud, src.views, edited, cfg.stage3.loss, mask, upd);
  splat::save_cloud(out + "/checkpoints/edited.dc3g", updated);
  const Tensor renders = splat::render_all(updated, src.views);
  result.rows.push_back(evaluate("stage3", renders, src, emb, cfg.all_pairs));
  write_grid(out + "/grids/stage3.png", {splat::render_all(cloud, src.views), edited, renders});
  write_metrics_csv(out + "/metrics.csv", result.rows);
  return result;
}

}  // namespace

RunResult run_pipeline(const ExperimentConfig& cfg, const std::string& out, Stage until) {
  cfg.validate();
  for (const char* sub : {"checkpoints", "grids", "curves"}) fs::create_directories(fs::path(out) / sub);
  fs::remove(out + "/FAILED");
  try {
    return run_stages(cfg, out, until);
  } catch (const std::exception& e) {
    write_text(out + "/FAILED", std::string(e.what()) + "\n");
    throw;
  }
}

}  // namespace disco3d::eval
