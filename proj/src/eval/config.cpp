#include "disco3d/eval/config.hpp"

#include <cstdlib>
#include <set>
#include <stdexcept>

#include "disco3d/eval/checkpoint.hpp"
#include "disco3d/eval/io.hpp"
#include "json.hpp"

namespace disco3d::eval {

namespace {

using nlohmann::json;

// Reads known keys from one JSON object and rejects the rest on finish().
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(where_ + "." + key + ": wrong type");
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw std::invalid_argument(where_ + ": unknown key '" + key + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::string complexity_name(worldgen::Complexity c) { return c == worldgen::Complexity::Small ? "small" : "medium"; }

worldgen::Complexity complexity_from(const std::string& s) {
  if (s == "small") return worldgen::Complexity::Small;
  if (s == "medium") return worldgen::Complexity::Medium;
  throw std::invalid_argument("scene.complexity: expected small or medium");
}

void read_sampler(const json& j, editor::SamplerConfig& s) {
  Reader r(j, "distill.sampler");
  r.get("s_T", s.s_T);
  r.get("s_I", s.s_I);
  r.get("steps", s.steps);
  r.get("refl_lo", s.refl_lo);
  r.get("refl_hi", s.refl_hi);
  r.finish();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) throw std::invalid_argument("config: unsupported version " + std::to_string(version));
  if (scene.height < 8 || scene.width < 8 || scene.height % 4 || scene.width % 4)
    throw std::invalid_argument("scene: height and width must be multiples of 4 and at least 8");
  if (scene.views < 3) throw std::invalid_argument("scene.views must be >= 3");
  if (scene.clip_length < 2 || scene.clip_length > scene.views)
    throw std::invalid_argument("scene.clip_length must be in [2, views]");
  worldgen::edit_info(edit.code);
  if (edit.variant < 0) throw std::invalid_argument("edit.variant must be >= 0");
  if (pretrain.scenes < 8 || pretrain.teacher_steps < 0 || pretrain.editor_steps < 0 || !(pretrain.lr > 0.0))
    throw std::invalid_argument("pretrain: need >= 8 scenes, non-negative steps and a positive lr");
  if (stage1.iters < 0 || !(stage1.lr > 0.0) || stage1.rank < 1)
    throw std::invalid_argument("stage1: need iters >= 0, lr > 0 and rank >= 1");
  distill.validate();
  if (stage3.gaussians < 1 || stage3.fit_iters < 0 || stage3.iters < 0)
    throw std::invalid_argument("stage3: need gaussians >= 1 and non-negative iteration counts");
  stage3.loss.validate();
  if (eval_samples < 1) throw std::invalid_argument("eval_samples must be >= 1");
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (!j.is_object() || !j.contains("version")) throw std::invalid_argument("config: missing required field 'version'");
  ExperimentConfig c;
  Reader r(j, "config");
  r.get("version", c.version);
  if (c.version != kConfigVersion) throw std::invalid_argument("config: unsupported version " + std::to_string(c.version));
  r.get("seed", c.seed);
  r.get("all_pairs", c.all_pairs);
  r.get("eval_samples", c.eval_samples);
  r.get("embedder", c.embedder_path);
  r.get("cache_dir", c.cache_dir);
  r.get("deterministic", c.deterministic);
  if (const json* s = r.child("scene")) {
    Reader q(*s, "scene");
    q.get("seed", c.scene.seed);
    std::string cx = complexity_name(c.scene.complexity);
    q.get("complexity", cx);
    c.scene.complexity = complexity_from(cx);
    q.get("height", c.scene.height);
    q.get("width", c.scene.width);
    q.get("views", c.scene.views);
    q.get("clip_length", c.scene.clip_length);
    q.finish();
  }
  if (const json* s = r.child("edit")) {
    Reader q(*s, "edit");
    q.get("code", c.edit.code);
    q.get("variant", c.edit.variant);
    q.finish();
  }
  if (const json* s = r.child("pretrain")) {
    Reader q(*s, "pretrain");
    q.get("scenes", c.pretrain.scenes);
    q.get("scene_seed_base", c.pretrain.scene_seed_base);
    q.get("teacher_steps", c.pretrain.teacher_steps);
    q.get("editor_steps", c.pretrain.editor_steps);
    q.get("lr", c.pretrain.lr);
    q.finish();
  }
  if (const json* s = r.child("stage1")) {
    Reader q(*s, "stage1");
    q.get("iters", c.stage1.iters);
    q.get("lr", c.stage1.lr);
    q.get("rank", c.stage1.rank);
    q.finish();
  }
  if (const json* s = r.child("distill")) {
    Reader q(*s, "distill");
    auto& d = c.distill;
    q.get("alpha", d.alpha);
    q.get("lr", d.lr);
    q.get("iters", d.iters);
    std::string omega = distill::to_string(d.omega);
    q.get("omega", omega);
    d.omega = distill::omega_kind_from_string(omega);
    std::string red = distill::to_string(d.reduction);
    q.get("reduction", red);
    d.reduction = distill::reduction_from_string(red);
    q.get("t_lo", d.t_lo);
    q.get("t_hi", d.t_hi);
    q.get("phi_steps", d.phi_steps);
    q.get("cfg_teacher", d.cfg_teacher);
    q.get("rank", d.rank);
    if (const json* sp = q.child("sampler")) read_sampler(*sp, d.sampler);
    q.finish();
  }
  if (const json* s = r.child("stage3")) {
    Reader q(*s, "stage3");
    auto& t = c.stage3;
    q.get("gaussians", t.gaussians);
    q.get("fit_iters", t.fit_iters);
    q.get("iters", t.iters);
    std::string mask = t.gt_mask ? "gt" : "none";
    q.get("mask", mask);
    if (mask != "gt" && mask != "none") throw std::invalid_argument("stage3.mask: expected none or gt");
    t.gt_mask = mask == "gt";
    q.get("l1", t.loss.l1_weight);
    q.get("perc", t.loss.perceptual_weight);
    q.get("lr_position", t.optim.lr_position);
    q.get("lr_scale", t.optim.lr_scale);
    q.get("lr_rotation", t.optim.lr_rotation);
    q.get("lr_opacity", t.optim.lr_opacity);
    q.get("lr_color", t.optim.lr_color);
    q.finish();
  }
  if (const json* s = r.child("ablation")) {
    Reader q(*s, "ablation");
    q.get("skip_stage1", c.ablation.skip_stage1);
    q.get("nvs_direct", c.ablation.nvs_direct);
    q.get("alpha_sweep", c.ablation.alpha_sweep);
    q.finish();
  }
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) { return config_from_json(read_text(path)); }

std::string config_to_json(const ExperimentConfig& c) {
  const auto& d = c.distill;
  const auto& t = c.stage3;
  const json j{
      {"version", c.version},
      {"seed", c.seed},
      {"all_pairs", c.all_pairs},
      {"eval_samples", c.eval_samples},
      {"embedder", c.embedder_path},
      {"cache_dir", c.cache_dir},
      {"deterministic", c.deterministic},
      {"scene",
       {{"seed", c.scene.seed},
        {"complexity", complexity_name(c.scene.complexity)},
        {"height", c.scene.height},
        {"width", c.scene.width},
        {"views", c.scene.views},
        {"clip_length", c.scene.clip_length}}},
      {"edit", {{"code", c.edit.code}, {"variant", c.edit.variant}}},
      {"pretrain",
       {{"scenes", c.pretrain.scenes},
        {"scene_seed_base", c.pretrain.scene_seed_base},
        {"teacher_steps", c.pretrain.teacher_steps},
        {"editor_steps", c.pretrain.editor_steps},
        {"lr", c.pretrain.lr}}},
      {"stage1", {{"iters", c.stage1.iters}, {"lr", c.stage1.lr}, {"rank", c.stage1.rank}}},
      {"distill",
       {{"alpha", d.alpha},
        {"lr", d.lr},
        {"iters", d.iters},
        {"omega", distill::to_string(d.omega)},
        {"reduction", distill::to_string(d.reduction)},
        {"t_lo", d.t_lo},
        {"t_hi", d.t_hi},
        {"phi_steps", d.phi_steps},
        {"cfg_teacher", d.cfg_teacher},
        {"rank", d.rank},
        {"sampler",
         {{"s_T", d.sampler.s_T},
          {"s_I", d.sampler.s_I},
          {"steps", d.sampler.steps},
          {"refl_lo", d.sampler.refl_lo},
          {"refl_hi", d.sampler.refl_hi}}}}},
      {"stage3",
       {{"gaussians", t.gaussians},
        {"fit_iters", t.fit_iters},
        {"iters", t.iters},
        {"mask", t.gt_mask ? "gt" : "none"},
        {"l1", t.loss.l1_weight},
        {"perc", t.loss.perceptual_weight},
        {"lr_position", t.optim.lr_position},
        {"lr_scale", t.optim.lr_scale},
        {"lr_rotation", t.optim.lr_rotation},
        {"lr_opacity", t.optim.lr_opacity},
        {"lr_color", t.optim.lr_color}}},
      {"ablation",
       {{"skip_stage1", c.ablation.skip_stage1},
        {"nvs_direct", c.ablation.nvs_direct},
        {"alpha_sweep", c.ablation.alpha_sweep}}}};
  return j.dump(2) + "\n";
}

uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg)); }

bool deterministic_env() {
  const char* v = std::getenv("DISCO3D_DETERMINISTIC");
  return v && std::string(v) == "1";
}

}  // namespace disco3d::eval
