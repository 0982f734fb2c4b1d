#include "disco3d/eval/checkpoint.hpp"

#include <spdlog/spdlog.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace disco3d::eval {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'C', '3', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const uint32_t n = get<uint32_t>(in);
  if (n > (1u << 28)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

json config_json(const nets::DenoiserConfig& c) {
  return {{"channels", c.channels},
          {"depth", c.depth},
          {"heads", c.heads},
          {"latent_downscale", c.latent_downscale},
          {"image_channels", c.image_channels},
          {"cond_image_channels", c.cond_image_channels},
          {"cond_dim", c.cond_dim},
          {"time_frequencies", c.time_frequencies},
          {"num_codes", c.num_codes},
          {"temporal", c.temporal},
          {"ref_encoder", c.ref_encoder},
          {"camera_tag_dim", c.camera_tag_dim}};
}

nets::DenoiserConfig config_from_json(const json& j) {
  nets::DenoiserConfig c;
  c.channels = j.at("channels");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.latent_downscale = j.at("latent_downscale");
  c.image_channels = j.at("image_channels");
  c.cond_image_channels = j.at("cond_image_channels");
  c.cond_dim = j.at("cond_dim");
  c.time_frequencies = j.at("time_frequencies");
  c.num_codes = j.at("num_codes");
  c.temporal = j.at("temporal");
  c.ref_encoder = j.at("ref_encoder");
  c.camera_tag_dim = j.at("camera_tag_dim");
  return c;
}

Checkpoint from_net(const std::string& kind, const nets::Denoiser& net, const NoiseSchedule& sch, uint64_t hash) {
  Checkpoint ck;
  ck.kind = kind;
  json model{{"config", config_json(net.config())}};
  if (net.has_lora()) {
    const auto& ad = net.adapters().begin()->second;
    const bool temporal = ad.target.find(".temporal_attn.") != std::string::npos;
    model["lora"] = {{"filter", temporal ? "temporal" : "self_attention"}, {"rank", ad.rank}};
  }
  ck.model = model.dump();
  ck.schedule_kind = sch.kind();
  ck.schedule_steps = sch.steps();
  ck.schedule_params = sch.params();
  ck.config_hash = hash;
  ck.arrays = net.params().snapshot();
  for (const auto& [name, var] : net.params().all()) ck.trainable[name] = var.requires_grad();
  return ck;
}

nets::Denoiser net_from(const Checkpoint& ck) {
  const json model = json::parse(ck.model);
  Rng rng(0);
  nets::Denoiser net(config_from_json(model.at("config")), rng);
  if (model.contains("lora")) {
    const auto filter =
        model["lora"].at("filter") == "temporal" ? nets::LayerFilter::Temporal : nets::LayerFilter::SelfAttention;
    net.attach_lora(filter, model["lora"].at("rank").get<int>(), rng);
  }
  net.params().load(ck.arrays, true);
  for (const auto& [name, on] : ck.trainable) net.params().set_trainable(name, on);
  return net;
}

}  // namespace

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<uint64_t>(out, ck.config_hash);
  put_string(out, ck.kind);
  put_string(out, ck.model);
  put<uint32_t>(out, static_cast<uint32_t>(ck.schedule_kind));
  put<uint32_t>(out, static_cast<uint32_t>(ck.schedule_steps));
  put<uint32_t>(out, static_cast<uint32_t>(ck.schedule_params.size()));
  for (double p : ck.schedule_params) put<double>(out, p);
  put<uint32_t>(out, static_cast<uint32_t>(ck.arrays.size()));
  for (const auto& [name, t] : ck.arrays) {
    put_string(out, name);
    put<uint8_t>(out, 0);
    auto it = ck.trainable.find(name);
    put<uint8_t>(out, it != ck.trainable.end() && it->second ? 1 : 0);
    put<uint32_t>(out, static_cast<uint32_t>(t.ndim()));
    for (int64_t d : t.shape()) put<uint64_t>(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path, std::optional<uint64_t> expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = get<uint32_t>(in);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = get<uint64_t>(in);
  ck.kind = get_string(in);
  ck.model = get_string(in);
  const uint32_t kind = get<uint32_t>(in);
  if (kind > 1) throw std::runtime_error("checkpoint: unknown schedule kind");
  ck.schedule_kind = static_cast<ScheduleKind>(kind);
  ck.schedule_steps = static_cast<int>(get<uint32_t>(in));
  const uint32_t np = get<uint32_t>(in);
  for (uint32_t i = 0; i < np; ++i) ck.schedule_params.push_back(get<double>(in));
  const uint32_t n = get<uint32_t>(in);
  for (uint32_t a = 0; a < n; ++a) {
    const std::string name = get_string(in);
    if (get<uint8_t>(in) != 0) throw std::runtime_error("checkpoint: unsupported dtype for " + name);
    ck.trainable[name] = get<uint8_t>(in) != 0;
    const uint32_t ndim = get<uint32_t>(in);
    std::vector<int64_t> shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int64_t>(get<uint64_t>(in)));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated array " + name);
    ck.arrays.emplace(name, std::move(t));
  }
  if (expected_hash && *expected_hash != ck.config_hash) {
    spdlog::warn("checkpoint {} was written under config hash {:016x}, current config hashes to {:016x}", path,
                 ck.config_hash, *expected_hash);
  }
  return ck;
}

Checkpoint to_checkpoint(const nvs::Teacher& teacher, uint64_t config_hash) {
  return from_net("teacher", teacher.net(), teacher.schedule(), config_hash);
}

Checkpoint to_checkpoint(const editor::Editor& editor, uint64_t config_hash) {
  return from_net("editor", editor.net(), editor.schedule(), config_hash);
}

nvs::Teacher teacher_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "teacher") throw std::runtime_error("checkpoint: expected a teacher, found " + ck.kind);
  return nvs::Teacher(net_from(ck), NoiseSchedule::from_params(ck.schedule_kind, ck.schedule_steps, ck.schedule_params));
}

editor::Editor editor_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "editor") throw std::runtime_error("checkpoint: expected an editor, found " + ck.kind);
  return editor::Editor(net_from(ck),
                        NoiseSchedule::from_params(ck.schedule_kind, ck.schedule_steps, ck.schedule_params));
}

}  // namespace disco3d::eval
