#include "disco3d/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace disco3d::nets {

namespace {

Tensor random_matrix(Rng& rng, int64_t rows, int64_t cols, double stddev) {
  Tensor t({rows, cols});
  for (auto& v : t.vec()) v = stddev * rng.normal();
  return t;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

const char* const kProj[] = {"q", "k", "v", "o"};

}  // namespace

void DenoiserConfig::validate(int64_t height, int64_t width) const {
  if (channels <= 0 || depth <= 0 || heads <= 0 || latent_downscale <= 0 || image_channels <= 0 ||
      cond_image_channels < 0 || cond_dim <= 0 || time_frequencies <= 0 || camera_tag_dim <= 0 || num_codes < 0) {
    throw std::invalid_argument("DenoiserConfig: fields must be positive");
  }
  if (latent_downscale != 2) throw std::invalid_argument("DenoiserConfig: only latent_downscale = 2 is supported");
  if (height % latent_downscale || width % latent_downscale) {
    throw std::invalid_argument("DenoiserConfig: latent_downscale must divide H and W");
  }
  if (channels % heads) throw std::invalid_argument("DenoiserConfig: heads must divide channels");
}

Tensor time_features(const std::vector<double>& time, int frequencies) {
  Tensor out({static_cast<int64_t>(time.size()), 2 * static_cast<int64_t>(frequencies)});
  for (size_t v = 0; v < time.size(); ++v)
    for (int f = 0; f < frequencies; ++f) {
      const double w = std::pow(2.0, f) * M_PI;
      out[static_cast<int64_t>(v) * 2 * frequencies + 2 * f] = std::sin(w * time[v]);
      out[static_cast<int64_t>(v) * 2 * frequencies + 2 * f + 1] = std::cos(w * time[v]);
    }
  return out;
}

Tensor to_latent(const Tensor& image) {
  Tensor out = image;
  for (auto& v : out.vec()) v = 2.0 * v - 1.0;
  return out;
}

Tensor to_image(const Tensor& latent) {
  Tensor out = latent;
  for (auto& v : out.vec()) v = 0.5 * v + 0.5;
  return out;
}

ag::Var to_image(const ag::Var& latent) {
  return ag::add(ag::scale(latent, 0.5), ag::constant(Tensor(latent.shape(), 0.5)));
}

Denoiser::Denoiser(DenoiserConfig cfg, Rng& rng) : cfg_(cfg) {
  const int64_t C = cfg.channels;
  const int64_t in_ch = cfg.image_channels + cfg.cond_image_channels;
  add_linear("conv_in", 9 * in_ch, C, rng);
  add_linear("enc1", 9 * C, C, rng);
  add_linear("down", 9 * C, C, rng);
  add_linear("time_mlp.0", 2 * cfg.time_frequencies, C, rng);
  add_linear("time_mlp.1", C, C, rng);
  add_linear("time_mid", C, C, rng);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    for (const char* s : kProj) add_linear(p + "self_attn." + s, C, C, rng, false);
    add_linear(p + "cross_attn.q", C, C, rng, false);
    add_linear(p + "cross_attn.k", cfg.cond_dim, C, rng, false);
    add_linear(p + "cross_attn.v", cfg.cond_dim, C, rng, false);
    add_linear(p + "cross_attn.o", C, C, rng, false);
    if (cfg.temporal) {
      for (const char* s : kProj) add_linear(p + "temporal_attn." + s, C, C, rng, false);
      add_linear(p + "camera_tag", cfg.camera_tag_dim, C, rng);
    }
    add_linear(p + "mlp.0", C, 2 * C, rng);
    add_linear(p + "mlp.1", 2 * C, C, rng);
  }
  add_linear("up", 9 * 2 * C, C, rng);
  add_linear("conv_out", 9 * C, cfg.image_channels, rng, true, 0.1);
  if (cfg.ref_encoder) {
    add_linear("ref_enc.conv", 9 * 3, C, rng);
    add_linear("ref_enc.proj", C, cfg.cond_dim, rng);
  }
  if (cfg.num_codes > 0) {
    params_.add("code_embed.weight", random_matrix(rng, cfg.num_codes, cfg.cond_dim, 1.0));
  }
  params_.add("null_token", random_matrix(rng, 1, cfg.cond_dim, 1.0));
}

void Denoiser::add_linear(const std::string& prefix, int64_t in, int64_t out, Rng& rng, bool bias, double gain) {
  params_.add(prefix + ".weight", random_matrix(rng, out, in, gain / std::sqrt(static_cast<double>(in))));
  if (bias) params_.add(prefix + ".bias", Tensor({out}, 0.0));
}

ag::Var Denoiser::linear(const std::string& prefix, const ag::Var& x, bool bias) const {
  ag::Var y = ag::matmul_nt(x, params_.at(prefix + ".weight"));
  if (bias) y = ag::add_bias(y, params_.at(prefix + ".bias"));
  auto it = adapters_.find(prefix);
  if (it != adapters_.end()) {
    ag::Var low = ag::matmul_nt(x, params_.at(prefix + ".lora_A"));
    ag::Var delta = ag::matmul_nt(low, params_.at(prefix + ".lora_B"));
    if (it->second.scale != 1.0) delta = ag::scale(delta, it->second.scale);
    y = ag::add(y, delta);
  }
  return y;
}

ag::Var Denoiser::conv3x3(const std::string& prefix, const ag::Var& x) const {
  return linear(prefix, ag::im2col3x3(x));
}

ag::Var Denoiser::time_embedding(const std::vector<double>& time) const {
  ag::Var f = ag::constant(time_features(time, cfg_.time_frequencies));
  return linear("time_mlp.1", ag::silu(linear("time_mlp.0", f)));
}

ag::Var Denoiser::cond_tokens(const DenoiserInputs& in, int64_t views) const {
  // Two key tokens per view: [condition, null]. A dropped condition uses the null token twice.
  const ag::Var& null_tok = params_.at("null_token");
  std::vector<ag::Var> rows;
  rows.reserve(static_cast<size_t>(2 * views));
  if (cfg_.ref_encoder) {
    ag::Var token = null_tok;
    if (in.ref_image) {
      const Tensor& ref = *in.ref_image;
      ag::Var img = ag::constant(ref.reshaped({1, ref.dim(0), ref.dim(1), ref.dim(2)}));
      ag::Var h = ag::silu(conv3x3("ref_enc.conv", img));
      token = linear("ref_enc.proj", ag::mean_middle(h));
    }
    for (int64_t v = 0; v < views; ++v) {
      rows.push_back(token);
      rows.push_back(null_tok);
    }
  } else {
    if (static_cast<int64_t>(in.codes.size()) != views) throw std::invalid_argument("denoise: one code per view");
    for (int64_t v = 0; v < views; ++v) {
      const int code = in.codes[static_cast<size_t>(v)];
      if (code >= cfg_.num_codes) throw std::invalid_argument("denoise: edit code out of range");
      rows.push_back(code < 0 ? null_tok : ag::take_rows(params_.at("code_embed.weight"), {code}));
      rows.push_back(null_tok);
    }
  }
  return ag::concat_rows(rows);
}

ag::Var Denoiser::forward(const ag::Var& z_t, const DenoiserInputs& in) const {
  const Tensor& z = z_t.value();
  if (z.ndim() != 4 || z.dim(3) != cfg_.image_channels) {
    throw std::invalid_argument("denoise: latent must be [V,H,W," + std::to_string(cfg_.image_channels) + "], got " +
                                shape_str(z.shape()));
  }
  const int64_t V = z.dim(0), H = z.dim(1), W = z.dim(2);
  cfg_.validate(H, W);
  const std::vector<int64_t> cond_shape{V, H, W, cfg_.cond_image_channels};
  if (in.cond_image.shape() != cond_shape) {
    throw std::invalid_argument("denoise: conditioning image shape " + shape_str(in.cond_image.shape()) +
                                ", expected " + shape_str(cond_shape));
  }
  if (static_cast<int64_t>(in.time.size()) != V) throw std::invalid_argument("denoise: one time value per view");
  if (cfg_.temporal && (in.camera_tags.ndim() != 2 || in.camera_tags.dim(0) != V ||
                        in.camera_tags.dim(1) != cfg_.camera_tag_dim)) {
    throw std::invalid_argument("denoise: camera tags must be [V, camera_tag_dim]");
  }
  const int64_t C = cfg_.channels;
  const int64_t h = H / 2, w = W / 2, P = h * w;

  ag::Var temb = time_embedding(in.time);
  ag::Var x = ag::concat_last(z_t, ag::constant(in.cond_image));
  ag::Var h1 = ag::silu(ag::add_group_vec(conv3x3("conv_in", x), temb));
  h1 = ag::silu(conv3x3("enc1", h1));
  ag::Var d = ag::silu(conv3x3("down", ag::avgpool2(h1)));
  d = ag::add_group_vec(d, linear("time_mid", ag::silu(temb)));
  ag::Var tokens = ag::reshape(d, {V * P, C});

  std::vector<std::vector<int64_t>> view_groups(static_cast<size_t>(V));
  std::vector<std::vector<int64_t>> key_groups(static_cast<size_t>(V));
  for (int64_t v = 0; v < V; ++v) {
    for (int64_t p = 0; p < P; ++p) view_groups[v].push_back(v * P + p);
    key_groups[v] = {2 * v, 2 * v + 1};
  }
  std::vector<std::vector<int64_t>> position_groups(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p)
    for (int64_t v = 0; v < V; ++v) position_groups[p].push_back(v * P + p);

  ag::Var cond = cond_tokens(in, V);

  for (int b = 0; b < cfg_.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    {
      ag::Var n = ag::layernorm_last(tokens);
      ag::Var a = ag::attention(linear(p + "self_attn.q", n, false), linear(p + "self_attn.k", n, false),
                                linear(p + "self_attn.v", n, false), view_groups, view_groups, cfg_.heads);
      tokens = ag::add(tokens, linear(p + "self_attn.o", a, false));
    }
    {
      ag::Var n = ag::layernorm_last(tokens);
      ag::Var a = ag::attention(linear(p + "cross_attn.q", n, false), linear(p + "cross_attn.k", cond, false),
                                linear(p + "cross_attn.v", cond, false), view_groups, key_groups, cfg_.heads);
      tokens = ag::add(tokens, linear(p + "cross_attn.o", a, false));
    }
    if (cfg_.temporal && temporal_enabled_) {
      ag::Var n = ag::layernorm_last(tokens);
      ag::Var tag = linear(p + "camera_tag", ag::constant(in.camera_tags));
      n = ag::reshape(ag::add_group_vec(ag::reshape(n, {V, P, C}), tag), {V * P, C});
      ag::Var a = ag::attention(linear(p + "temporal_attn.q", n, false), linear(p + "temporal_attn.k", n, false),
                                linear(p + "temporal_attn.v", n, false), position_groups, position_groups,
                                cfg_.heads);
      tokens = ag::add(tokens, linear(p + "temporal_attn.o", a, false));
    }
    {
      ag::Var n = ag::layernorm_last(tokens);
      tokens = ag::add(tokens, linear(p + "mlp.1", ag::silu(linear(p + "mlp.0", n))));
    }
  }

  ag::Var u = ag::upsample2(ag::reshape(tokens, {V, h, w, C}));
  u = ag::silu(conv3x3("up", ag::concat_last(u, h1)));
  return conv3x3("conv_out", u);
}

std::vector<std::string> Denoiser::layers_matching(LayerFilter filter) const {
  const std::string key = filter == LayerFilter::Temporal ? ".temporal_attn." : ".self_attn.";
  std::vector<std::string> out;
  for (const auto& name : params_.names()) {
    if (!ends_with(name, ".weight")) continue;
    if (name.find(key) == std::string::npos) continue;
    out.push_back(name.substr(0, name.size() - std::string(".weight").size()));
  }
  return out;
}

std::vector<LoRAAdapter> Denoiser::attach_lora(LayerFilter filter, int rank, Rng& rng) {
  const auto layers = layers_matching(filter);
  if (layers.empty()) throw std::invalid_argument("attach_lora: no layers match the filter");
  std::vector<LoRAAdapter> created;
  for (const auto& layer : layers) {
    if (adapters_.count(layer)) throw std::invalid_argument("attach_lora: layer already adapted: " + layer);
    const Tensor& w0 = params_.at(layer + ".weight").value();
    LoRAAdapter ad{layer, w0.dim(0), w0.dim(1), rank, 1.0};
    if (rank <= 0 || rank >= std::min(ad.d, ad.k)) {
      throw std::invalid_argument("attach_lora: rank " + std::to_string(rank) + " must satisfy 0 < r < min(d, k) = " +
                                  std::to_string(std::min(ad.d, ad.k)));
    }
    created.push_back(ad);
  }
  params_.freeze_all();
  for (const auto& ad : created) {
    params_.add(ad.target + ".lora_A",
                random_matrix(rng, ad.rank, ad.k, 1.0 / std::sqrt(static_cast<double>(ad.k))));
    params_.add(ad.target + ".lora_B", Tensor({ad.d, static_cast<int64_t>(ad.rank)}, 0.0));
    adapters_.emplace(ad.target, ad);
  }
  return created;
}

std::vector<std::string> Denoiser::lora_param_names() const {
  std::vector<std::string> out;
  for (const auto& [layer, _] : adapters_) {
    out.push_back(layer + ".lora_A");
    out.push_back(layer + ".lora_B");
  }
  return out;
}

Denoiser Denoiser::clone() const {
  Denoiser out;
  out.cfg_ = cfg_;
  out.params_ = params_.clone();
  out.adapters_ = adapters_;
  out.temporal_enabled_ = temporal_enabled_;
  return out;
}

}  // namespace disco3d::nets
