#include "disco3d/core/params.hpp"

#include <cmath>
#include <stdexcept>

namespace disco3d {

ag::Var& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  auto [it, _] = params_.emplace(name, ag::Var(std::move(init), trainable));
  return it->second;
}

ag::Var& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [n, _] : params_) out.push_back(n);
  return out;
}

std::vector<ag::Var> ParamStore::trainable() const {
  std::vector<ag::Var> out;
  for (const auto& [_, v] : params_)
    if (v.requires_grad()) out.push_back(v);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [n, v] : params_)
    if (v.requires_grad()) out.push_back(n);
  return out;
}

void ParamStore::set_trainable(const std::string& name, bool on) { at(name).set_requires_grad(on); }

void ParamStore::freeze_all() {
  for (auto& [_, v] : params_) v.set_requires_grad(false);
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

int64_t ParamStore::count(bool trainable_only) const {
  int64_t n = 0;
  for (const auto& [_, v] : params_)
    if (!trainable_only || v.requires_grad()) n += v.numel();
  return n;
}

std::map<std::string, Tensor> ParamStore::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [n, v] : params_) out.emplace(n, v.value());
  return out;
}

void ParamStore::load(const std::map<std::string, Tensor>& values, bool strict) {
  for (auto& [n, v] : params_) {
    auto it = values.find(n);
    if (it == values.end()) {
      if (strict) throw std::invalid_argument("ParamStore::load: missing " + n);
      continue;
    }
    require_same_shape(v.value(), it->second, ("ParamStore::load " + n).c_str());
    v.mutable_value() = it->second;
  }
  if (strict) {
    for (const auto& [n, _] : values)
      if (!params_.count(n)) throw std::invalid_argument("ParamStore::load: unexpected " + n);
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [n, v] : params_) out.add(n, v.value(), v.requires_grad());
  return out;
}

Adam::Adam(std::vector<ag::Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros_like(p.value()));
    v_.push_back(Tensor::zeros_like(p.value()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const Tensor g = p.grad();
    Tensor& w = p.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t j = 0; j < w.numel(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double grad_norm(const std::vector<ag::Var>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    const Tensor g = p.grad();
    for (double v : g.vec()) s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace disco3d
