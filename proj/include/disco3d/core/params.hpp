#pragma once

#include <map>
#include <string>
#include <vector>

#include "disco3d/core/autograd.hpp"

namespace disco3d {

/// Named parameter registry. Names are dotted paths ("blocks.0.self_attn.q.weight")
/// and ordering is lexicographic, which fixes serialization and optimizer order.
class ParamStore {
 public:
  ag::Var& add(const std::string& name, Tensor init, bool trainable = true);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  ag::Var& at(const std::string& name);
  const ag::Var& at(const std::string& name) const;

  std::vector<std::string> names() const;
  /// Parameters currently flagged trainable, in name order.
  std::vector<ag::Var> trainable() const;
  std::vector<std::string> trainable_names() const;
  void set_trainable(const std::string& name, bool on);
  void freeze_all();
  void zero_grad();
  int64_t count(bool trainable_only = false) const;

  /// Value snapshot keyed by name.
  std::map<std::string, Tensor> snapshot() const;
  /// Loads values for matching names; shapes must agree. Missing names throw when strict.
  void load(const std::map<std::string, Tensor>& values, bool strict = true);
  /// Deep copy: fresh leaf Vars with the same values and trainable flags.
  ParamStore clone() const;

  const std::map<std::string, ag::Var>& all() const { return params_; }

 private:
  std::map<std::string, ag::Var> params_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of leaf variables.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamConfig cfg);
  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  int64_t steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

/// Global L2 norm of all accumulated gradients.
double grad_norm(const std::vector<ag::Var>& params);

}  // namespace disco3d
