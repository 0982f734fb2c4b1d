#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Graphs are built eagerly by the op functions below and released when the
// last Var referencing them goes away. Recording is controlled per thread by
// NoGradGuard, mirroring the usual "no_grad" scoping of tensor libraries.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "disco3d/core/tensor.hpp"

namespace disco3d::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (!grad_ready) {
      grad = Tensor::zeros_like(value);
      grad_ready = true;
    }
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; never call inside a recorded graph.
  Tensor& mutable_value() { return node_->value; }
  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && node_->grad_ready; }
  /// Gradient accumulated by backward(); zeros if none was accumulated.
  Tensor grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

  /// A constant holding the same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Back-propagates from a scalar root (seed 1) or from an arbitrary root with
/// an explicit seed gradient of the same shape.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// sum_i coeffs[i] * xs[i]; all xs share a shape.
Var linear_combination(const std::vector<Var>& xs, const std::vector<double>& coeffs);
/// Multiplies slice g of the leading axis by coeffs[g] (coefficients are constants).
Var scale_groups(const Var& x, const std::vector<double>& coeffs);
Var silu(const Var& x);
Var relu(const Var& x);

// Broadcasting.
/// x [..., C] + b [C].
Var add_bias(const Var& x, const Var& b);
/// x [G, ..., C] + v [G, C], broadcasting v over the middle axes.
Var add_group_vec(const Var& x, const Var& v);

// Linear algebra and layout.
/// x [..., k] times w^T with w [d, k] -> [..., d].
Var matmul_nt(const Var& x, const Var& w);
Var reshape(const Var& x, std::vector<int64_t> shape);
/// Gathers slices of the leading axis.
Var take_rows(const Var& x, const std::vector<int64_t>& rows);
/// Concatenates along the leading axis; trailing shapes must agree.
Var concat_rows(const std::vector<Var>& xs);
/// Concatenates along the last axis; leading shapes must agree.
Var concat_last(const Var& a, const Var& b);
/// [B, H, W, C] -> [B, H, W, 9C] zero-padded 3x3 neighbourhoods (row-major taps, channel fastest).
Var im2col3x3(const Var& x);
Var avgpool2(const Var& x);
Var upsample2(const Var& x);
/// [G, ..., C] -> [G, C] mean over the middle axes.
Var mean_middle(const Var& x);
/// Per-row normalisation over the last axis, no affine parameters.
Var layernorm_last(const Var& x, double eps = 1e-5);

/// Rows scaled to unit L2 norm over the last axis.
Var normalize_last(const Var& x, double eps = 1e-12);
/// Scaled dot-product attention. Query rows qgroups[g] attend over key rows
/// kgroups[g]; q/k/v are [rows, D] and D is split evenly across heads.
/// Query rows outside every group produce zero output.
Var attention(const Var& q, const Var& k, const Var& v, const std::vector<std::vector<int64_t>>& qgroups,
              const std::vector<std::vector<int64_t>>& kgroups, int heads);

// Reductions (results have shape {1}).
Var sum(const Var& x);
Var mean(const Var& x);
Var mse(const Var& a, const Var& b);
/// Mean softmax cross-entropy of [B, K] logits against class indices.
Var cross_entropy(const Var& logits, const std::vector<int>& targets);
/// sum(x * c) with c held constant.
Var dot_const(const Var& x, const Tensor& c);

}  // namespace disco3d::ag
