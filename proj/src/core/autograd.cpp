#include "disco3d/core/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace disco3d {

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace disco3d

namespace disco3d::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

/// Wraps a computed value into a graph node when recording is active and at
/// least one parent needs a gradient.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  bool record = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                               [](const Var& p) { return p.requires_grad(); });
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (record) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

Node& parent(Node& self, size_t i) { return *self.parents[i]; }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) return {};
  if (!node_->grad_ready) return Tensor::zeros_like(node_->value);
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) {
    node_->grad = Tensor();
    node_->grad_ready = false;
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar without an explicit seed");
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) return;
  require_same_shape(root.value(), seed, "backward seed");
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor& g = root.node()->ensure_grad();
  for (int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (size_t p = 0; p < 2; ++p) {
      Node& par = parent(self, p);
      if (!par.requires_grad) continue;
      Tensor& g = par.ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) {
      Tensor& g = parent(self, 0).ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

Var linear_combination(const std::vector<Var>& xs, const std::vector<double>& coeffs) {
  if (xs.empty() || xs.size() != coeffs.size()) throw std::invalid_argument("linear_combination: bad arity");
  Tensor out = Tensor::zeros_like(xs[0].value());
  for (size_t k = 0; k < xs.size(); ++k) {
    require_same_shape(out, xs[k].value(), "linear_combination");
    const double* px = xs[k].value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += coeffs[k] * px[i];
  }
  return make_result(std::move(out), xs, [coeffs](Node& self) {
    for (size_t k = 0; k < coeffs.size(); ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += coeffs[k] * self.grad[i];
    }
  });
}

Var scale_groups(const Var& x, const std::vector<double>& coeffs) {
  const Tensor& xv = x.value();
  if (static_cast<int64_t>(coeffs.size()) != xv.rows()) throw std::invalid_argument("scale_groups: group count");
  const int64_t inner = xv.row_size();
  Tensor out = xv;
  for (int64_t g = 0; g < xv.rows(); ++g)
    for (int64_t i = 0; i < inner; ++i) out[g * inner + i] *= coeffs[g];
  return make_result(std::move(out), {x}, [coeffs, inner](Node& self) {
    Tensor& gx = parent(self, 0).ensure_grad();
    for (size_t g = 0; g < coeffs.size(); ++g)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t j = static_cast<int64_t>(g) * inner + i;
        gx[j] += coeffs[g] * self.grad[j];
      }
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v = v / (1.0 + std::exp(-v));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double v = p.value[i];
      const double s = 1.0 / (1.0 + std::exp(-v));
      g[i] += self.grad[i] * (s * (1.0 + v * (1.0 - s)));
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (p.value[i] > 0.0) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

Var add_bias(const Var& x, const Var& b) {
  const int64_t c = x.value().last_dim();
  if (b.numel() != c) throw std::invalid_argument("add_bias: bias size " + std::to_string(b.numel()));
  Tensor out = x.value();
  const double* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i % c];
  return make_result(std::move(out), {x, b}, [c](Node& self) {
    if (parent(self, 0).requires_grad) {
      Tensor& g = parent(self, 0).ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) g[i % c] += self.grad[i];
    }
  });
}

Var add_group_vec(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  const int64_t groups = xv.rows();
  const int64_t c = xv.last_dim();
  if (v.value().ndim() != 2 || v.value().dim(0) != groups || v.value().dim(1) != c) {
    throw std::invalid_argument("add_group_vec: expected [G, C] vector, got " + shape_str(v.shape()));
  }
  const int64_t inner = xv.row_size();
  Tensor out = xv;
  const double* pv = v.value().data();
  for (int64_t g = 0; g < groups; ++g)
    for (int64_t i = 0; i < inner; ++i) out[g * inner + i] += pv[g * c + i % c];
  return make_result(std::move(out), {x, v}, [groups, inner, c](Node& self) {
    if (parent(self, 0).requires_grad) {
      Tensor& g = parent(self, 0).ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).ensure_grad();
      for (int64_t gr = 0; gr < groups; ++gr)
        for (int64_t i = 0; i < inner; ++i) g[gr * c + i % c] += self.grad[gr * inner + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout
// ---------------------------------------------------------------------------

Var matmul_nt(const Var& x, const Var& w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.ndim() != 2) throw std::invalid_argument("matmul_nt: weight must be 2-D");
  const int64_t k = wv.dim(1);
  const int64_t d = wv.dim(0);
  if (xv.last_dim() != k) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_str(xv.shape()) + " x " +
                                shape_str(wv.shape()) + "^T");
  }
  const int64_t n = xv.numel() / k;
  std::vector<int64_t> oshape = xv.shape();
  oshape.back() = d;
  Tensor out(oshape);
  MapMat(out.data(), n, d).noalias() = CMapMat(xv.data(), n, k) * CMapMat(wv.data(), d, k).transpose();
  return make_result(std::move(out), {x, w}, [n, k, d](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    CMapMat go(self.grad.data(), n, d);
    if (px.requires_grad) {
      MapMat(px.ensure_grad().data(), n, k).noalias() += go * CMapMat(pw.value.data(), d, k);
    }
    if (pw.requires_grad) {
      MapMat(pw.ensure_grad().data(), d, k).noalias() += go.transpose() * CMapMat(px.value.data(), n, k);
    }
  });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var take_rows(const Var& x, const std::vector<int64_t>& rows) {
  const Tensor& xv = x.value();
  const int64_t inner = xv.row_size();
  std::vector<int64_t> shape = xv.shape();
  shape[0] = static_cast<int64_t>(rows.size());
  Tensor out(shape);
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) throw std::out_of_range("take_rows: index out of range");
    std::copy_n(xv.data() + rows[r] * inner, inner, out.data() + static_cast<int64_t>(r) * inner);
  }
  return make_result(std::move(out), {x}, [rows, inner](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (size_t r = 0; r < rows.size(); ++r)
      for (int64_t i = 0; i < inner; ++i) g[rows[r] * inner + i] += self.grad[static_cast<int64_t>(r) * inner + i];
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  std::vector<int64_t> shape = xs[0].shape();
  std::vector<int64_t> tail(shape.begin() + 1, shape.end());
  int64_t total = 0;
  std::vector<int64_t> offsets;
  for (const auto& x : xs) {
    std::vector<int64_t> t(x.shape().begin() + 1, x.shape().end());
    if (t != tail) throw std::invalid_argument("concat_rows: trailing shape mismatch");
    offsets.push_back(total);
    total += x.numel();
  }
  shape[0] = 0;
  for (const auto& x : xs) shape[0] += x.shape()[0];
  Tensor out(shape);
  for (size_t i = 0; i < xs.size(); ++i) std::copy_n(xs[i].value().data(), xs[i].numel(), out.data() + offsets[i]);
  return make_result(std::move(out), xs, [offsets](Node& self) {
    for (size_t i = 0; i < offsets.size(); ++i) {
      Node& p = parent(self, i);
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      for (int64_t j = 0; j < g.numel(); ++j) g[j] += self.grad[offsets[i] + j];
    }
  });
}

Var concat_last(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const int64_t ca = av.last_dim();
  const int64_t cb = bv.last_dim();
  if (av.numel() / ca != bv.numel() / cb) throw std::invalid_argument("concat_last: leading size mismatch");
  const int64_t n = av.numel() / ca;
  std::vector<int64_t> shape = av.shape();
  shape.back() = ca + cb;
  Tensor out(shape);
  for (int64_t r = 0; r < n; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return make_result(std::move(out), {a, b}, [n, ca, cb](Node& self) {
    if (parent(self, 0).requires_grad) {
      Tensor& g = parent(self, 0).ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < ca; ++c) g[r * ca + c] += self.grad[r * (ca + cb) + c];
    }
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < cb; ++c) g[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
    }
  });
}

Var im2col3x3(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("im2col3x3: expected [B,H,W,C]");
  const int64_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  Tensor out({B, H, W, 9 * C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        double* dst = out.data() + (((b * H + y) * W + xx) * 9 * C);
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx, dst += C) {
            const int64_t sy = y + dy, sx = xx + dx;
            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
            std::copy_n(xv.data() + ((b * H + sy) * W + sx) * C, C, dst);
          }
      }
  return make_result(std::move(out), {x}, [B, H, W, C](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          const double* src = self.grad.data() + (((b * H + y) * W + xx) * 9 * C);
          for (int64_t dy = -1; dy <= 1; ++dy)
            for (int64_t dx = -1; dx <= 1; ++dx, src += C) {
              const int64_t sy = y + dy, sx = xx + dx;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              double* gd = g.data() + ((b * H + sy) * W + sx) * C;
              for (int64_t c = 0; c < C; ++c) gd[c] += src[c];
            }
        }
  });
}

Var avgpool2(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4 || xv.dim(1) % 2 || xv.dim(2) % 2) throw std::invalid_argument("avgpool2: bad shape");
  const int64_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  const int64_t h = H / 2, w = W / 2;
  Tensor out({B, h, w, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx)
        for (int64_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx) s += xv[((b * H + 2 * y + dy) * W + 2 * xx + dx) * C + c];
          out[((b * h + y) * w + xx) * C + c] = 0.25 * s;
        }
  return make_result(std::move(out), {x}, [B, H, W, C, h, w](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx)
          for (int64_t c = 0; c < C; ++c) {
            const double go = 0.25 * self.grad[((b * h + y) * w + xx) * C + c];
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx) g[((b * H + 2 * y + dy) * W + 2 * xx + dx) * C + c] += go;
          }
  });
}

Var upsample2(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("upsample2: bad shape");
  const int64_t B = xv.dim(0), h = xv.dim(1), w = xv.dim(2), C = xv.dim(3);
  const int64_t H = 2 * h, W = 2 * w;
  Tensor out({B, H, W, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx)
        std::copy_n(xv.data() + ((b * h + y / 2) * w + xx / 2) * C, C, out.data() + ((b * H + y) * W + xx) * C);
  return make_result(std::move(out), {x}, [B, H, W, C, h, w](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx)
          for (int64_t c = 0; c < C; ++c)
            g[((b * h + y / 2) * w + xx / 2) * C + c] += self.grad[((b * H + y) * W + xx) * C + c];
  });
}

Var mean_middle(const Var& x) {
  const Tensor& xv = x.value();
  const int64_t G = xv.rows();
  const int64_t C = xv.last_dim();
  const int64_t inner = xv.row_size();
  const int64_t R = inner / C;
  Tensor out({G, C});
  for (int64_t g = 0; g < G; ++g)
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c) out[g * C + c] += xv[g * inner + r * C + c] / static_cast<double>(R);
  return make_result(std::move(out), {x}, [G, C, inner, R](Node& self) {
    Tensor& gx = parent(self, 0).ensure_grad();
    for (int64_t g = 0; g < G; ++g)
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) gx[g * inner + r * C + c] += self.grad[g * C + c] / static_cast<double>(R);
  });
}

Var layernorm_last(const Var& x, double eps) {
  const Tensor& xv = x.value();
  const int64_t C = xv.last_dim();
  const int64_t n = xv.numel() / C;
  Tensor out = xv;
  std::vector<double> inv_std(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    double* row = out.data() + r * C;
    double m = 0.0;
    for (int64_t c = 0; c < C; ++c) m += row[c];
    m /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) var += (row[c] - m) * (row[c] - m);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < C; ++c) row[c] = (row[c] - m) * is;
  }
  Tensor normed = out;
  return make_result(std::move(out), {x}, [n, C, inv_std = std::move(inv_std), normed = std::move(normed)](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const double* go = self.grad.data() + r * C;
      const double* y = normed.data() + r * C;
      double mg = 0.0, mgy = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        mg += go[c];
        mgy += go[c] * y[c];
      }
      mg /= static_cast<double>(C);
      mgy /= static_cast<double>(C);
      const double is = inv_std[static_cast<size_t>(r)];
      for (int64_t c = 0; c < C; ++c) g[r * C + c] += is * (go[c] - mg - y[c] * mgy);
    }
  });
}

Var normalize_last(const Var& x, double eps) {
  const Tensor& xv = x.value();
  const int64_t C = xv.last_dim();
  const int64_t n = xv.numel() / C;
  Tensor out = xv;
  std::vector<double> inv(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    double* row = out.data() + r * C;
    double ss = 0.0;
    for (int64_t c = 0; c < C; ++c) ss += row[c] * row[c];
    const double is = 1.0 / std::sqrt(ss + eps);
    inv[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < C; ++c) row[c] *= is;
  }
  Tensor y = out;
  return make_result(std::move(out), {x}, [n, C, inv = std::move(inv), y = std::move(y)](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const double* go = self.grad.data() + r * C;
      const double* yr = y.data() + r * C;
      double dot = 0.0;
      for (int64_t c = 0; c < C; ++c) dot += go[c] * yr[c];
      const double is = inv[static_cast<size_t>(r)];
      for (int64_t c = 0; c < C; ++c) g[r * C + c] += is * (go[c] - yr[c] * dot);
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const std::vector<std::vector<int64_t>>& qgroups,
              const std::vector<std::vector<int64_t>>& kgroups, int heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const int64_t D = qv.last_dim();
  if (kv.last_dim() != D || vv.last_dim() != D || !kv.same_shape(vv)) {
    throw std::invalid_argument("attention: q/k/v feature sizes differ");
  }
  if (qgroups.size() != kgroups.size()) throw std::invalid_argument("attention: group count mismatch");
  if (heads <= 0 || D % heads) throw std::invalid_argument("attention: heads must divide feature size");
  const int64_t dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = Tensor::zeros_like(qv);

  // Softmax probabilities are kept for the backward pass, one block per (group, head).
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve(qgroups.size() * static_cast<size_t>(heads));
  for (size_t g = 0; g < qgroups.size(); ++g) {
    const auto& qr = qgroups[g];
    const auto& kr = kgroups[g];
    const int64_t L = static_cast<int64_t>(qr.size()), M = static_cast<int64_t>(kr.size());
    for (int h = 0; h < heads; ++h) {
      RowMat Q(L, dh), K(M, dh), V(M, dh);
      for (int64_t i = 0; i < L; ++i)
        for (int64_t c = 0; c < dh; ++c) Q(i, c) = qv[qr[i] * D + h * dh + c];
      for (int64_t j = 0; j < M; ++j)
        for (int64_t c = 0; c < dh; ++c) {
          K(j, c) = kv[kr[j] * D + h * dh + c];
          V(j, c) = vv[kr[j] * D + h * dh + c];
        }
      RowMat S = (Q * K.transpose()) * inv_sqrt;
      for (int64_t i = 0; i < L; ++i) {
        const double mx = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - mx).exp().matrix();
        S.row(i) /= S.row(i).sum();
      }
      RowMat O = S * V;
      for (int64_t i = 0; i < L; ++i)
        for (int64_t c = 0; c < dh; ++c) out[qr[i] * D + h * dh + c] = O(i, c);
      probs->push_back(std::move(S));
    }
  }
  return make_result(std::move(out), {q, k, v}, [qgroups, kgroups, heads, dh, D, inv_sqrt, probs](Node& self) {
    Node& pq = parent(self, 0);
    Node& pk = parent(self, 1);
    Node& pv = parent(self, 2);
    Tensor* gq = pq.requires_grad ? &pq.ensure_grad() : nullptr;
    Tensor* gk = pk.requires_grad ? &pk.ensure_grad() : nullptr;
    Tensor* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
    size_t block = 0;
    for (size_t g = 0; g < qgroups.size(); ++g) {
      const auto& qr = qgroups[g];
      const auto& kr = kgroups[g];
      const int64_t L = static_cast<int64_t>(qr.size()), M = static_cast<int64_t>(kr.size());
      for (int h = 0; h < heads; ++h, ++block) {
        const RowMat& P = (*probs)[block];
        RowMat Q(L, dh), K(M, dh), V(M, dh), dO(L, dh);
        for (int64_t i = 0; i < L; ++i)
          for (int64_t c = 0; c < dh; ++c) {
            Q(i, c) = pq.value[qr[i] * D + h * dh + c];
            dO(i, c) = self.grad[qr[i] * D + h * dh + c];
          }
        for (int64_t j = 0; j < M; ++j)
          for (int64_t c = 0; c < dh; ++c) {
            K(j, c) = pk.value[kr[j] * D + h * dh + c];
            V(j, c) = pv.value[kr[j] * D + h * dh + c];
          }
        if (gv) {
          RowMat dV = P.transpose() * dO;
          for (int64_t j = 0; j < M; ++j)
            for (int64_t c = 0; c < dh; ++c) (*gv)[kr[j] * D + h * dh + c] += dV(j, c);
        }
        if (gq || gk) {
          RowMat dP = dO * V.transpose();
          RowMat dS(L, M);
          for (int64_t i = 0; i < L; ++i) {
            const double dot = P.row(i).dot(dP.row(i));
            dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
          }
          dS *= inv_sqrt;
          if (gq) {
            RowMat dQ = dS * K;
            for (int64_t i = 0; i < L; ++i)
              for (int64_t c = 0; c < dh; ++c) (*gq)[qr[i] * D + h * dh + c] += dQ(i, c);
          }
          if (gk) {
            RowMat dK = dS.transpose() * Q;
            for (int64_t j = 0; j < M; ++j)
              for (int64_t c = 0; c < dh; ++c) (*gk)[kr[j] * D + h * dh + c] += dK(j, c);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().vec()) s += v;
  return make_result(Tensor({1}, s), {x}, [](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const double go = self.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.numel());
  return scale(sum(x), 1.0 / n);
}

Var mse(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  const Tensor& lv = logits.value();
  if (lv.ndim() != 2 || static_cast<int64_t>(targets.size()) != lv.dim(0))
    throw std::invalid_argument("cross_entropy: expected [B, K] logits and B targets");
  const int64_t B = lv.dim(0), K = lv.dim(1);
  Tensor prob = lv;
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const int y = targets[static_cast<size_t>(b)];
    if (y < 0 || y >= K) throw std::out_of_range("cross_entropy: target out of range");
    double* row = prob.data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    loss += mx + std::log(z) - row[y];
    for (int64_t k = 0; k < K; ++k) row[k] = std::exp(row[k] - mx) / z;
  }
  return make_result(Tensor({1}, loss / static_cast<double>(B)), {logits},
                     [B, K, targets, prob = std::move(prob)](Node& self) {
                       Tensor& g = parent(self, 0).ensure_grad();
                       const double go = self.grad[0] / static_cast<double>(B);
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t k = 0; k < K; ++k)
                           g[b * K + k] += go * (prob[b * K + k] - (k == targets[static_cast<size_t>(b)] ? 1.0 : 0.0));
                     });
}

Var dot_const(const Var& x, const Tensor& c) {
  require_same_shape(x.value(), c, "dot_const");
  double s = 0.0;
  for (int64_t i = 0; i < c.numel(); ++i) s += x.value()[i] * c[i];
  return make_result(Tensor({1}, s), {x}, [c](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const double go = self.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += go * c[i];
  });
}

}  // namespace disco3d::ag
