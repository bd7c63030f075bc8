#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace normfill {

// Dense tensor with reverse-mode autodiff. Scalar type S is float for
// training and double for gradient-check runs. Layout is row-major with
// activations shaped [batch, channels, height, width].

template <typename S>
struct TensorNode {
  std::vector<int> shape;
  std::vector<S> data;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<S> grad;
  bool grad_ready = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  uint64_t id = 0;
};

namespace detail {

inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

template <typename S>
void check_all_finite(const S* p, int64_t n, const char* where) {
  if (!Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(p, n).allFinite())
    throw std::runtime_error(std::string(where) + ": non-finite value encountered");
}

template <typename S>
void ensure_grad(TensorNode<S>& node) {
  if (!node.grad_ready) {
    node.grad.assign(node.data.size(), S(0));
    node.grad_ready = true;
  }
}

}  // namespace detail

template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto node = alloc(std::move(shape));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(std::vector<int> shape, S value, bool requires_grad = false) {
    auto node = alloc(std::move(shape));
    std::fill(node->data.begin(), node->data.end(), value);
    node->requires_grad = requires_grad;
    detail::check_all_finite(node->data.data(), int64_t(node->data.size()), "Tensor::full");
    return Tensor(std::move(node));
  }

  static Tensor from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    if (int64_t(data.size()) != detail::shape_numel(shape))
      throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                  " values for shape " + detail::shape_str(shape));
    auto node = alloc(std::move(shape));
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    detail::check_all_finite(node->data.data(), int64_t(node->data.size()), "Tensor::from_data");
    return Tensor(std::move(node));
  }

  static Tensor scalar(S value) { return from_data({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return check().shape; }
  int ndim() const { return int(check().shape.size()); }
  int dim(int i) const { return check().shape.at(i); }
  int64_t numel() const { return int64_t(check().data.size()); }
  bool requires_grad() const { return check().requires_grad; }
  bool is_leaf() const { return check().is_leaf; }
  uint64_t node_id() const { return check().id; }

  const S* data() const { return check().data.data(); }
  /// Direct mutation is for parameter updates and input staging only.
  S* mutable_data() {
    Node& n = check();
    if (!n.is_leaf) throw std::runtime_error("mutable_data: only leaf tensors may be mutated");
    return n.data.data();
  }

  S value() const {
    const Node& n = check();
    if (n.data.size() != 1) throw std::invalid_argument("value: tensor is not scalar");
    return n.data[0];
  }

  bool grad_available() const { return node_ && node_->grad_ready; }
  const S* grad_data() const {
    const Node& n = check();
    if (!n.grad_ready)
      throw std::runtime_error("grad_data: no gradient present (backward not run or cleared)");
    return n.grad.data();
  }
  void clear_grad() {
    Node& n = check();
    n.grad.clear();
    n.grad.shrink_to_fit();
    n.grad_ready = false;
    n.backward_done = false;
  }

  /// Reverse-mode sweep from a scalar root, in reverse construction order.
  void backward() {
    Node& root = check();
    if (root.data.size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  detail::shape_str(root.shape));
    if (!root.requires_grad)
      throw std::invalid_argument("backward: root does not require gradients");
    if (root.backward_done)
      throw std::runtime_error(
          "backward: second call on the same graph without clearing gradients");
    detail::check_all_finite(root.data.data(), 1, "backward root");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root};
    seen.insert(&root);
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents)
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    detail::ensure_grad(root);
    root.grad[0] = S(1);
    for (Node* n : order)
      if (n->backward_fn) {
        detail::ensure_grad(*n);
        n->backward_fn(*n);
      }
    root.backward_done = true;
  }

  std::shared_ptr<Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

  static std::shared_ptr<Node> alloc(std::vector<int> shape) {
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " +
                                              detail::shape_str(shape));
    auto node = std::make_shared<Node>();
    node->data.assign(size_t(detail::shape_numel(shape)), S(0));
    node->shape = std::move(shape);
    node->id = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
    return node;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  Node& check() const {
    if (!node_) throw std::runtime_error("operation on undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
void check_input(const Tensor<S>& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined input tensor");
  check_all_finite(t.data(), t.numel(), op);
}

// Finishes an op node: wires parents and the backward closure only when some
// parent needs gradients, so inference builds no graph.
template <typename S>
Tensor<S> finish(std::shared_ptr<TensorNode<S>> node,
                 std::vector<std::shared_ptr<TensorNode<S>>> parents,
                 std::function<void(TensorNode<S>&)> backward_fn) {
  bool needs = false;
  for (auto& p : parents) needs = needs || p->requires_grad;
  node->is_leaf = !needs;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>::wrap(std::move(node));
}

template <typename S>
using VecMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using CVecMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---- elementwise ----

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_input(a, "add");
  detail::check_input(b, "add");
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + detail::shape_str(a.shape()) +
                                              " vs " + detail::shape_str(b.shape()));
  auto out = Tensor<S>::alloc(a.shape());
  const int64_t n = a.numel();
  detail::VecMap<S>(out->data.data(), n) =
      detail::CVecMap<S>(a.data(), n) + detail::CVecMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::finish<S>(out, {an, bn}, [an, bn](TensorNode<S>& self) {
    const int64_t n = int64_t(self.data.size());
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      detail::VecMap<S>(an->grad.data(), n) += detail::CVecMap<S>(self.grad.data(), n);
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      detail::VecMap<S>(bn->grad.data(), n) += detail::CVecMap<S>(self.grad.data(), n);
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_input(a, "sub");
  detail::check_input(b, "sub");
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + detail::shape_str(a.shape()) +
                                              " vs " + detail::shape_str(b.shape()));
  auto out = Tensor<S>::alloc(a.shape());
  const int64_t n = a.numel();
  detail::VecMap<S>(out->data.data(), n) =
      detail::CVecMap<S>(a.data(), n) - detail::CVecMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::finish<S>(out, {an, bn}, [an, bn](TensorNode<S>& self) {
    const int64_t n = int64_t(self.data.size());
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      detail::VecMap<S>(an->grad.data(), n) += detail::CVecMap<S>(self.grad.data(), n);
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      detail::VecMap<S>(bn->grad.data(), n) -= detail::CVecMap<S>(self.grad.data(), n);
    }
  });
}

/// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_input(a, "mul");
  detail::check_input(b, "mul");
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + detail::shape_str(a.shape()) +
                                              " vs " + detail::shape_str(b.shape()));
  auto out = Tensor<S>::alloc(a.shape());
  const int64_t n = a.numel();
  detail::VecMap<S>(out->data.data(), n) =
      detail::CVecMap<S>(a.data(), n) * detail::CVecMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::finish<S>(out, {an, bn}, [an, bn](TensorNode<S>& self) {
    const int64_t n = int64_t(self.data.size());
    detail::CVecMap<S> g(self.grad.data(), n);
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      detail::VecMap<S>(an->grad.data(), n) += g * detail::CVecMap<S>(bn->data.data(), n);
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      detail::VecMap<S>(bn->grad.data(), n) += g * detail::CVecMap<S>(an->data.data(), n);
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  detail::check_input(a, "scale");
  if (!std::isfinite(double(factor))) throw std::invalid_argument("scale: non-finite factor");
  auto out = Tensor<S>::alloc(a.shape());
  const int64_t n = a.numel();
  detail::VecMap<S>(out->data.data(), n) = detail::CVecMap<S>(a.data(), n) * factor;
  auto an = a.node();
  return detail::finish<S>(out, {an}, [an, factor](TensorNode<S>& self) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    const int64_t n = int64_t(self.data.size());
    detail::VecMap<S>(an->grad.data(), n) += detail::CVecMap<S>(self.grad.data(), n) * factor;
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  detail::check_input(a, "add_scalar");
  if (!std::isfinite(double(c))) throw std::invalid_argument("add_scalar: non-finite constant");
  auto out = Tensor<S>::alloc(a.shape());
  const int64_t n = a.numel();
  detail::VecMap<S>(out->data.data(), n) = detail::CVecMap<S>(a.data(), n) + c;
  auto an = a.node();
  return detail::finish<S>(out, {an}, [an](TensorNode<S>& self) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    const int64_t n = int64_t(self.data.size());
    detail::VecMap<S>(an->grad.data(), n) += detail::CVecMap<S>(self.grad.data(), n);
  });
}

// ---- activations ----

enum class Activation { relu, sigmoid, softplus };

template <typename S>
Tensor<S> activation(const Tensor<S>& x, Activation kind) {
  detail::check_input(x, "activation");
  auto out = Tensor<S>::alloc(x.shape());
  const int64_t n = x.numel();
  const S* in = x.data();
  S* o = out->data.data();
  switch (kind) {
    case Activation::relu:
      for (int64_t i = 0; i < n; ++i) o[i] = in[i] > S(0) ? in[i] : S(0);
      break;
    case Activation::sigmoid:
      for (int64_t i = 0; i < n; ++i) {
        const S v = in[i];
        o[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v));
      }
      break;
    case Activation::softplus:
      for (int64_t i = 0; i < n; ++i) {
        const S v = in[i];
        o[i] = std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
      }
      break;
  }
  auto xn = x.node();
  return detail::finish<S>(out, {xn}, [xn, kind](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    const int64_t n = int64_t(self.data.size());
    const S* g = self.grad.data();
    const S* in = xn->data.data();
    const S* y = self.data.data();
    S* gi = xn->grad.data();
    switch (kind) {
      case Activation::relu:
        for (int64_t i = 0; i < n; ++i)
          if (in[i] > S(0)) gi[i] += g[i];
        break;
      case Activation::sigmoid:
        for (int64_t i = 0; i < n; ++i) gi[i] += g[i] * y[i] * (S(1) - y[i]);
        break;
      case Activation::softplus:
        for (int64_t i = 0; i < n; ++i) {
          const S v = in[i];
          const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                  : std::exp(v) / (S(1) + std::exp(v));
          gi[i] += g[i] * sig;
        }
        break;
    }
  });
}

/// Stable two-way softmax over a pair of logit maps; returns (wa, wb) with
/// wa + wb = 1 elementwise.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> softmax_pair(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_input(a, "softmax_pair");
  detail::check_input(b, "softmax_pair");
  detail::require(a.shape() == b.shape(), "softmax_pair: shape mismatch " +
                                              detail::shape_str(a.shape()) + " vs " +
                                              detail::shape_str(b.shape()));
  const int64_t n = a.numel();
  auto wa_node = Tensor<S>::alloc(a.shape());
  auto wb_node = Tensor<S>::alloc(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    const S m = std::max(av[i], bv[i]);
    const S ea = std::exp(av[i] - m), eb = std::exp(bv[i] - m);
    wa_node->data[i] = ea / (ea + eb);
    wb_node->data[i] = eb / (ea + eb);
  }
  auto an = a.node(), bn = b.node();
  // d wa / d a = wa (1 - wa); d wa / d b = -wa (1 - wa). Each output node
  // only needs its own values, so there is no cross reference between them.
  auto back = [an, bn](S sign) {
    return [an, bn, sign](TensorNode<S>& self) {
      const int64_t n = int64_t(self.data.size());
      for (int64_t i = 0; i < n; ++i) {
        const S j = self.grad[i] * self.data[i] * (S(1) - self.data[i]);
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          an->grad[i] += sign * j;
        }
        if (bn->requires_grad) {
          detail::ensure_grad(*bn);
          bn->grad[i] -= sign * j;
        }
      }
    };
  };
  Tensor<S> wa = detail::finish<S>(wa_node, {an, bn}, back(S(1)));
  Tensor<S> wb = detail::finish<S>(wb_node, {an, bn}, back(S(-1)));
  return {wa, wb};
}

// ---- shape ops ----

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_input(a, "concat_channels");
  detail::check_input(b, "concat_channels");
  detail::require(a.ndim() == 4 && b.ndim() == 4, "concat_channels: expects 4d tensors");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: non-channel dims differ, " + detail::shape_str(a.shape()) +
                      " vs " + detail::shape_str(b.shape()));
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t plane = int64_t(H) * W;
  auto out = Tensor<S>::alloc({B, Ca + Cb, H, W});
  for (int i = 0; i < B; ++i) {
    std::memcpy(out->data.data() + i * (Ca + Cb) * plane, a.data() + i * Ca * plane,
                size_t(Ca * plane) * sizeof(S));
    std::memcpy(out->data.data() + (i * (Ca + Cb) + Ca) * plane, b.data() + i * Cb * plane,
                size_t(Cb * plane) * sizeof(S));
  }
  auto an = a.node(), bn = b.node();
  return detail::finish<S>(out, {an, bn}, [an, bn, B, Ca, Cb, plane](TensorNode<S>& self) {
    for (int i = 0; i < B; ++i) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        detail::VecMap<S>(an->grad.data() + i * Ca * plane, Ca * plane) +=
            detail::CVecMap<S>(self.grad.data() + i * (Ca + Cb) * plane, Ca * plane);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        detail::VecMap<S>(bn->grad.data() + i * Cb * plane, Cb * plane) +=
            detail::CVecMap<S>(self.grad.data() + (i * (Ca + Cb) + Ca) * plane, Cb * plane);
      }
    }
  });
}

/// out(r, c) = in(r - dy, c - dx), zero outside the frame.
template <typename S>
Tensor<S> shift2d(const Tensor<S>& x, int dy, int dx) {
  detail::check_input(x, "shift2d");
  detail::require(x.ndim() == 4, "shift2d: expects 4d tensor");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = Tensor<S>::alloc(x.shape());
  auto run = [B, C, H, W, dy, dx](const S* src, S* dst, bool accumulate) {
    const int64_t plane = int64_t(H) * W;
    const int r0 = std::max(0, dy), r1 = std::min(H, H + dy);
    const int c0 = std::max(0, dx), c1 = std::min(W, W + dx);
    if (c0 >= c1) return;
    for (int64_t p = 0; p < int64_t(B) * C; ++p)
      for (int r = r0; r < r1; ++r) {
        const S* s = src + p * plane + int64_t(r - dy) * W + (c0 - dx);
        S* d = dst + p * plane + int64_t(r) * W + c0;
        if (accumulate)
          detail::VecMap<S>(d, c1 - c0) += detail::CVecMap<S>(s, c1 - c0);
        else
          std::memcpy(d, s, size_t(c1 - c0) * sizeof(S));
      }
  };
  run(x.data(), out->data.data(), false);
  auto xn = x.node();
  return detail::finish<S>(out, {xn}, [xn, B, C, H, W, dy, dx](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    // transpose of a shift is the opposite shift
    const int64_t plane = int64_t(H) * W;
    const int r0 = std::max(0, dy), r1 = std::min(H, H + dy);
    const int c0 = std::max(0, dx), c1 = std::min(W, W + dx);
    if (c0 >= c1) return;
    for (int64_t p = 0; p < int64_t(B) * C; ++p)
      for (int r = r0; r < r1; ++r) {
        const S* g = self.grad.data() + p * plane + int64_t(r) * W + c0;
        S* d = xn->grad.data() + p * plane + int64_t(r - dy) * W + (c0 - dx);
        detail::VecMap<S>(d, c1 - c0) += detail::CVecMap<S>(g, c1 - c0);
      }
  });
}

/// out(r, c) = in(r + dr, c + dc), zero outside the frame.
template <typename S>
Tensor<S> neighbor(const Tensor<S>& x, int dr, int dc) {
  return shift2d(x, -dr, -dc);
}

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  detail::check_input(x, "upsample_nearest2x");
  detail::require(x.ndim() == 4, "upsample_nearest2x: expects 4d tensor");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = Tensor<S>::alloc({B, C, 2 * H, 2 * W});
  const S* src = x.data();
  S* dst = out->data.data();
  for (int64_t p = 0; p < int64_t(B) * C; ++p)
    for (int r = 0; r < H; ++r) {
      const S* s = src + (p * H + r) * W;
      S* d0 = dst + ((p * 2 * H) + 2 * r) * int64_t(2 * W);
      S* d1 = d0 + 2 * W;
      for (int c = 0; c < W; ++c) {
        d0[2 * c] = d0[2 * c + 1] = s[c];
        d1[2 * c] = d1[2 * c + 1] = s[c];
      }
    }
  auto xn = x.node();
  return detail::finish<S>(out, {xn}, [xn, B, C, H, W](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    const S* g = self.grad.data();
    S* gi = xn->grad.data();
    for (int64_t p = 0; p < int64_t(B) * C; ++p)
      for (int r = 0; r < H; ++r) {
        const S* g0 = g + ((p * 2 * H) + 2 * r) * int64_t(2 * W);
        const S* g1 = g0 + 2 * W;
        S* d = gi + (p * H + r) * W;
        for (int c = 0; c < W; ++c)
          d[c] += g0[2 * c] + g0[2 * c + 1] + g1[2 * c] + g1[2 * c + 1];
      }
  });
}

// ---- convolution ----

namespace detail {

// Packs padded patches into P (K x B*OH*OW), K = Cin*kh*kw, row-major.
// Row k holds kernel tap (c, ki, kj) across all output positions; stride-1
// rows are contiguous copies of input rows.
template <typename S>
void im2col(const S* in, int B, int Cin, int H, int W, int kh, int kw, int stride, int pad,
            int OH, int OW, S* P) {
  const int64_t ohw = int64_t(OH) * OW;
  const int64_t cols = int64_t(B) * ohw;
  const int64_t in_plane = int64_t(H) * W;
  for (int c = 0; c < Cin; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const int64_t k = (int64_t(c) * kh + ki) * kw + kj;
        S* row = P + k * cols;
        for (int b = 0; b < B; ++b) {
          const S* plane = in + (int64_t(b) * Cin + c) * in_plane;
          for (int oh = 0; oh < OH; ++oh) {
            S* seg = row + b * ohw + int64_t(oh) * OW;
            const int ih = oh * stride + ki - pad;
            if (ih < 0 || ih >= H) {
              std::fill(seg, seg + OW, S(0));
              continue;
            }
            if (stride == 1) {
              const int iw0 = kj - pad;
              const int lo = std::max(0, -iw0);
              const int hi = std::min(OW, W - iw0);
              if (lo > 0) std::fill(seg, seg + lo, S(0));
              if (hi > lo)
                std::memcpy(seg + lo, plane + int64_t(ih) * W + iw0 + lo,
                            size_t(hi - lo) * sizeof(S));
              if (hi < OW) std::fill(seg + std::max(lo, hi), seg + OW, S(0));
            } else {
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride + kj - pad;
                seg[ow] = (iw >= 0 && iw < W) ? plane[int64_t(ih) * W + iw] : S(0);
              }
            }
          }
        }
      }
}

// Scatter-add transpose of im2col.
template <typename S>
void col2im_add(const S* P, int B, int Cin, int H, int W, int kh, int kw, int stride, int pad,
                int OH, int OW, S* din) {
  const int64_t ohw = int64_t(OH) * OW;
  const int64_t cols = int64_t(B) * ohw;
  const int64_t in_plane = int64_t(H) * W;
  for (int c = 0; c < Cin; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const int64_t k = (int64_t(c) * kh + ki) * kw + kj;
        const S* row = P + k * cols;
        for (int b = 0; b < B; ++b) {
          S* plane = din + (int64_t(b) * Cin + c) * in_plane;
          for (int oh = 0; oh < OH; ++oh) {
            const S* seg = row + b * ohw + int64_t(oh) * OW;
            const int ih = oh * stride + ki - pad;
            if (ih < 0 || ih >= H) continue;
            if (stride == 1) {
              const int iw0 = kj - pad;
              const int lo = std::max(0, -iw0);
              const int hi = std::min(OW, W - iw0);
              if (hi > lo)
                VecMap<S>(plane + int64_t(ih) * W + iw0 + lo, hi - lo) +=
                    CVecMap<S>(seg + lo, hi - lo);
            } else {
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride + kj - pad;
                if (iw >= 0 && iw < W) plane[int64_t(ih) * W + iw] += seg[ow];
              }
            }
          }
        }
      }
}

template <typename S>
std::vector<S>& conv_scratch(int which) {
  thread_local std::vector<S> bufs[3];
  return bufs[which];
}

}  // namespace detail

/// 2d convolution, weight [Cout, Cin, kh, kw], optional bias [Cout].
/// Implemented as im2col plus one GEMM over the whole batch.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride, int padding) {
  detail::check_input(input, "conv2d input");
  detail::check_input(weight, "conv2d weight");
  detail::require(input.ndim() == 4, "conv2d: input must be 4d, got " +
                                         detail::shape_str(input.shape()));
  detail::require(weight.ndim() == 4, "conv2d: weight must be 4d, got " +
                                          detail::shape_str(weight.shape()));
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(padding >= 0, "conv2d: padding must be >= 0");
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  detail::require(weight.dim(1) == Cin,
                  "conv2d: input channels (" + std::to_string(Cin) + ") != weight channels (" +
                      std::to_string(weight.dim(1)) + ")");
  if (bias.defined()) {
    detail::check_input(bias, "conv2d bias");
    detail::require(bias.ndim() == 1 && bias.dim(0) == Cout,
                    "conv2d: bias must be [" + std::to_string(Cout) + "], got " +
                        detail::shape_str(bias.shape()));
  }
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;
  detail::require(H + 2 * padding >= kh && W + 2 * padding >= kw && OH >= 1 && OW >= 1,
                  "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " does not fit input " + detail::shape_str(input.shape()) + " with padding " +
                      std::to_string(padding));

  const int64_t K = int64_t(Cin) * kh * kw;
  const int64_t ohw = int64_t(OH) * OW;
  const int64_t cols = int64_t(B) * ohw;
  auto& P = detail::conv_scratch<S>(0);
  P.resize(size_t(K * cols));
  detail::im2col(input.data(), B, Cin, H, W, kh, kw, stride, padding, OH, OW, P.data());

  auto out = Tensor<S>::alloc({B, Cout, OH, OW});
  {
    auto& O = detail::conv_scratch<S>(1);
    O.resize(size_t(Cout) * cols);
    Eigen::Map<detail::RowMat<S>> Om(O.data(), Cout, cols);
    Eigen::Map<const detail::RowMat<S>> Wm(weight.data(), Cout, K);
    Eigen::Map<const detail::RowMat<S>> Pm(P.data(), K, cols);
    Om.noalias() = Wm * Pm;
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co) {
        S* dst = out->data.data() + (int64_t(b) * Cout + co) * ohw;
        std::memcpy(dst, O.data() + co * cols + b * ohw, size_t(ohw) * sizeof(S));
        if (bias.defined())
          detail::VecMap<S>(dst, ohw) += bias.data()[co];
      }
  }

  auto in_n = input.node();
  auto w_n = weight.node();
  auto b_n = bias.defined() ? bias.node() : nullptr;
  std::vector<std::shared_ptr<TensorNode<S>>> parents{in_n, w_n};
  if (b_n) parents.push_back(b_n);
  auto backward = [in_n, w_n, b_n, B, Cin, H, W, Cout, kh, kw, stride, padding, OH,
                   OW](TensorNode<S>& self) {
    const int64_t K = int64_t(Cin) * kh * kw;
    const int64_t ohw = int64_t(OH) * OW;
    const int64_t cols = int64_t(B) * ohw;
    auto& G = detail::conv_scratch<S>(1);
    G.resize(size_t(Cout) * cols);
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co)
        std::memcpy(G.data() + co * cols + b * ohw,
                    self.grad.data() + (int64_t(b) * Cout + co) * ohw, size_t(ohw) * sizeof(S));
    Eigen::Map<const detail::RowMat<S>> Gm(G.data(), Cout, cols);

    if (b_n && b_n->requires_grad) {
      detail::ensure_grad(*b_n);
      for (int co = 0; co < Cout; ++co)
        b_n->grad[co] += Gm.row(co).sum();
    }
    if (w_n->requires_grad || in_n->requires_grad) {
      auto& P = detail::conv_scratch<S>(0);
      P.resize(size_t(K * cols));
      detail::im2col(in_n->data.data(), B, Cin, H, W, kh, kw, stride, padding, OH, OW, P.data());
      Eigen::Map<const detail::RowMat<S>> Pm(P.data(), K, cols);
      if (w_n->requires_grad) {
        detail::ensure_grad(*w_n);
        Eigen::Map<detail::RowMat<S>> dW(w_n->grad.data(), Cout, K);
        dW.noalias() += Gm * Pm.transpose();
      }
      if (in_n->requires_grad) {
        detail::ensure_grad(*in_n);
        auto& dP = detail::conv_scratch<S>(2);
        dP.resize(size_t(K * cols));
        Eigen::Map<detail::RowMat<S>> dPm(dP.data(), K, cols);
        Eigen::Map<const detail::RowMat<S>> Wm(w_n->data.data(), Cout, K);
        dPm.noalias() = Wm.transpose() * Gm;
        detail::col2im_add(dP.data(), B, Cin, H, W, kh, kw, stride, padding, OH, OW,
                           in_n->grad.data());
      }
    }
  };
  return detail::finish<S>(out, std::move(parents), std::move(backward));
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, int stride, int padding) {
  return conv2d(input, weight, Tensor<S>(), stride, padding);
}

// ---- normalization and reductions ----

/// Normalizes the channel vector at every pixel to unit length with a
/// quadratic guard: out = p / sqrt(|p|^2 + eps^2).
template <typename S>
Tensor<S> l2_normalize_channels(const Tensor<S>& x, S eps = S(1e-8)) {
  detail::check_input(x, "l2_normalize_channels");
  detail::require(x.ndim() == 4, "l2_normalize_channels: expects 4d tensor");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t plane = int64_t(H) * W;
  auto out = Tensor<S>::alloc(x.shape());
  const S* in = x.data();
  S* o = out->data.data();
  for (int b = 0; b < B; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      S sq = eps * eps;
      for (int c = 0; c < C; ++c) {
        const S v = in[(int64_t(b) * C + c) * plane + p];
        sq += v * v;
      }
      const S inv = S(1) / std::sqrt(sq);
      for (int c = 0; c < C; ++c)
        o[(int64_t(b) * C + c) * plane + p] = in[(int64_t(b) * C + c) * plane + p] * inv;
    }
  auto xn = x.node();
  return detail::finish<S>(out, {xn}, [xn, B, C, plane, eps](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    const S* in = xn->data.data();
    const S* g = self.grad.data();
    S* gi = xn->grad.data();
    for (int b = 0; b < B; ++b)
      for (int64_t p = 0; p < plane; ++p) {
        S sq = eps * eps, dot = S(0);
        for (int c = 0; c < C; ++c) {
          const int64_t idx = (int64_t(b) * C + c) * plane + p;
          sq += in[idx] * in[idx];
          dot += in[idx] * g[idx];
        }
        const S inv = S(1) / std::sqrt(sq);
        const S inv3 = inv * inv * inv;
        for (int c = 0; c < C; ++c) {
          const int64_t idx = (int64_t(b) * C + c) * plane + p;
          gi[idx] += g[idx] * inv - in[idx] * dot * inv3;
        }
      }
  });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  detail::check_input(x, "sum_all");
  auto out = Tensor<S>::alloc({1});
  const int64_t n = x.numel();
  double acc = 0;
  const S* in = x.data();
  for (int64_t i = 0; i < n; ++i) acc += double(in[i]);
  out->data[0] = S(acc);
  auto xn = x.node();
  return detail::finish<S>(out, {xn}, [xn](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    const S g = self.grad[0];
    detail::VecMap<S>(xn->grad.data(), int64_t(xn->grad.size())) += g;
  });
}

/// Mean of (pred - target)^2 over pixels where mask == 1. Mask entries must
/// be exactly 0 or 1 and is not differentiated.
template <typename S>
Tensor<S> masked_l2_loss(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask) {
  detail::check_input(pred, "masked_l2_loss");
  detail::check_input(target, "masked_l2_loss");
  detail::check_input(mask, "masked_l2_loss");
  detail::require(pred.shape() == target.shape() && pred.shape() == mask.shape(),
                  "masked_l2_loss: shape mismatch " + detail::shape_str(pred.shape()) + " / " +
                      detail::shape_str(target.shape()) + " / " + detail::shape_str(mask.shape()));
  const int64_t n = pred.numel();
  const S* m = mask.data();
  int64_t count = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (m[i] != S(0) && m[i] != S(1))
      throw std::invalid_argument("masked_l2_loss: mask values must be 0 or 1");
    count += m[i] == S(1);
  }
  if (count == 0) throw std::invalid_argument("masked_l2_loss: empty mask, no supervision");
  const S* p = pred.data();
  const S* t = target.data();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = double(p[i]) - double(t[i]);
    acc += double(m[i]) * d * d;
  }
  auto out = Tensor<S>::alloc({1});
  out->data[0] = S(acc / double(count));
  auto pn = pred.node(), tn = target.node(), mn = mask.node();
  return detail::finish<S>(out, {pn, tn, mn}, [pn, tn, mn, count](TensorNode<S>& self) {
    const S g = self.grad[0];
    const int64_t n = int64_t(pn->data.size());
    const S inv = S(2) / S(count);
    for (int64_t i = 0; i < n; ++i) {
      const S d = g * inv * mn->data[i] * (pn->data[i] - tn->data[i]);
      if (pn->requires_grad) {
        detail::ensure_grad(*pn);
        pn->grad[i] += d;
      }
      if (tn->requires_grad) {
        detail::ensure_grad(*tn);
        tn->grad[i] -= d;
      }
    }
  });
}

/// Mean over valid pixels of 1 - <pred, gt> / sqrt(|pred|^2 + eps^2).
/// pred and gt are [B, 3, H, W]; mask is [B, 1, H, W] with 0/1 entries. gt
/// rows are renormalized in the accumulator (they arrive rounded to storage
/// precision) and are not differentiated; an all-zero gt row contributes 1.
template <typename S>
Tensor<S> cosine_loss(const Tensor<S>& pred, const Tensor<S>& gt, const Tensor<S>& mask,
                      S eps = S(1e-8)) {
  detail::check_input(pred, "cosine_loss");
  detail::check_input(gt, "cosine_loss");
  detail::check_input(mask, "cosine_loss");
  detail::require(pred.ndim() == 4 && pred.dim(1) == 3, "cosine_loss: pred must be [B,3,H,W]");
  detail::require(pred.shape() == gt.shape(), "cosine_loss: pred/gt shape mismatch");
  detail::require(mask.ndim() == 4 && mask.dim(1) == 1 && mask.dim(0) == pred.dim(0) &&
                      mask.dim(2) == pred.dim(2) && mask.dim(3) == pred.dim(3),
                  "cosine_loss: mask must be [B,1,H,W] matching pred");
  const int B = pred.dim(0), H = pred.dim(2), W = pred.dim(3);
  const int64_t plane = int64_t(H) * W;
  const S* m = mask.data();
  int64_t count = 0;
  for (int64_t i = 0; i < int64_t(B) * plane; ++i) {
    if (m[i] != S(0) && m[i] != S(1))
      throw std::invalid_argument("cosine_loss: mask values must be 0 or 1");
    count += m[i] == S(1);
  }
  if (count == 0) throw std::invalid_argument("cosine_loss: empty mask, no supervision");
  const S* p = pred.data();
  const S* t = gt.data();
  double acc = 0;
  for (int b = 0; b < B; ++b)
    for (int64_t q = 0; q < plane; ++q) {
      if (m[b * plane + q] != S(1)) continue;
      double sq = double(eps) * double(eps), dot = 0, tsq = 0;
      for (int c = 0; c < 3; ++c) {
        const double pv = p[(int64_t(b) * 3 + c) * plane + q];
        const double tv = t[(int64_t(b) * 3 + c) * plane + q];
        sq += pv * pv;
        dot += pv * tv;
        tsq += tv * tv;
      }
      if (tsq > 1e-30) dot /= std::sqrt(tsq);
      acc += 1.0 - dot / std::sqrt(sq);
    }
  auto out = Tensor<S>::alloc({1});
  out->data[0] = S(acc / double(count));
  auto pn = pred.node(), tn = gt.node(), mn = mask.node();
  return detail::finish<S>(out, {pn, tn, mn}, [pn, tn, mn, B, plane, count,
                                               eps](TensorNode<S>& self) {
    if (!pn->requires_grad) return;
    detail::ensure_grad(*pn);
    const S g = self.grad[0] / S(count);
    for (int b = 0; b < B; ++b)
      for (int64_t q = 0; q < plane; ++q) {
        if (mn->data[b * plane + q] != S(1)) continue;
        S sq = eps * eps, dot = S(0), tsq = S(0);
        S pv[3], tv[3];
        for (int c = 0; c < 3; ++c) {
          pv[c] = pn->data[(int64_t(b) * 3 + c) * plane + q];
          tv[c] = tn->data[(int64_t(b) * 3 + c) * plane + q];
          sq += pv[c] * pv[c];
          dot += pv[c] * tv[c];
          tsq += tv[c] * tv[c];
        }
        if (tsq > S(1e-30)) {
          const S tinv = S(1) / std::sqrt(tsq);
          dot *= tinv;
          for (int c = 0; c < 3; ++c) tv[c] *= tinv;
        }
        const S inv = S(1) / std::sqrt(sq);
        const S inv3 = inv * inv * inv;
        for (int c = 0; c < 3; ++c)
          pn->grad[(int64_t(b) * 3 + c) * plane + q] -= g * (tv[c] * inv - pv[c] * dot * inv3);
      }
  });
}

}  // namespace normfill
