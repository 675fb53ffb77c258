#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bijrecon/tensor.hpp"

namespace bijrecon::nn {

class Var;
using VjpFn = std::function<std::vector<Var>(const Var& cot)>;

struct Node {
  Tensor value;
  std::vector<Var> parents;
  VjpFn vjp;              // returns one cotangent per parent (may be empty Vars)
  bool requires_grad = false;
  const char* op = "leaf";
};

// Value-semantics handle to a graph node. Ops are eager: the forward value is
// computed immediately, the vjp closure is kept for backward passes. Vjp
// closures are themselves built from ops, so gradients are differentiable
// (needed for the critic gradient penalty).
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor t, bool requires_grad) {
    Var v;
    v.n_ = std::make_shared<Node>();
    v.n_->value = std::move(t);
    v.n_->requires_grad = requires_grad;
    return v;
  }

  static Var constant(Tensor t) { return leaf(std::move(t), false); }
  static Var scalar(double x) { return constant(Tensor::scalar(x)); }

  static Var make(Tensor value, std::vector<Var> parents, VjpFn vjp, const char* op) {
    Var v;
    v.n_ = std::make_shared<Node>();
    v.n_->value = std::move(value);
    bool rg = false;
    for (const Var& p : parents) rg = rg || p.requires_grad();
    v.n_->parents = std::move(parents);
    v.n_->vjp = std::move(vjp);
    v.n_->requires_grad = rg;
    v.n_->op = op;
    return v;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& value() const { return n_->value; }
  Tensor& mutable_value() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node* node() const { return n_.get(); }
  const std::vector<int64_t>& shape() const { return n_->value.shape(); }
  int64_t numel() const { return n_->value.numel(); }
  double item() const { return n_->value[0]; }

 private:
  std::shared_ptr<Node> n_;
};

// Reverse-mode: cotangents of `out` (scalar or any shape seeded with ones)
// with respect to each entry of `wrt`. Returned Vars are graph nodes and can
// be differentiated again. Missing dependence yields a zeros cotangent.
std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt);

// ---- primitive / composite ops (eager) ------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

Var exp_(const Var& a);
Var log_(const Var& a);
Var tanh_(const Var& a);
Var sqrt_(const Var& a);
Var square(const Var& a);
Var abs_(const Var& a);
Var pow_scalar(const Var& a, double p);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);

Var sum(const Var& a, std::vector<int64_t> axes, bool keepdims);
Var sum_all(const Var& a);
Var mean(const Var& a, std::vector<int64_t> axes, bool keepdims);
Var mean_all(const Var& a);
Var reduce_max(const Var& a, std::vector<int64_t> axes, bool keepdims);

Var reshape(const Var& a, std::vector<int64_t> shape);
Var transpose(const Var& a, std::vector<int64_t> perm);
Var slice(const Var& a, std::vector<int64_t> starts, std::vector<int64_t> sizes);
Var concat(const std::vector<Var>& xs, int64_t axis);
Var flip(const Var& a, std::vector<int64_t> axes);
Var broadcast_to(const Var& a, std::vector<int64_t> shape);
Var detach(const Var& a);

Var matmul(const Var& a, const Var& b);   // [m,k] x [k,n]
Var bmm(const Var& a, const Var& b);      // [B,m,k] x [B,k,n]

// NCHW, stride 1, no padding; pad via pad2d.
Var conv2d_valid(const Var& x, const Var& w);
Var pad2d(const Var& x, int64_t top, int64_t bottom, int64_t left, int64_t right);
Var avg_pool2(const Var& x);      // 2x2, stride 2
Var upsample2(const Var& x);      // nearest, 2x

// ---- composites ------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t pad);  // b [O] or undefined
Var dense(const Var& x, const Var& w, const Var& b);                // x [N,I], w [I,O], b [O]
Var softmax(const Var& x, int64_t axis);
Var log_softmax(const Var& x, int64_t axis);
Var instance_norm(const Var& x, double eps);  // NCHW, per sample+channel
Var layer_norm(const Var& x, double eps);     // normalize last axis
Var minibatch_stddev(const Var& x);           // appends one channel, NCHW
Var l2_normalize_rows(const Var& x, double eps);
Var cosine_rows(const Var& a, const Var& b, double eps);  // [N,D] -> [N]

// Broadcast helpers for code clarity.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// Numpy-style broadcast shape of two shapes (right aligned); throws if
// incompatible.
std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b);

}  // namespace bijrecon::nn
