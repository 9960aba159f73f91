#pragma once

// Tape-free reverse-mode differentiation over dense row-major matrices.
//
// Every Var owns a node in a dynamically recorded graph. Backward rules are
// themselves written with Var operations, so calling grad() with
// create_graph=true records the backward pass and allows a second
// differentiation (forces from energies, then parameter gradients of a force
// loss).

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tristream::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using IndexList = std::shared_ptr<const std::vector<int>>;

struct Node;
class Var;

struct BackwardContext {
  const std::vector<Var>& inputs;
  const Var& out;
  const Var& grad;
  const std::vector<bool>& needs;
};

using BackwardFn = std::function<std::vector<Var>(const BackwardContext&)>;

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const;
  // Leaves only; used by optimizers between steps.
  Matrix& mutable_value();
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
  bool requires_grad() const;
  const char* op_name() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Matrix value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* name = "leaf";
};

// Recording switch, thread-local so concurrent forwards stay independent.
bool grad_enabled();

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

Var make_op(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* name);

Var constant(Matrix value);
Var zeros(Index rows, Index cols);
Var scalar(double v);
Var detach(const Var& a);
// Identity in value; any attempt to differentiate through it throws
// UnsupportedOperation naming `what`.
Var opaque(const Var& a, const char* what);

// Elementwise binary ops with row/column/scalar broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var silu(const Var& a);
// Derivatives of SiLU, exposed so their own backward rules stay differentiable.
Var silu_d1(const Var& a);
Var silu_d2(const Var& a);
Var silu_d3(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var sum_to(const Var& a, Index rows, Index cols);
Var broadcast_to(const Var& a, Index rows, Index cols);
Var sum(const Var& a);
Var sum_rows(const Var& a);  // r x c -> 1 x c
Var sum_cols(const Var& a);  // r x c -> r x 1
Var mean(const Var& a);

Var gather_rows(const Var& a, IndexList index);
Var scatter_add_rows(const Var& a, IndexList index, Index out_rows);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index count);
Var slice_rows(const Var& a, Index start, Index count);
Var embed_cols(const Var& a, Index start, Index total_cols);
Var embed_rows(const Var& a, Index start, Index total_rows);

// Row-wise Kronecker product: out[e, i*q + j] = a[e,i] * b[e,j].
Var row_outer(const Var& a, const Var& b);
// Contractions that undo row_outer against one factor.
Var row_contract_right(const Var& g, const Var& b);  // -> E x p
Var row_contract_left(const Var& g, const Var& a);   // -> E x q

// Symmetrized channel products over spherical-harmonic blocks.
// A, B: n x (channels * (lmax+1)^2), channel-major.
// Output: n x (channels*(channels+1)/2 * (lmax+1)), pair-major (a <= b), l minor.
Var cross_power_spectrum(const Var& a, const Var& b, int channels, int lmax);
// Adjoint of cross_power_spectrum with respect to one argument.
Var power_spectrum_mix(const Var& g, const Var& a, int channels, int lmax);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

// Gradients of `output` (scalar unless `seed` is supplied) with respect to `wrt`.
// Unused inputs receive zero matrices. With create_graph the results are
// differentiable Vars.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, const Var& seed = Var(),
                      bool create_graph = false);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

inline IndexList make_index(std::vector<int> idx) {
  return std::make_shared<const std::vector<int>>(std::move(idx));
}

}  // namespace tristream::ad
