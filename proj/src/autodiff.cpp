#include "tristream/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace tristream::ad {

namespace {

thread_local bool t_grad_enabled = true;

void check(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

struct Shape {
  Index rows;
  Index cols;
};

Shape broadcast_shape(const Matrix& a, const Matrix& b, const char* op) {
  auto dim = [op](Index x, Index y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw std::invalid_argument(std::string("incompatible broadcast in ") + op);
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

template <class F>
Matrix binary_value(const Matrix& a, const Matrix& b, F f, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return a.binaryExpr(b, f);
  const Shape s = broadcast_shape(a, b, op);
  Matrix out(s.rows, s.cols);
  const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
  for (Index i = 0; i < s.rows; ++i) {
    for (Index j = 0; j < s.cols; ++j) {
      out(i, j) = f(a(ar ? 0 : i, ac ? 0 : j), b(br ? 0 : i, bc ? 0 : j));
    }
  }
  return out;
}

template <class F>
Var unary(const Var& a, F f, BackwardFn bw, const char* name) {
  return make_op(a.value().unaryExpr(f), {a}, std::move(bw), name);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

int l_of_lm(int lm) { return static_cast<int>(std::sqrt(static_cast<double>(lm) + 0.5)); }

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Matrix& Var::value() const {
  if (!node_) throw std::logic_error("access to undefined Var");
  return node_->value;
}

Matrix& Var::mutable_value() {
  if (!node_) throw std::logic_error("access to undefined Var");
  if (!node_->is_leaf) throw std::logic_error("mutable_value on a non-leaf Var");
  return node_->value;
}

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("item() on a non-scalar Var");
  return v(0, 0);
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const char* Var::op_name() const { return node_ ? node_->name : "undefined"; }

bool grad_enabled() { return t_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

Var make_op(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* name) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->is_leaf = false;
  node->name = name;
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

Var constant(Matrix value) { return Var(std::move(value), false); }
Var zeros(Index rows, Index cols) { return constant(Matrix::Zero(rows, cols)); }
Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }
Var detach(const Var& a) { return constant(a.value()); }

Var opaque(const Var& a, const char* what) {
  std::string message = std::string("cannot differentiate through ") + what;
  return make_op(a.value(), {a},
                 [message](const BackwardContext&) -> std::vector<Var> { throw UnsupportedOperation(message); },
                 "opaque");
}

// ---------------------------------------------------------------------------
// broadcasting arithmetic

Var sum_to(const Var& a, Index rows, Index cols) {
  const Matrix& v = a.value();
  if (v.rows() == rows && v.cols() == cols) return a;
  check((rows == v.rows() || rows == 1) && (cols == v.cols() || cols == 1), "sum_to: bad shape");
  Matrix out;
  if (rows == 1 && cols == 1) {
    out = Matrix::Constant(1, 1, v.sum());
  } else if (rows == 1) {
    out = v.colwise().sum();
  } else {
    out = v.rowwise().sum();
  }
  const Index r0 = v.rows(), c0 = v.cols();
  return make_op(std::move(out), {a},
                 [r0, c0](const BackwardContext& c) {
                   return std::vector<Var>{broadcast_to(c.grad, r0, c0)};
                 },
                 "sum_to");
}

Var broadcast_to(const Var& a, Index rows, Index cols) {
  const Matrix& v = a.value();
  if (v.rows() == rows && v.cols() == cols) return a;
  check((v.rows() == rows || v.rows() == 1) && (v.cols() == cols || v.cols() == 1),
        "broadcast_to: bad shape");
  Matrix out = v.replicate(v.rows() == rows ? 1 : rows, v.cols() == cols ? 1 : cols);
  const Index r0 = v.rows(), c0 = v.cols();
  return make_op(std::move(out), {a},
                 [r0, c0](const BackwardContext& c) {
                   return std::vector<Var>{sum_to(c.grad, r0, c0)};
                 },
                 "broadcast_to");
}

Var add(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](double x, double y) { return x + y; }, "add");
  return make_op(std::move(v), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   if (c.needs[0]) g[0] = sum_to(c.grad, c.inputs[0].rows(), c.inputs[0].cols());
                   if (c.needs[1]) g[1] = sum_to(c.grad, c.inputs[1].rows(), c.inputs[1].cols());
                   return g;
                 },
                 "add");
}

Var sub(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](double x, double y) { return x - y; }, "sub");
  return make_op(std::move(v), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   if (c.needs[0]) g[0] = sum_to(c.grad, c.inputs[0].rows(), c.inputs[0].cols());
                   if (c.needs[1])
                     g[1] = neg(sum_to(c.grad, c.inputs[1].rows(), c.inputs[1].cols()));
                   return g;
                 },
                 "sub");
}

Var mul(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](double x, double y) { return x * y; }, "mul");
  return make_op(std::move(v), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   const Var& a = c.inputs[0];
                   const Var& b = c.inputs[1];
                   if (c.needs[0]) g[0] = sum_to(mul(c.grad, b), a.rows(), a.cols());
                   if (c.needs[1]) g[1] = sum_to(mul(c.grad, a), b.rows(), b.cols());
                   return g;
                 },
                 "mul");
}

Var div(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](double x, double y) { return x / y; }, "div");
  return make_op(std::move(v), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   const Var& a = c.inputs[0];
                   const Var& b = c.inputs[1];
                   if (c.needs[0]) g[0] = sum_to(div(c.grad, b), a.rows(), a.cols());
                   if (c.needs[1]) g[1] = neg(sum_to(div(mul(c.grad, c.out), b), b.rows(), b.cols()));
                   return g;
                 },
                 "div");
}

Var neg(const Var& a) {
  return make_op(-a.value(), {a},
                 [](const BackwardContext& c) { return std::vector<Var>{neg(c.grad)}; }, "neg");
}

Var scale(const Var& a, double k) {
  return make_op(a.value() * k, {a},
                 [k](const BackwardContext& c) { return std::vector<Var>{scale(c.grad, k)}; },
                 "scale");
}

Var add_scalar(const Var& a, double k) {
  return make_op(a.value().array() + k, {a},
                 [](const BackwardContext& c) { return std::vector<Var>{c.grad}; }, "add_scalar");
}

// ---------------------------------------------------------------------------
// elementwise

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, c.out)}; }, "exp");
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); },
               [](const BackwardContext& c) { return std::vector<Var>{div(c.grad, c.inputs[0])}; },
               "log");
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](const BackwardContext& c) {
                 return std::vector<Var>{div(scale(c.grad, 0.5), c.out)};
               },
               "sqrt");
}

Var sin(const Var& a) {
  return unary(a, [](double x) { return std::sin(x); },
               [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, cos(c.inputs[0]))}; },
               "sin");
}

Var cos(const Var& a) {
  return unary(a, [](double x) { return std::cos(x); },
               [](const BackwardContext& c) {
                 return std::vector<Var>{neg(mul(c.grad, sin(c.inputs[0])))};
               },
               "cos");
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; },
               [](const BackwardContext& c) {
                 return std::vector<Var>{mul(c.grad, scale(c.inputs[0], 2.0))};
               },
               "square");
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](const BackwardContext& c) {
                 Matrix sign = c.inputs[0].value().unaryExpr(
                     [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
                 return std::vector<Var>{mul(c.grad, constant(std::move(sign)))};
               },
               "abs");
}

Var silu(const Var& a) {
  return unary(a, [](double x) { return x * sigmoid(x); },
               [](const BackwardContext& c) {
                 return std::vector<Var>{mul(c.grad, silu_d1(c.inputs[0]))};
               },
               "silu");
}

Var silu_d1(const Var& a) {
  return unary(a,
               [](double x) {
                 const double s = sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               },
               [](const BackwardContext& c) {
                 return std::vector<Var>{mul(c.grad, silu_d2(c.inputs[0]))};
               },
               "silu_d1");
}

Var silu_d2(const Var& a) {
  return unary(a,
               [](double x) {
                 const double s = sigmoid(x);
                 return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
               },
               [](const BackwardContext& c) {
                 return std::vector<Var>{mul(c.grad, silu_d3(c.inputs[0]))};
               },
               "silu_d2");
}

Var silu_d3(const Var& a) {
  return unary(a,
               [](double x) {
                 const double s = sigmoid(x);
                 const double ds = s * (1.0 - s);
                 const double u = 1.0 - 2.0 * s;
                 return ds * (u * (3.0 + x * u) - 2.0 * x * ds);
               },
               [](const BackwardContext&) -> std::vector<Var> {
                 throw UnsupportedOperation("fourth derivative of silu is not implemented");
               },
               "silu_d3");
}

// ---------------------------------------------------------------------------
// linear algebra and reductions

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return make_op(std::move(v), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   if (c.needs[0]) g[0] = matmul(c.grad, transpose(c.inputs[1]));
                   if (c.needs[1]) g[1] = matmul(transpose(c.inputs[0]), c.grad);
                   return g;
                 },
                 "matmul");
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a},
                 [](const BackwardContext& c) { return std::vector<Var>{transpose(c.grad)}; },
                 "transpose");
}

Var sum(const Var& a) { return sum_to(a, 1, 1); }
Var sum_rows(const Var& a) { return sum_to(a, 1, a.cols()); }
Var sum_cols(const Var& a) { return sum_to(a, a.rows(), 1); }
Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// indexing

Var gather_rows(const Var& a, IndexList index) {
  const Matrix& v = a.value();
  Matrix out(static_cast<Index>(index->size()), v.cols());
  for (std::size_t k = 0; k < index->size(); ++k) {
    const int r = (*index)[k];
    if (r < 0 || r >= v.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(k)) = v.row(r);
  }
  const Index n = v.rows();
  return make_op(std::move(out), {a},
                 [index, n](const BackwardContext& c) {
                   return std::vector<Var>{scatter_add_rows(c.grad, index, n)};
                 },
                 "gather_rows");
}

Var scatter_add_rows(const Var& a, IndexList index, Index out_rows) {
  const Matrix& v = a.value();
  check(static_cast<Index>(index->size()) == v.rows(), "scatter_add_rows: index size mismatch");
  Matrix out = Matrix::Zero(out_rows, v.cols());
  for (std::size_t k = 0; k < index->size(); ++k) {
    const int r = (*index)[k];
    if (r < 0 || r >= out_rows) throw std::out_of_range("scatter_add_rows: index out of range");
    out.row(r) += v.row(static_cast<Index>(k));
  }
  return make_op(std::move(out), {a},
                 [index](const BackwardContext& c) {
                   return std::vector<Var>{gather_rows(c.grad, index)};
                 },
                 "scatter_add_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    check(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return make_op(std::move(out), parts,
                 [offsets](const BackwardContext& c) {
                   std::vector<Var> g(c.inputs.size());
                   for (std::size_t k = 0; k < c.inputs.size(); ++k) {
                     if (c.needs[k]) g[k] = slice_cols(c.grad, offsets[k], c.inputs[k].cols());
                   }
                   return g;
                 },
                 "concat_cols");
}

Var concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return make_op(std::move(out), parts,
                 [offsets](const BackwardContext& c) {
                   std::vector<Var> g(c.inputs.size());
                   for (std::size_t k = 0; k < c.inputs.size(); ++k) {
                     if (c.needs[k]) g[k] = slice_rows(c.grad, offsets[k], c.inputs[k].rows());
                   }
                   return g;
                 },
                 "concat_rows");
}

Var slice_cols(const Var& a, Index start, Index count) {
  check(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  const Index total = a.cols();
  return make_op(a.value().middleCols(start, count), {a},
                 [start, total](const BackwardContext& c) {
                   return std::vector<Var>{embed_cols(c.grad, start, total)};
                 },
                 "slice_cols");
}

Var slice_rows(const Var& a, Index start, Index count) {
  check(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  const Index total = a.rows();
  return make_op(a.value().middleRows(start, count), {a},
                 [start, total](const BackwardContext& c) {
                   return std::vector<Var>{embed_rows(c.grad, start, total)};
                 },
                 "slice_rows");
}

Var embed_cols(const Var& a, Index start, Index total_cols) {
  check(start >= 0 && start + a.cols() <= total_cols, "embed_cols: out of range");
  Matrix out = Matrix::Zero(a.rows(), total_cols);
  out.middleCols(start, a.cols()) = a.value();
  const Index count = a.cols();
  return make_op(std::move(out), {a},
                 [start, count](const BackwardContext& c) {
                   return std::vector<Var>{slice_cols(c.grad, start, count)};
                 },
                 "embed_cols");
}

Var embed_rows(const Var& a, Index start, Index total_rows) {
  check(start >= 0 && start + a.rows() <= total_rows, "embed_rows: out of range");
  Matrix out = Matrix::Zero(total_rows, a.cols());
  out.middleRows(start, a.rows()) = a.value();
  const Index count = a.rows();
  return make_op(std::move(out), {a},
                 [start, count](const BackwardContext& c) {
                   return std::vector<Var>{slice_rows(c.grad, start, count)};
                 },
                 "embed_rows");
}

// ---------------------------------------------------------------------------
// bilinear row products

Var row_outer(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  check(av.rows() == bv.rows(), "row_outer: row mismatch");
  const Index p = av.cols(), q = bv.cols();
  Matrix out(av.rows(), p * q);
  for (Index e = 0; e < av.rows(); ++e) {
    for (Index i = 0; i < p; ++i) out.row(e).segment(i * q, q) = av(e, i) * bv.row(e);
  }
  return make_op(std::move(out), {a, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   if (c.needs[0]) g[0] = row_contract_right(c.grad, c.inputs[1]);
                   if (c.needs[1]) g[1] = row_contract_left(c.grad, c.inputs[0]);
                   return g;
                 },
                 "row_outer");
}

Var row_contract_right(const Var& g, const Var& b) {
  const Matrix& gv = g.value();
  const Matrix& bv = b.value();
  const Index q = bv.cols();
  check(gv.rows() == bv.rows() && q > 0 && gv.cols() % q == 0, "row_contract_right: shape");
  const Index p = gv.cols() / q;
  Matrix out(gv.rows(), p);
  for (Index e = 0; e < gv.rows(); ++e) {
    for (Index i = 0; i < p; ++i) out(e, i) = gv.row(e).segment(i * q, q).dot(bv.row(e));
  }
  return make_op(std::move(out), {g, b},
                 [](const BackwardContext& c) {
                   std::vector<Var> r(2);
                   if (c.needs[0]) r[0] = row_outer(c.grad, c.inputs[1]);
                   if (c.needs[1]) r[1] = row_contract_left(c.inputs[0], c.grad);
                   return r;
                 },
                 "row_contract_right");
}

Var row_contract_left(const Var& g, const Var& a) {
  const Matrix& gv = g.value();
  const Matrix& av = a.value();
  const Index p = av.cols();
  check(gv.rows() == av.rows() && p > 0 && gv.cols() % p == 0, "row_contract_left: shape");
  const Index q = gv.cols() / p;
  Matrix out = Matrix::Zero(gv.rows(), q);
  for (Index e = 0; e < gv.rows(); ++e) {
    for (Index i = 0; i < p; ++i) out.row(e) += av(e, i) * gv.row(e).segment(i * q, q);
  }
  return make_op(std::move(out), {g, a},
                 [](const BackwardContext& c) {
                   std::vector<Var> r(2);
                   if (c.needs[0]) r[0] = row_outer(c.inputs[1], c.grad);
                   if (c.needs[1]) r[1] = row_contract_right(c.inputs[0], c.grad);
                   return r;
                 },
                 "row_contract_left");
}

// ---------------------------------------------------------------------------
// power spectrum products

Var cross_power_spectrum(const Var& a, const Var& b, int channels, int lmax) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const int nlm = (lmax + 1) * (lmax + 1);
  check(av.cols() == channels * nlm && bv.cols() == channels * nlm && av.rows() == bv.rows(),
        "cross_power_spectrum: shape");
  const int npairs = channels * (channels + 1) / 2;
  Matrix out = Matrix::Zero(av.rows(), npairs * (lmax + 1));
  for (Index n = 0; n < av.rows(); ++n) {
    int p = 0;
    for (int x = 0; x < channels; ++x) {
      for (int y = x; y < channels; ++y, ++p) {
        for (int lm = 0; lm < nlm; ++lm) {
          const int l = l_of_lm(lm);
          const double v = av(n, x * nlm + lm) * bv(n, y * nlm + lm) +
                           av(n, y * nlm + lm) * bv(n, x * nlm + lm);
          out(n, p * (lmax + 1) + l) += 0.5 * v;
        }
      }
    }
  }
  return make_op(std::move(out), {a, b},
                 [channels, lmax](const BackwardContext& c) {
                   std::vector<Var> g(2);
                   if (c.needs[0]) g[0] = power_spectrum_mix(c.grad, c.inputs[1], channels, lmax);
                   if (c.needs[1]) g[1] = power_spectrum_mix(c.grad, c.inputs[0], channels, lmax);
                   return g;
                 },
                 "cross_power_spectrum");
}

Var power_spectrum_mix(const Var& g, const Var& a, int channels, int lmax) {
  const Matrix& gv = g.value();
  const Matrix& av = a.value();
  const int nlm = (lmax + 1) * (lmax + 1);
  const int npairs = channels * (channels + 1) / 2;
  check(gv.cols() == npairs * (lmax + 1) && av.cols() == channels * nlm && gv.rows() == av.rows(),
        "power_spectrum_mix: shape");
  Matrix out = Matrix::Zero(av.rows(), channels * nlm);
  for (Index n = 0; n < av.rows(); ++n) {
    int p = 0;
    for (int x = 0; x < channels; ++x) {
      for (int y = x; y < channels; ++y, ++p) {
        for (int lm = 0; lm < nlm; ++lm) {
          const double w = gv(n, p * (lmax + 1) + l_of_lm(lm));
          if (x == y) {
            out(n, x * nlm + lm) += w * av(n, x * nlm + lm);
          } else {
            out(n, y * nlm + lm) += 0.5 * w * av(n, x * nlm + lm);
            out(n, x * nlm + lm) += 0.5 * w * av(n, y * nlm + lm);
          }
        }
      }
    }
  }
  return make_op(std::move(out), {g, a},
                 [channels, lmax](const BackwardContext& c) {
                   std::vector<Var> r(2);
                   if (c.needs[0]) r[0] = cross_power_spectrum(c.inputs[1], c.grad, channels, lmax);
                   if (c.needs[1]) r[1] = power_spectrum_mix(c.inputs[0], c.grad, channels, lmax);
                   return r;
                 },
                 "power_spectrum_mix");
}

// ---------------------------------------------------------------------------
// softmax

namespace {
Var row_max_constant(const Var& a) {
  Matrix m = a.value().rowwise().maxCoeff();
  return constant(std::move(m));
}
}  // namespace

Var softmax_rows(const Var& a) {
  Var shifted = sub(a, row_max_constant(a));
  Var e = exp(shifted);
  return div(e, sum_cols(e));
}

Var log_softmax_rows(const Var& a) {
  Var shifted = sub(a, row_max_constant(a));
  return sub(shifted, log(sum_cols(exp(shifted))));
}

// ---------------------------------------------------------------------------
// reverse sweep

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, const Var& seed,
                      bool create_graph) {
  std::vector<Var> result(wrt.size());
  auto fill_zeros = [&] {
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      if (!result[k].defined()) result[k] = zeros(wrt[k].rows(), wrt[k].cols());
    }
  };
  if (!output.requires_grad()) {
    fill_zeros();
    return result;
  }

  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) {
    if (w.defined()) targets.insert(w.node().get());
  }

  // Iterative post-order DFS; `needed` marks nodes on a path to some target.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_map<const Node*, bool> needed;
  {
    struct Frame {
      std::shared_ptr<Node> node;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({output.node(), 0});
    needed.emplace(output.node().get(), false);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->inputs.size()) {
        const auto& child = f.node->inputs[f.next++].node();
        if (child && child->requires_grad && !needed.count(child.get())) {
          needed.emplace(child.get(), false);
          stack.push_back({child, 0});
        }
        continue;
      }
      bool need = targets.count(f.node.get()) > 0;
      for (const auto& in : f.node->inputs) {
        if (in.requires_grad() && needed[in.node().get()]) need = true;
      }
      needed[f.node.get()] = need;
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  {
    Var s = seed.defined() ? seed : constant(Matrix::Ones(output.rows(), output.cols()));
    if (s.rows() != output.rows() || s.cols() != output.cols()) {
      throw std::invalid_argument("grad: seed shape differs from output");
    }
    grads.emplace(output.node().get(), s);
  }

  GradModeGuard guard(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const std::shared_ptr<Node>& node = *it;
    if (!needed[node.get()] || node->is_leaf || !node->backward) continue;
    auto git = grads.find(node.get());
    if (git == grads.end()) continue;
    std::vector<bool> needs(node->inputs.size());
    bool any = false;
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      const Var& in = node->inputs[k];
      needs[k] = in.requires_grad() && needed[in.node().get()];
      any = any || needs[k];
    }
    if (!any) continue;
    const Var g = git->second;
    if (!targets.count(node.get())) grads.erase(git);
    const Var out(node);
    std::vector<Var> in_grads = node->backward(BackwardContext{node->inputs, out, g, needs});
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      if (!needs[k] || !in_grads[k].defined()) continue;
      const Var& in = node->inputs[k];
      if (in_grads[k].rows() != in.rows() || in_grads[k].cols() != in.cols()) {
        throw std::logic_error(std::string("grad: shape mismatch from backward of ") + node->name);
      }
      auto [pos, inserted] = grads.try_emplace(in.node().get(), in_grads[k]);
      if (!inserted) pos->second = add(pos->second, in_grads[k]);
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (!wrt[k].defined()) continue;
    auto git = grads.find(wrt[k].node().get());
    if (git != grads.end()) result[k] = git->second;
  }
  fill_zeros();
  return result;
}

}  // namespace tristream::ad
