#include "tristream/basis.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace tristream {

namespace {

constexpr double kPi = std::numbers::pi;

double sph_norm(int l, int m) {
  // (l-m)!/(l+m)! as a running product keeps precision for small l.
  double ratio = 1.0;
  for (int k = l - m + 1; k <= l + m; ++k) ratio /= static_cast<double>(k);
  return std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * ratio);
}

double double_factorial_odd(int m) {  // (2m-1)!!
  double v = 1.0;
  for (int k = 1; k <= 2 * m - 1; k += 2) v *= k;
  return v;
}

int lm_index(int l, int m) { return l * l + l + m; }

}  // namespace

const char* to_string(RadialKind kind) { return kind == RadialKind::bessel ? "bessel" : "gaussian"; }

RadialKind radial_kind_from_string(const std::string& name) {
  if (name == "bessel") return RadialKind::bessel;
  if (name == "gaussian") return RadialKind::gaussian;
  throw std::invalid_argument("unknown radial basis '" + name + "'");
}

void RadialBasisSpec::validate() const {
  if (count < 1) throw std::invalid_argument("radial basis count must be >= 1");
  if (!(r_cut > 0.0)) throw std::invalid_argument("radial basis r_cut must be positive");
}

void CutoffBank::validate() const {
  if (scales.empty()) throw std::invalid_argument("cutoff bank needs at least one scale");
  for (double s : scales) {
    if (!(s > 0.0 && s <= 1.0)) throw std::invalid_argument("cutoff scales must lie in (0, 1]");
  }
}

std::vector<double> eval_radial(const RadialBasisSpec& spec, double r) {
  spec.validate();
  if (!(r > 0.0) || !std::isfinite(r)) {
    std::ostringstream os;
    os << "radial basis needs r > 0, got " << r;
    throw DomainError(os.str());
  }
  std::vector<double> out(static_cast<std::size_t>(spec.count));
  if (spec.kind == RadialKind::bessel) {
    const double pref = std::sqrt(2.0 / spec.r_cut);
    for (int k = 1; k <= spec.count; ++k) {
      out[static_cast<std::size_t>(k - 1)] = pref * std::sin(k * kPi * r / spec.r_cut) / r;
    }
  } else {
    const double spacing = spec.count > 1 ? spec.r_cut / (spec.count - 1) : spec.r_cut;
    for (int k = 0; k < spec.count; ++k) {
      const double d = r - k * spacing;
      out[static_cast<std::size_t>(k)] = std::exp(-d * d / (2.0 * spacing * spacing));
    }
  }
  return out;
}

double eval_cutoff(double scale_radius, double r) {
  if (!(scale_radius > 0.0)) throw std::invalid_argument("cutoff radius must be positive");
  if (r >= scale_radius) return 0.0;
  return 0.5 * (std::cos(kPi * r / scale_radius) + 1.0);
}

std::vector<double> eval_sph_harm(const Vec3& direction, int lmax) {
  if (lmax < 0) throw std::invalid_argument("lmax must be >= 0");
  if (!direction.allFinite() || std::abs(direction.norm() - 1.0) > 1e-8) {
    throw DomainError("spherical harmonics need a unit direction");
  }
  const double x = direction.x(), y = direction.y(), z = direction.z();
  std::vector<double> out(static_cast<std::size_t>(sph_harm_count(lmax)), 0.0);

  // C_m + i S_m = (x + i y)^m
  std::vector<double> c(static_cast<std::size_t>(lmax + 1)), s(static_cast<std::size_t>(lmax + 1));
  c[0] = 1.0;
  s[0] = 0.0;
  for (int m = 1; m <= lmax; ++m) {
    c[static_cast<std::size_t>(m)] = x * c[static_cast<std::size_t>(m - 1)] - y * s[static_cast<std::size_t>(m - 1)];
    s[static_cast<std::size_t>(m)] = x * s[static_cast<std::size_t>(m - 1)] + y * c[static_cast<std::size_t>(m - 1)];
  }

  for (int m = 0; m <= lmax; ++m) {
    // Q_l^m(z) = P_l^m(z) / (1 - z^2)^{m/2}, without the Condon-Shortley sign.
    double q_prev2 = 0.0;
    double q_prev = double_factorial_odd(m);
    for (int l = m; l <= lmax; ++l) {
      double q;
      if (l == m) {
        q = q_prev;
      } else if (l == m + 1) {
        q = (2.0 * m + 1.0) * z * q_prev;
      } else {
        q = ((2.0 * l - 1.0) * z * q_prev - (l + m - 1.0) * q_prev2) / (l - m);
      }
      if (l > m) {
        q_prev2 = q_prev;
        q_prev = q;
      }
      const double n = sph_norm(l, m);
      if (m == 0) {
        out[static_cast<std::size_t>(lm_index(l, 0))] = n * q;
      } else {
        out[static_cast<std::size_t>(lm_index(l, m))] = std::numbers::sqrt2 * n * q * c[static_cast<std::size_t>(m)];
        out[static_cast<std::size_t>(lm_index(l, -m))] = std::numbers::sqrt2 * n * q * s[static_cast<std::size_t>(m)];
      }
    }
  }
  return out;
}

std::vector<double> multiscale_features(const RadialBasisSpec& spec, const CutoffBank& bank, double r) {
  bank.validate();
  const std::vector<double> phi = eval_radial(spec, r);
  std::vector<double> out;
  out.reserve(phi.size() * bank.scales.size());
  for (double scale : bank.scales) {
    const double env = eval_cutoff(scale * spec.r_cut, r);
    for (double p : phi) out.push_back(env * p);
  }
  return out;
}

namespace ad_basis {

ad::Var radial(const ad::Var& distances, const RadialBasisSpec& spec) {
  spec.validate();
  if (distances.cols() != 1) throw std::invalid_argument("distances must be a column");
  if (distances.rows() > 0 && !(distances.value().minCoeff() > 0.0)) {
    throw DomainError("radial basis needs r > 0");
  }
  ad::Matrix row(1, spec.count);
  if (spec.kind == RadialKind::bessel) {
    for (int k = 1; k <= spec.count; ++k) row(0, k - 1) = k * kPi / spec.r_cut;
    const ad::Var arg = ad::mul(distances, ad::constant(row));
    return ad::scale(ad::div(ad::sin(arg), distances), std::sqrt(2.0 / spec.r_cut));
  }
  const double spacing = spec.count > 1 ? spec.r_cut / (spec.count - 1) : spec.r_cut;
  for (int k = 0; k < spec.count; ++k) row(0, k) = k * spacing;
  const ad::Var d = ad::sub(distances, ad::constant(row));
  return ad::exp(ad::scale(ad::square(d), -1.0 / (2.0 * spacing * spacing)));
}

ad::Var cutoff(const ad::Var& distances, double scale_radius) {
  if (!(scale_radius > 0.0)) throw std::invalid_argument("cutoff radius must be positive");
  ad::Matrix inside(distances.rows(), 1);
  for (ad::Index e = 0; e < distances.rows(); ++e) {
    inside(e, 0) = distances.value()(e, 0) < scale_radius ? 1.0 : 0.0;
  }
  const ad::Var c = ad::add_scalar(ad::cos(ad::scale(distances, kPi / scale_radius)), 1.0);
  return ad::mul(ad::scale(c, 0.5), ad::constant(inside));
}

ad::Var multiscale(const ad::Var& distances, const RadialBasisSpec& spec, const CutoffBank& bank) {
  bank.validate();
  const ad::Var phi = radial(distances, spec);
  std::vector<ad::Var> blocks;
  blocks.reserve(bank.scales.size());
  for (double scale : bank.scales) blocks.push_back(ad::mul(phi, cutoff(distances, scale * spec.r_cut)));
  return ad::concat_cols(blocks);
}

namespace {

// Either a constant column value or a recorded column.
struct Column {
  bool is_const = true;
  double c = 0.0;
  ad::Var v;
};

ad::Var materialize(const Column& col, ad::Index rows) {
  if (!col.is_const) return col.v;
  return ad::constant(ad::Matrix::Constant(rows, 1, col.c));
}

Column times(const Column& a, const ad::Var& b) {
  if (a.is_const) return {false, 0.0, ad::scale(b, a.c)};
  return {false, 0.0, ad::mul(a.v, b)};
}

Column lin(double alpha, const Column& a, double beta, const Column& b) {
  if (a.is_const && b.is_const) return {true, alpha * a.c + beta * b.c, {}};
  if (a.is_const) return {false, 0.0, ad::add_scalar(ad::scale(b.v, beta), alpha * a.c)};
  if (b.is_const) return {false, 0.0, ad::add_scalar(ad::scale(a.v, alpha), beta * b.c)};
  return {false, 0.0, ad::add(ad::scale(a.v, alpha), ad::scale(b.v, beta))};
}

Column prod(const Column& a, const Column& b) {
  if (a.is_const && b.is_const) return {true, a.c * b.c, {}};
  if (a.is_const) return {false, 0.0, ad::scale(b.v, a.c)};
  if (b.is_const) return {false, 0.0, ad::scale(a.v, b.c)};
  return {false, 0.0, ad::mul(a.v, b.v)};
}

}  // namespace

ad::Var sph_harm(const ad::Var& unit, int lmax) {
  if (lmax < 0) throw std::invalid_argument("lmax must be >= 0");
  if (unit.cols() != 3) throw std::invalid_argument("unit vectors must have 3 columns");
  const ad::Index rows = unit.rows();
  const ad::Var x = ad::slice_cols(unit, 0, 1);
  const ad::Var y = ad::slice_cols(unit, 1, 1);
  const ad::Var z = ad::slice_cols(unit, 2, 1);

  std::vector<Column> c(static_cast<std::size_t>(lmax + 1)), s(static_cast<std::size_t>(lmax + 1));
  c[0] = {true, 1.0, {}};
  s[0] = {true, 0.0, {}};
  for (int m = 1; m <= lmax; ++m) {
    const auto& cp = c[static_cast<std::size_t>(m - 1)];
    const auto& sp = s[static_cast<std::size_t>(m - 1)];
    if (m == 1) {
      c[1] = {false, 0.0, x};
      s[1] = {false, 0.0, y};
    } else {
      c[static_cast<std::size_t>(m)] = {false, 0.0, ad::sub(ad::mul(x, cp.v), ad::mul(y, sp.v))};
      s[static_cast<std::size_t>(m)] = {false, 0.0, ad::add(ad::mul(x, sp.v), ad::mul(y, cp.v))};
    }
  }

  std::vector<ad::Var> cols(static_cast<std::size_t>(sph_harm_count(lmax)));
  for (int m = 0; m <= lmax; ++m) {
    Column q_prev2{true, 0.0, {}};
    Column q_prev{true, double_factorial_odd(m), {}};
    for (int l = m; l <= lmax; ++l) {
      Column q;
      if (l == m) {
        q = q_prev;
      } else if (l == m + 1) {
        q = times(q_prev, z);
        q = prod(q, {true, 2.0 * m + 1.0, {}});
      } else {
        const Column zq = times(q_prev, z);
        q = lin((2.0 * l - 1.0) / (l - m), zq, -(l + m - 1.0) / (l - m), q_prev2);
      }
      if (l > m) {
        q_prev2 = q_prev;
        q_prev = q;
      }
      const double n = sph_norm(l, m);
      if (m == 0) {
        cols[static_cast<std::size_t>(lm_index(l, 0))] = materialize(prod(q, {true, n, {}}), rows);
      } else {
        const double f = std::numbers::sqrt2 * n;
        cols[static_cast<std::size_t>(lm_index(l, m))] =
            materialize(prod(prod(q, {true, f, {}}), c[static_cast<std::size_t>(m)]), rows);
        cols[static_cast<std::size_t>(lm_index(l, -m))] =
            materialize(prod(prod(q, {true, f, {}}), s[static_cast<std::size_t>(m)]), rows);
      }
    }
  }
  return ad::concat_cols(cols);
}

}  // namespace ad_basis

}  // namespace tristream
