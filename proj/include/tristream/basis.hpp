#pragma once

#include "tristream/autodiff.hpp"
#include "tristream/structure.hpp"

#include <vector>

namespace tristream {

enum class RadialKind { bessel, gaussian };

const char* to_string(RadialKind kind);
RadialKind radial_kind_from_string(const std::string& name);

struct RadialBasisSpec {
  RadialKind kind = RadialKind::bessel;
  int count = 8;
  double r_cut = 6.0;

  void validate() const;
};

struct CutoffBank {
  std::vector<double> scales{0.5, 0.75, 1.0};

  void validate() const;
};

// Bessel: sqrt(2/rc) sin(k pi r / rc) / r, k = 1..K.
// Gaussian: centers k*rc/(K-1) for k = 0..K-1 (a single center sits at 0),
// width equal to the spacing (rc when K = 1).
std::vector<double> eval_radial(const RadialBasisSpec& spec, double r);

// 0.5 (cos(pi r / rc) + 1) below rc, exactly 0 from rc on.
double eval_cutoff(double scale_radius, double r);

// Orthonormal real harmonics without the Condon-Shortley phase, ordered by l and
// then m = -l..l. m > 0 carries cos(m phi), m < 0 carries sin(|m| phi).
std::vector<double> eval_sph_harm(const Vec3& direction, int lmax);

inline int sph_harm_count(int lmax) { return (lmax + 1) * (lmax + 1); }

// Block s holds s_s(r) * phi_k(r), s_s using radius scales[s] * r_cut.
std::vector<double> multiscale_features(const RadialBasisSpec& spec, const CutoffBank& bank, double r);

namespace ad_basis {

// Column-vector distances (E x 1) in, per-edge features out; differentiable.
ad::Var radial(const ad::Var& distances, const RadialBasisSpec& spec);
ad::Var cutoff(const ad::Var& distances, double scale_radius);
ad::Var multiscale(const ad::Var& distances, const RadialBasisSpec& spec, const CutoffBank& bank);
// Unit vectors (E x 3) in, E x (lmax+1)^2 out.
ad::Var sph_harm(const ad::Var& unit, int lmax);

}  // namespace ad_basis

}  // namespace tristream
