#pragma once

#include "tristream/batch.hpp"
#include "tristream/nn.hpp"

#include <array>

namespace tristream {

struct StructStreamConfig {
  int d_model = 256;
  double r_cut = 6.0;
  int radial_count = 8;     // K
  int mixed_channels = 8;   // K'
  int lmax = 4;
  RadialKind basis = RadialKind::bessel;
  int mlp_layers = 3;
  int mp_layers = 2;
  std::vector<double> scales{0.5, 0.75, 1.0};
  bool lattice = true;
  // Density coefficients are divided by this constant to keep the quadratic
  // spectrum at unit scale for typical coordination numbers.
  double density_norm = 10.0;

  void validate() const;
  RadialBasisSpec radial() const { return {basis, radial_count, r_cut}; }
  CutoffBank bank() const { return {scales}; }
  int spectrum_width() const { return mixed_channels * (mixed_channels + 1) / 2 * (lmax + 1); }
};

// Normalized lengths L_k / V^(1/3), angles (bc, ac, ab) / pi, log(V/N),
// log(N/V), and 1 - mean |cos| over the three angles.
std::array<double, 9> lattice_features(const std::optional<Mat3>& cell, bool periodic, int num_atoms);

// N x (K' (lmax+1)^2) coefficients c[i, a*(lmax+1)^2 + lm] = sum_j mixed_a(r_ij) Y_lm(r_ij hat).
ad::Var density_coefficients(const ad::Var& mixed_radial, const ad::Var& harmonics, const ad::IndexList& centers,
                             int num_nodes);
// Upper-triangle spectrum p[i, pair(a<=b)*(lmax+1) + l] = sum_m c_alm c_blm.
ad::Var power_spectrum(const ad::Var& coefficients, int channels, int lmax);

class StructStream {
 public:
  static StructStream create(ParameterStore& store, const StructStreamConfig& config, Rng& rng);

  const StructStreamConfig& config() const { return config_; }

  struct Trace {
    ad::Var coefficients, spectrum, initial;
  };

  // N x d_model. Uses geometry.radial, geometry.envelope and geometry.harmonics.
  ad::Var forward(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry,
                  Trace* trace = nullptr) const;

  ad::Var mixed_radial(const ParameterStore& store, const EdgeGeometry& geometry) const;

  // One message-passing update, exposed for direct tests.
  ad::Var message_pass(const ParameterStore& store, int layer, const ad::Var& h, const Batch& batch,
                       const EdgeGeometry& geometry) const;

  struct MpLayer {
    nn::Mlp phi, psi;
  };
  const MpLayer& mp_layer(int layer) const { return mp_.at(static_cast<std::size_t>(layer)); }
  const nn::Linear& edge_embedding() const { return edge_embed_; }

 private:
  StructStreamConfig config_;
  std::size_t mix_ = 0;  // (K S) x K'
  nn::Mlp lattice_mlp_;
  nn::Linear input_;
  std::vector<nn::Linear> residual_;
  nn::Linear edge_embed_;
  std::vector<MpLayer> mp_;
};

}  // namespace tristream
