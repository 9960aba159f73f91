#include "tristream/struct_stream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tristream {

void StructStreamConfig::validate() const {
  if (d_model < 1 || mixed_channels < 1 || lmax < 0 || mlp_layers < 1 || mp_layers < 0) {
    throw std::invalid_argument("invalid structure stream configuration");
  }
  if (!(density_norm > 0.0)) throw std::invalid_argument("density_norm must be positive");
  radial().validate();
  bank().validate();
}

std::array<double, 9> lattice_features(const std::optional<Mat3>& cell, bool periodic, int num_atoms) {
  std::array<double, 9> f{};
  if (!periodic) return f;
  if (!cell) throw InputError("periodic structure without a cell");
  if (num_atoms < 1) throw InputError("lattice features need at least one atom");
  const Mat3& c = *cell;
  const double volume = std::abs(c.determinant());
  if (!(volume > 1e-8) || !c.allFinite()) throw InputError("singular cell");
  const Vec3 a = c.row(0).transpose(), b = c.row(1).transpose(), cc = c.row(2).transpose();
  const double la = a.norm(), lb = b.norm(), lc = cc.norm();
  const double scale = std::cbrt(volume);
  const double cos_alpha = b.dot(cc) / (lb * lc);
  const double cos_beta = a.dot(cc) / (la * lc);
  const double cos_gamma = a.dot(b) / (la * lb);
  auto angle = [](double cosv) { return std::acos(std::clamp(cosv, -1.0, 1.0)) / std::numbers::pi; };
  f[0] = la / scale;
  f[1] = lb / scale;
  f[2] = lc / scale;
  f[3] = angle(cos_alpha);
  f[4] = angle(cos_beta);
  f[5] = angle(cos_gamma);
  f[6] = std::log(volume / num_atoms);
  f[7] = std::log(num_atoms / volume);
  f[8] = 1.0 - (std::abs(cos_alpha) + std::abs(cos_beta) + std::abs(cos_gamma)) / 3.0;
  return f;
}

ad::Var density_coefficients(const ad::Var& mixed_radial, const ad::Var& harmonics, const ad::IndexList& centers,
                             int num_nodes) {
  return ad::scatter_add_rows(ad::row_outer(mixed_radial, harmonics), centers, num_nodes);
}

ad::Var power_spectrum(const ad::Var& coefficients, int channels, int lmax) {
  return ad::cross_power_spectrum(coefficients, coefficients, channels, lmax);
}

StructStream StructStream::create(ParameterStore& store, const StructStreamConfig& config, Rng& rng) {
  config.validate();
  StructStream s;
  s.config_ = config;
  const int d = config.d_model;
  const int feat = config.radial_count * static_cast<int>(config.scales.size());
  {
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(feat)));
    ad::Matrix w(feat, config.mixed_channels);
    for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    s.mix_ = store.add("struct.mix", std::move(w));
  }
  int in = config.spectrum_width();
  if (config.lattice) {
    s.lattice_mlp_ = nn::Mlp::create(store, "struct.lattice", 9, {d}, d, rng);
    in += d;
  }
  s.input_ = nn::Linear::create(store, "struct.input", in, d, rng);
  for (int k = 1; k < config.mlp_layers; ++k) {
    s.residual_.push_back(nn::Linear::create(store, "struct.residual" + std::to_string(k), d, d, rng));
  }
  if (config.mp_layers > 0) s.edge_embed_ = nn::Linear::create(store, "struct.edge_embed", feat, d, rng, false);
  for (int l = 0; l < config.mp_layers; ++l) {
    const std::string p = "struct.mp" + std::to_string(l);
    s.mp_.push_back({nn::Mlp::create(store, p + ".phi", 2 * d, {d}, d, rng),
                     nn::Mlp::create(store, p + ".psi", 2 * d, {d}, d, rng)});
  }
  return s;
}

ad::Var StructStream::mixed_radial(const ParameterStore& store, const EdgeGeometry& geometry) const {
  return ad::matmul(geometry.radial, store.var(mix_));
}

ad::Var StructStream::message_pass(const ParameterStore& store, int layer, const ad::Var& h, const Batch& batch,
                                   const EdgeGeometry& geometry) const {
  const auto& l = mp_.at(static_cast<std::size_t>(layer));
  const ad::Var eta = edge_embed_(store, geometry.radial);
  const ad::Var msg = ad::mul(l.phi(store, ad::concat_cols({ad::gather_rows(h, batch.edge_neighbor), eta})),
                              geometry.envelope);
  const ad::Var num = ad::scatter_add_rows(msg, batch.edge_center, batch.num_nodes);
  ad::Var den = ad::scatter_add_rows(geometry.envelope, batch.edge_center, batch.num_nodes);
  // Nodes without weighted neighbors get a zero aggregate instead of 0/0.
  ad::Matrix empty(batch.num_nodes, 1);
  for (int i = 0; i < batch.num_nodes; ++i) empty(i, 0) = den.value()(i, 0) > 0.0 ? 0.0 : 1.0;
  den = ad::add(den, ad::constant(std::move(empty)));
  const ad::Var agg = ad::div(num, den);
  return ad::add(h, l.psi(store, ad::concat_cols({h, agg})));
}

ad::Var StructStream::forward(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry,
                              Trace* trace) const {
  const ad::Var coeff = ad::scale(
      density_coefficients(mixed_radial(store, geometry), geometry.harmonics, batch.edge_center, batch.num_nodes),
      1.0 / config_.density_norm);
  const ad::Var spec = power_spectrum(coeff, config_.mixed_channels, config_.lmax);
  ad::Var x = spec;
  if (config_.lattice) {
    ad::Matrix on(batch.num_structures, 1);
    for (int s = 0; s < batch.num_structures; ++s) on(s, 0) = batch.periodic[static_cast<std::size_t>(s)] ? 1.0 : 0.0;
    const ad::Var lat = ad::mul(lattice_mlp_(store, ad::constant(batch.lattice)), ad::constant(std::move(on)));
    x = ad::concat_cols({spec, ad::gather_rows(lat, batch.node_structure)});
  }
  ad::Var h = input_(store, x);
  if (trace) {
    trace->coefficients = coeff;
    trace->spectrum = spec;
  }
  for (const auto& r : residual_) h = ad::add(h, r(store, ad::silu(h)));
  if (trace) trace->initial = h;
  for (int l = 0; l < static_cast<int>(mp_.size()); ++l) h = message_pass(store, l, h, batch, geometry);
  return h;
}

}  // namespace tristream
