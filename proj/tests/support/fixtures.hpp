#pragma once

#include "tristream/model.hpp"
#include "tristream/structure.hpp"

#include <Eigen/Geometry>

#include <random>
#include <vector>

namespace tristream::testing {

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

// Atoms placed with a minimum separation so that no distance is degenerate.
inline AtomicStructure random_cluster(std::mt19937_64& rng, int n, double box, int zmax = 10,
                                      double min_sep = 0.9) {
  std::uniform_real_distribution<double> u(0.0, box);
  std::uniform_int_distribution<int> z(1, zmax);
  AtomicStructure s;
  s.positions.resize(n, 3);
  int placed = 0;
  while (placed < n) {
    const Eigen::RowVector3d x(u(rng), u(rng), u(rng));
    bool ok = true;
    for (int j = 0; j < placed; ++j) ok = ok && (s.positions.row(j) - x).norm() >= min_sep;
    if (!ok) continue;
    s.positions.row(placed++) = x;
    s.species.push_back(z(rng));
  }
  return s;
}

inline AtomicStructure random_crystal(std::mt19937_64& rng, int n, double a, int zmax = 10) {
  AtomicStructure s = random_cluster(rng, n, a, zmax, 0.8);
  std::uniform_real_distribution<double> u(-0.15, 0.15);
  Mat3 cell = Mat3::Identity() * a;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) cell(i, j) = u(rng) * a;
  s.cell = cell;
  s.periodic = true;
  return s;
}

// Narrow model used by the correctness tests; same architecture, small widths.
inline ModelConfig small_config() {
  ModelConfig c;
  c.comp.d_model = 8;
  c.comp.layers = 2;
  c.comp.heads = 2;
  c.comp.d_ff = 16;
  c.comp.dropout = 0.0;
  c.structure.d_model = 8;
  c.structure.radial_count = 4;
  c.structure.mixed_channels = 3;
  c.structure.lmax = 2;
  c.structure.mlp_layers = 2;
  c.structure.mp_layers = 1;
  c.structure.r_cut = 4.0;
  c.interaction.d_model = 8;
  c.interaction.layers = 2;
  c.heads.energy_hidden = {8, 8};
  c.heads.pair_hidden = {8};
  c.heads.mask_hidden = {8};
  c.graph_cutoff = 4.0;
  c.max_neighbors = 64;
  return c;
}

inline Batch batch_of(const std::vector<AtomicStructure>& structures, const ModelConfig& c) {
  std::vector<const AtomicStructure*> ptrs;
  for (const auto& s : structures) ptrs.push_back(&s);
  return Batch::assemble(ptrs, c.graph_cutoff, c.max_neighbors);
}

inline Batch batch_of(const AtomicStructure& s, const ModelConfig& c) {
  return Batch::assemble(std::vector<const AtomicStructure*>{&s}, c.graph_cutoff, c.max_neighbors);
}

}  // namespace tristream::testing
