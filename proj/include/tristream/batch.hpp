#pragma once

#include "tristream/autodiff.hpp"
#include "tristream/basis.hpp"
#include "tristream/comp_stream.hpp"
#include "tristream/structure.hpp"

#include <optional>
#include <vector>

namespace tristream {

// One structure as the model sees it: geometry (possibly corrupted), a fixed
// neighbor graph, and the atoms hidden from the species pathways.
struct BatchEntry {
  AtomicStructure structure;
  NeighborGraph graph;
  std::vector<bool> masked;  // empty means nothing masked
};

BatchEntry make_entry(const AtomicStructure& structure, double cutoff, int max_neighbors);

// Disjoint union of several structures. Node and edge indices are offset per
// structure; no edge ever joins two structures.
struct Batch {
  int num_structures = 0;
  int num_nodes = 0;
  int num_edges = 0;

  ad::Matrix positions;  // N x 3
  std::vector<int> species;
  std::vector<bool> masked;
  std::vector<int> node_types;  // species, or 0 where masked
  ad::IndexList node_types_index;
  ad::IndexList node_structure;
  std::vector<int> node_offset;   // S + 1 entries
  std::vector<int> atom_counts;   // per structure

  ad::IndexList edge_center;
  ad::IndexList edge_neighbor;
  ad::Matrix edge_shift;  // E x 3 Cartesian image offsets
  std::vector<int> edge_offset;  // S + 1 entries

  CompTokens tokens;
  ad::IndexList atom_token;  // node -> token row

  ad::Matrix lattice;  // S x 9, zero rows for non-periodic structures
  std::vector<bool> periodic;
  std::vector<std::optional<Mat3>> cells;
  double cutoff = 0.0;
  int max_neighbors = 0;

  static Batch assemble(const std::vector<BatchEntry>& entries);
  static Batch assemble(const std::vector<const AtomicStructure*>& structures, double cutoff, int max_neighbors);
};

// Per-edge geometric quantities recorded against a positions Var, so that
// derivatives with respect to positions flow through every stream.
struct EdgeGeometry {
  ad::Var vectors;    // E x 3, center -> neighbor
  ad::Var distances;  // E x 1
  ad::Var unit;       // E x 3
  ad::Var radial;     // E x (K * S) multi-scale features
  ad::Var envelope;   // E x 1 cosine cutoff at r_cut
  ad::Var harmonics;  // E x (lmax + 1)^2, only when requested
};

EdgeGeometry edge_geometry(const ad::Var& positions, const Batch& batch, const RadialBasisSpec& radial,
                           const CutoffBank& bank, int lmax);

// Neighbor graph rebuilt from the current values of `positions`. The graph is
// piecewise constant in the positions, so the returned geometry refuses to be
// differentiated; training always uses the fixed graph of edge_geometry.
struct RebuiltGeometry {
  Batch batch;
  EdgeGeometry geometry;
};
RebuiltGeometry rebuild_geometry(const ad::Var& positions, const Batch& batch, const RadialBasisSpec& radial,
                                 const CutoffBank& bank, int lmax);

}  // namespace tristream
