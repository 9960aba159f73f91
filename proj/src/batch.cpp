#include "tristream/batch.hpp"

#include "tristream/struct_stream.hpp"

#include <stdexcept>

namespace tristream {

BatchEntry make_entry(const AtomicStructure& structure, double cutoff, int max_neighbors) {
  return {structure, build_graph(structure, cutoff, max_neighbors), {}};
}

Batch Batch::assemble(const std::vector<BatchEntry>& entries) {
  if (entries.empty()) throw std::invalid_argument("cannot assemble an empty batch");
  Batch b;
  b.num_structures = static_cast<int>(entries.size());
  int nodes = 0, edges = 0;
  for (const auto& e : entries) {
    e.structure.validate();
    if (e.graph.num_nodes != static_cast<int>(e.structure.size())) {
      throw std::invalid_argument("graph and structure disagree on the number of atoms");
    }
    if (!e.masked.empty() && e.masked.size() != e.structure.size()) {
      throw std::invalid_argument("mask length differs from the number of atoms");
    }
    nodes += static_cast<int>(e.structure.size());
    edges += static_cast<int>(e.graph.size());
  }
  b.num_nodes = nodes;
  b.num_edges = edges;
  b.positions.resize(nodes, 3);
  b.edge_shift.resize(edges, 3);
  b.lattice = ad::Matrix::Zero(b.num_structures, 9);
  b.cutoff = entries.front().graph.cutoff;
  b.max_neighbors = entries.front().graph.max_neighbors;
  std::vector<int> node_structure, centers, neighbors, atom_token;
  node_structure.reserve(static_cast<std::size_t>(nodes));
  centers.reserve(static_cast<std::size_t>(edges));
  neighbors.reserve(static_cast<std::size_t>(edges));
  b.node_offset.push_back(0);
  b.edge_offset.push_back(0);

  int node_at = 0, edge_at = 0;
  for (std::size_t s = 0; s < entries.size(); ++s) {
    const auto& e = entries[s];
    const int n = static_cast<int>(e.structure.size());
    b.positions.middleRows(node_at, n) = e.structure.positions;
    std::vector<bool> masked = e.masked.empty() ? std::vector<bool>(static_cast<std::size_t>(n), false) : e.masked;
    const int token_base = static_cast<int>(b.tokens.size());
    const Composition comp = compress_composition(e.structure.species, masked);
    b.tokens.append(comp, static_cast<int>(s));
    for (int i = 0; i < n; ++i) {
      const int z = e.structure.species[static_cast<std::size_t>(i)];
      const bool m = masked[static_cast<std::size_t>(i)];
      b.species.push_back(z);
      b.masked.push_back(m);
      b.node_types.push_back(m ? 0 : z);
      node_structure.push_back(static_cast<int>(s));
      atom_token.push_back(token_base + comp.token_of(m ? 0 : z));
    }
    const auto offsets = shift_offsets(e.structure, e.graph);
    for (std::size_t k = 0; k < e.graph.size(); ++k) {
      centers.push_back(node_at + e.graph.edges[k].center);
      neighbors.push_back(node_at + e.graph.edges[k].neighbor);
    }
    b.edge_shift.middleRows(edge_at, static_cast<ad::Index>(e.graph.size())) = offsets;
    const auto lat = lattice_features(e.structure.cell, e.structure.periodic, n);
    for (int k = 0; k < 9; ++k) b.lattice(static_cast<ad::Index>(s), k) = lat[static_cast<std::size_t>(k)];
    b.periodic.push_back(e.structure.periodic);
    b.cells.push_back(e.structure.cell);
    b.atom_counts.push_back(n);
    node_at += n;
    edge_at += static_cast<int>(e.graph.size());
    b.node_offset.push_back(node_at);
    b.edge_offset.push_back(edge_at);
  }
  b.node_types_index = ad::make_index(b.node_types);
  b.node_structure = ad::make_index(std::move(node_structure));
  b.edge_center = ad::make_index(std::move(centers));
  b.edge_neighbor = ad::make_index(std::move(neighbors));
  b.atom_token = ad::make_index(std::move(atom_token));
  return b;
}

Batch Batch::assemble(const std::vector<const AtomicStructure*>& structures, double cutoff, int max_neighbors) {
  std::vector<BatchEntry> entries;
  entries.reserve(structures.size());
  for (const auto* s : structures) entries.push_back(make_entry(*s, cutoff, max_neighbors));
  return assemble(entries);
}

EdgeGeometry edge_geometry(const ad::Var& positions, const Batch& batch, const RadialBasisSpec& radial,
                           const CutoffBank& bank, int lmax) {
  if (positions.rows() != batch.num_nodes || positions.cols() != 3) {
    throw std::invalid_argument("positions do not match the batch");
  }
  EdgeGeometry g;
  g.vectors = ad::add(ad::sub(ad::gather_rows(positions, batch.edge_neighbor), ad::gather_rows(positions, batch.edge_center)),
                      ad::constant(batch.edge_shift));
  g.distances = ad::sqrt(ad::sum_cols(ad::square(g.vectors)));
  g.unit = ad::div(g.vectors, g.distances);
  g.radial = ad_basis::multiscale(g.distances, radial, bank);
  g.envelope = ad_basis::cutoff(g.distances, radial.r_cut);
  if (lmax >= 0) g.harmonics = ad_basis::sph_harm(g.unit, lmax);
  return g;
}

RebuiltGeometry rebuild_geometry(const ad::Var& positions, const Batch& batch, const RadialBasisSpec& radial,
                                 const CutoffBank& bank, int lmax) {
  if (positions.rows() != batch.num_nodes || positions.cols() != 3) {
    throw std::invalid_argument("positions do not match the batch");
  }
  std::vector<BatchEntry> entries;
  for (int s = 0; s < batch.num_structures; ++s) {
    const int lo = batch.node_offset[static_cast<std::size_t>(s)];
    const int n = batch.atom_counts[static_cast<std::size_t>(s)];
    BatchEntry e;
    e.structure.species.assign(batch.species.begin() + lo, batch.species.begin() + lo + n);
    e.structure.positions = positions.value().middleRows(lo, n);
    e.structure.cell = batch.cells[static_cast<std::size_t>(s)];
    e.structure.periodic = batch.periodic[static_cast<std::size_t>(s)];
    e.masked.assign(batch.masked.begin() + lo, batch.masked.begin() + lo + n);
    e.graph = build_graph(e.structure, batch.cutoff, batch.max_neighbors);
    entries.push_back(std::move(e));
  }
  RebuiltGeometry r{Batch::assemble(entries), {}};
  r.geometry = edge_geometry(ad::opaque(positions, "neighbor graph reconstruction"), r.batch, radial, bank, lmax);
  return r;
}

}  // namespace tristream
