#include "tristream/synthetic.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace tristream::synthetic {

namespace {

constexpr int kAllNeighbors = 1 << 20;

const PairPotential::Species& lookup(const PairPotential& p, int z) {
  auto it = p.species.find(z);
  if (it == p.species.end()) throw DomainError("pair potential has no parameters for Z=" + std::to_string(z));
  return it->second;
}

// Pair energy and its radial derivative.
std::pair<double, double> pair_terms(const PairPotential& p, int a, int b, double r) {
  if (r >= p.r_cut) return {0.0, 0.0};
  const auto& A = lookup(p, a);
  const auto& B = lookup(p, b);
  const double eps = std::sqrt(A.epsilon * B.epsilon);
  const double sig = 0.5 * (A.sigma + B.sigma);
  const double s6 = std::pow(sig / r, 6);
  const double v = 4.0 * eps * (s6 * s6 - s6);
  const double dv = 4.0 * eps * (-12.0 * s6 * s6 + 6.0 * s6) / r;
  if (r < p.r_on) return {v, dv};
  const double w = p.r_cut - p.r_on;
  const double x = std::numbers::pi * (r - p.r_on) / w;
  const double sw = 0.5 * (1.0 + std::cos(x));
  const double dsw = -0.5 * std::sin(x) * std::numbers::pi / w;
  return {v * sw, dv * sw + v * dsw};
}

Mat3 haar_rotation(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace

double PairPotential::pair(int a, int b, double r) const { return pair_terms(*this, a, b, r).first; }

double PairPotential::energy(const AtomicStructure& s) const {
  const NeighborGraph g = build_graph(s, r_cut, kAllNeighbors);
  double e = 0.0;
  for (int z : s.species) e += lookup(*this, z).reference;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto& edge = g.edges[k];
    e += 0.5 * pair_terms(*this, s.species[static_cast<std::size_t>(edge.center)],
                          s.species[static_cast<std::size_t>(edge.neighbor)], g.distances(static_cast<Eigen::Index>(k)))
                   .first;
  }
  return e;
}

PerAtom PairPotential::forces(const AtomicStructure& s) const {
  const NeighborGraph g = build_graph(s, r_cut, kAllNeighbors);
  PerAtom f = PerAtom::Zero(static_cast<Eigen::Index>(s.size()), 3);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto& edge = g.edges[k];
    const double r = g.distances(static_cast<Eigen::Index>(k));
    const double dphi = pair_terms(*this, s.species[static_cast<std::size_t>(edge.center)],
                                   s.species[static_cast<std::size_t>(edge.neighbor)], r)
                            .second;
    const Eigen::RowVector3d u = g.vectors.row(static_cast<Eigen::Index>(k)) / r;
    // Each unordered pair appears once from each end; half from each.
    f.row(edge.center) += 0.5 * dphi * u;
    f.row(edge.neighbor) -= 0.5 * dphi * u;
  }
  return f;
}

PairPotential random_pair_potential(Rng& rng, const std::vector<int>& elements) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PairPotential p;
  for (int z : elements) {
    p.species[z] = {0.02 + 0.38 * u(rng), 2.0 + 0.6 * u(rng), -3.0 + 2.0 * u(rng)};
  }
  return p;
}

std::vector<AtomicStructure> pair_potential_dataset(Rng& rng, const PairDatasetOptions& o, PairPotential* out) {
  if (o.count < 0 || o.min_atoms < 2 || o.max_atoms < o.min_atoms || o.elements.empty() ||
      o.max_species_per_structure < 1) {
    throw std::invalid_argument("bad pair dataset options");
  }
  const PairPotential pot = random_pair_potential(rng, o.elements);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<AtomicStructure> data;
  data.reserve(static_cast<std::size_t>(o.count));
  while (static_cast<int>(data.size()) < o.count) {
    AtomicStructure s;
    const bool periodic = u(rng) < o.periodic_fraction;
    const int n = std::uniform_int_distribution<int>(periodic ? std::max(2, o.min_atoms / 2) : o.min_atoms,
                                                     periodic ? std::max(2, o.max_atoms / 2) : o.max_atoms)(rng);
    const int kinds = std::uniform_int_distribution<int>(
        1, std::min<int>(o.max_species_per_structure, static_cast<int>(o.elements.size())))(rng);
    std::vector<int> pool = o.elements;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(kinds));
    for (int i = 0; i < n; ++i) s.species.push_back(pool[static_cast<std::size_t>(rng() % pool.size())]);

    // About 14 A^3 per atom; dense enough that most pairs interact.
    const double side = std::cbrt(14.0 * n);
    s.positions.resize(n, 3);
    if (periodic) {
      Mat3 cell = Mat3::Identity() * side;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          if (a != b) cell(a, b) = 0.1 * side * (u(rng) - 0.5);
      s.cell = cell;
      s.periodic = true;
    }
    int placed = 0, tries = 0;
    while (placed < n && tries < 2000) {
      ++tries;
      Eigen::RowVector3d x(u(rng), u(rng), u(rng));
      x = periodic ? Eigen::RowVector3d(x * *s.cell) : Eigen::RowVector3d(x * side);
      s.positions.row(placed) = x;
      AtomicStructure partial;
      partial.species.assign(s.species.begin(), s.species.begin() + placed + 1);
      partial.positions = s.positions.topRows(placed + 1);
      partial.cell = s.cell;
      partial.periodic = s.periodic;
      const NeighborGraph g = build_graph(partial, 3.0, kAllNeighbors);
      bool ok = true;
      for (std::size_t k = 0; k < g.size() && ok; ++k) {
        const auto& e = g.edges[k];
        const double sig = 0.5 * (lookup(pot, partial.species[static_cast<std::size_t>(e.center)]).sigma +
                                  lookup(pot, partial.species[static_cast<std::size_t>(e.neighbor)]).sigma);
        ok = g.distances(static_cast<Eigen::Index>(k)) >= 0.95 * sig;
      }
      if (ok) ++placed;
    }
    if (placed < n) continue;
    s.labels[labels::kEnergy] = pot.energy(s);
    s.labels[labels::kForces] = pot.forces(s);
    data.push_back(std::move(s));
  }
  if (out) *out = pot;
  return data;
}

std::vector<AtomicStructure> retrieval_corpus(Rng& rng, const RetrievalCorpusOptions& o) {
  if (o.composition_families < 1 || o.geometry_families < 1 || o.atoms < 3) {
    throw std::invalid_argument("bad retrieval corpus options");
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Composition families: distinct element sets of 2 or 3 elements, counts summing to `atoms`.
  std::vector<std::vector<int>> compositions;
  std::set<std::set<int>> seen;
  while (static_cast<int>(compositions.size()) < o.composition_families) {
    const int kinds = 2 + static_cast<int>(rng() % 2);
    std::set<int> elems;
    while (static_cast<int>(elems.size()) < kinds) elems.insert(1 + static_cast<int>(rng() % 40));
    if (!seen.insert(elems).second) continue;
    std::vector<int> counts(static_cast<std::size_t>(kinds), 1);
    for (int r = kinds; r < o.atoms; ++r) ++counts[rng() % counts.size()];
    std::vector<int> multiset;
    std::size_t k = 0;
    for (int z : elems) {
      for (int c = 0; c < counts[k]; ++c) multiset.push_back(z);
      ++k;
    }
    compositions.push_back(std::move(multiset));
  }

  // Geometry families: fixed point clouds of distinct density and shape.
  std::vector<Positions> templates;
  for (int g = 0; g < o.geometry_families; ++g) {
    const double spacing = 1.8 + 1.4 * g / std::max(1, o.geometry_families - 1);
    const double aspect = 1.0 + 1.5 * u(rng);
    Positions t(o.atoms, 3);
    int placed = 0;
    while (placed < o.atoms) {
      const Eigen::RowVector3d x(u(rng) * aspect, u(rng), u(rng) / aspect);
      const Eigen::RowVector3d p = x * spacing * std::cbrt(static_cast<double>(o.atoms));
      bool ok = true;
      for (int j = 0; j < placed && ok; ++j) ok = (t.row(j) - p).norm() >= 0.8 * spacing;
      if (ok) t.row(placed++) = p;
    }
    templates.push_back(t);
  }

  std::vector<AtomicStructure> corpus;
  for (int c = 0; c < o.composition_families; ++c) {
    for (int g = 0; g < o.geometry_families; ++g) {
      AtomicStructure s;
      s.species = compositions[static_cast<std::size_t>(c)];
      std::shuffle(s.species.begin(), s.species.end(), rng);
      const Mat3 r = haar_rotation(rng);
      s.positions = templates[static_cast<std::size_t>(g)];
      for (Eigen::Index i = 0; i < s.positions.size(); ++i) s.positions.data()[i] += o.jitter * normal(rng);
      s.positions = (s.positions * r.transpose()).eval();
      std::string set_label;
      for (int z : element_set(s)) set_label += (set_label.empty() ? "" : ",") + std::to_string(z);
      s.labels["composition_family"] = static_cast<double>(c);
      s.labels["geometry_family"] = static_cast<double>(g);
      s.labels["element_set"] = set_label;
      corpus.push_back(std::move(s));
    }
  }
  return corpus;
}

}  // namespace tristream::synthetic
