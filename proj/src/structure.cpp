#include "tristream/structure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tristream {

void AtomicStructure::validate() const {
  if (species.empty()) throw InputError("structure has no atoms");
  if (static_cast<std::size_t>(positions.rows()) != species.size()) {
    throw InputError("positions and species have different lengths");
  }
  for (std::size_t i = 0; i < species.size(); ++i) {
    if (species[i] < 1 || species[i] > kMaxAtomicNumber) {
      std::ostringstream os;
      os << "atom " << i << " has atomic number " << species[i] << " outside [1, "
         << kMaxAtomicNumber << "]";
      throw InputError(os.str());
    }
  }
  if (!positions.allFinite()) throw InputError("non-finite atomic position");
  if (periodic) {
    if (!cell) throw InputError("periodic structure without a cell");
    if (!cell->allFinite() || std::abs(cell->determinant()) <= 1e-8) {
      throw InputError("periodic structure with a singular cell");
    }
  }
  for (const auto& [key, value] : labels) {
    if (const auto* arr = std::get_if<PerAtom>(&value)) {
      if (static_cast<std::size_t>(arr->rows()) != species.size()) {
        throw InputError("per-atom label '" + key + "' has the wrong number of rows");
      }
    }
  }
}

std::optional<double> AtomicStructure::scalar_label(const std::string& key) const {
  auto it = labels.find(key);
  if (it == labels.end()) return std::nullopt;
  if (const auto* d = std::get_if<double>(&it->second)) return *d;
  if (const auto* s = std::get_if<std::string>(&it->second)) {
    try {
      std::size_t used = 0;
      const double v = std::stod(*s, &used);
      if (used == s->size()) return v;
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

std::optional<PerAtom> AtomicStructure::array_label(const std::string& key) const {
  auto it = labels.find(key);
  if (it == labels.end()) return std::nullopt;
  if (const auto* m = std::get_if<PerAtom>(&it->second)) return *m;
  return std::nullopt;
}

std::optional<long> AtomicStructure::integer_label(const std::string& key) const {
  auto v = scalar_label(key);
  if (!v || std::floor(*v) != *v) return std::nullopt;
  return static_cast<long>(*v);
}

std::vector<int> NeighborGraph::in_degree() const {
  std::vector<int> deg(static_cast<std::size_t>(num_nodes), 0);
  for (const auto& e : edges) ++deg[static_cast<std::size_t>(e.center)];
  return deg;
}

Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> shift_offsets(
    const AtomicStructure& structure, const NeighborGraph& graph) {
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> out(
      static_cast<Eigen::Index>(graph.size()), 3);
  for (std::size_t e = 0; e < graph.size(); ++e) {
    const auto& s = graph.edges[e].shift;
    if (structure.periodic && (s.array() != 0).any()) {
      out.row(static_cast<Eigen::Index>(e)) = s.cast<double>().transpose() * (*structure.cell);
    } else {
      out.row(static_cast<Eigen::Index>(e)).setZero();
    }
  }
  return out;
}

namespace {

struct Candidate {
  double distance;
  int neighbor;
  Eigen::Vector3i shift;
  Vec3 vector;
};

bool shift_less(const Eigen::Vector3i& a, const Eigen::Vector3i& b) {
  return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
}

}  // namespace

NeighborGraph build_graph(const AtomicStructure& structure, double cutoff, int max_neighbors) {
  if (!(cutoff > 0.0)) throw InputError("cutoff must be positive");
  if (max_neighbors < 1) throw InputError("max_neighbors must be at least 1");
  structure.validate();

  const int n = static_cast<int>(structure.size());
  NeighborGraph graph;
  graph.cutoff = cutoff;
  graph.max_neighbors = max_neighbors;
  graph.num_nodes = n;

  Mat3 cell = Mat3::Zero();
  Mat3 inv = Mat3::Zero();
  Positions frac;
  Vec3 reach = Vec3::Zero();
  if (structure.periodic) {
    cell = *structure.cell;
    inv = cell.inverse();
    frac = structure.positions * inv;
    // |(df + n)_a| <= cutoff * |column a of cell^-1| bounds every image in the sphere.
    for (int a = 0; a < 3; ++a) reach[a] = cutoff * inv.col(a).norm();
  }

  std::vector<Candidate> cands;
  for (int i = 0; i < n; ++i) {
    cands.clear();
    const Vec3 xi = structure.positions.row(i).transpose();
    for (int j = 0; j < n; ++j) {
      const Vec3 xj = structure.positions.row(j).transpose();
      if (!structure.periodic) {
        if (j == i) continue;
        const Vec3 v = xj - xi;
        const double d = v.norm();
        if (d > 0.0 && d <= cutoff) cands.push_back({d, j, Eigen::Vector3i::Zero(), v});
        continue;
      }
      const Vec3 df = (frac.row(j) - frac.row(i)).transpose();
      Eigen::Vector3i lo, hi;
      for (int a = 0; a < 3; ++a) {
        lo[a] = static_cast<int>(std::ceil(-df[a] - reach[a]));
        hi[a] = static_cast<int>(std::floor(-df[a] + reach[a]));
      }
      for (int sa = lo[0]; sa <= hi[0]; ++sa) {
        for (int sb = lo[1]; sb <= hi[1]; ++sb) {
          for (int sc = lo[2]; sc <= hi[2]; ++sc) {
            const Eigen::Vector3i s(sa, sb, sc);
            if (j == i && sa == 0 && sb == 0 && sc == 0) continue;
            const Vec3 v = xj - xi + (s.cast<double>().transpose() * cell).transpose();
            const double d = v.norm();
            if (d > 0.0 && d <= cutoff) cands.push_back({d, j, s, v});
          }
        }
      }
    }
    if (static_cast<int>(cands.size()) > max_neighbors) {
      std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        if (a.neighbor != b.neighbor) return a.neighbor < b.neighbor;
        return shift_less(a.shift, b.shift);
      });
      cands.resize(static_cast<std::size_t>(max_neighbors));
    }
    // Stored order depends only on (neighbor, shift) so it survives rigid motions.
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.neighbor != b.neighbor) return a.neighbor < b.neighbor;
      return shift_less(a.shift, b.shift);
    });
    for (const auto& c : cands) graph.edges.push_back({i, c.neighbor, c.shift});
    // Vectors are recomputed below in a second pass to keep storage contiguous.
  }

  const auto ne = static_cast<Eigen::Index>(graph.edges.size());
  graph.vectors.resize(ne, 3);
  graph.distances.resize(ne);
  for (Eigen::Index e = 0; e < ne; ++e) {
    const auto& ed = graph.edges[static_cast<std::size_t>(e)];
    Vec3 v = (structure.positions.row(ed.neighbor) - structure.positions.row(ed.center)).transpose();
    if (structure.periodic) v += (ed.shift.cast<double>().transpose() * cell).transpose();
    graph.vectors.row(e) = v.transpose();
    graph.distances[e] = v.norm();
  }
  return graph;
}

int Composition::total() const {
  int t = 0;
  for (const auto& tok : tokens) t += tok.count;
  return t;
}

int Composition::token_of(int z) const {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t].z == z) return static_cast<int>(t);
  }
  return -1;
}

Composition compress_composition(const std::vector<int>& species, const std::vector<bool>& masked) {
  std::map<int, int> counts;
  for (std::size_t i = 0; i < species.size(); ++i) {
    const bool m = i < masked.size() && masked[i];
    ++counts[m ? 0 : species[i]];
  }
  Composition c;
  for (const auto& [z, k] : counts) c.tokens.push_back({z, k});
  return c;
}

Composition compress_composition(const AtomicStructure& structure) {
  structure.validate();
  return compress_composition(structure.species, {});
}

std::vector<int> element_set(const AtomicStructure& structure) {
  std::vector<int> s = structure.species;
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

int majority_element(const AtomicStructure& structure) {
  const Composition c = compress_composition(structure.species, {});
  int best = -1, best_count = 0;
  for (const auto& t : c.tokens) {
    if (t.count > best_count) {
      best = t.z;
      best_count = t.count;
    }
  }
  return best;
}

double mean_nearest_neighbor_distance(const AtomicStructure& structure) {
  structure.validate();
  const int n = static_cast<int>(structure.size());
  double radius = 4.0;
  for (int attempt = 0; attempt < 12; ++attempt, radius *= 2.0) {
    const NeighborGraph g = build_graph(structure, radius, std::numeric_limits<int>::max());
    std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (std::size_t e = 0; e < g.size(); ++e) {
      auto& b = best[static_cast<std::size_t>(g.edges[e].center)];
      b = std::min(b, g.distances[static_cast<Eigen::Index>(e)]);
    }
    const bool all = std::all_of(best.begin(), best.end(), [](double d) { return std::isfinite(d); });
    if (all || (!structure.periodic && n == 1)) {
      double s = 0.0;
      int counted = 0;
      for (double d : best) {
        if (std::isfinite(d)) {
          s += d;
          ++counted;
        }
      }
      return counted ? s / counted : 0.0;
    }
    if (!structure.periodic) radius *= 1e3;  // isolated clusters: widen quickly
  }
  return 0.0;
}

AtomicStructure rotated(const AtomicStructure& structure, const Mat3& rotation) {
  AtomicStructure out = structure;
  out.positions = structure.positions * rotation.transpose();
  if (out.cell) out.cell = (*structure.cell) * rotation.transpose();
  if (auto f = structure.forces()) out.labels[labels::kForces] = PerAtom((*f) * rotation.transpose());
  return out;
}

AtomicStructure translated(const AtomicStructure& structure, const Vec3& offset) {
  AtomicStructure out = structure;
  out.positions.rowwise() += offset.transpose();
  return out;
}

}  // namespace tristream
