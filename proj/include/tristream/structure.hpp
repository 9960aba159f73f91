#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace tristream {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using PerAtom = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

constexpr int kMaxAtomicNumber = 100;

// Scalar labels are doubles, per-atom arrays are N x k matrices, and labels this
// library does not interpret are kept as their raw text.
using LabelValue = std::variant<double, std::string, PerAtom>;

namespace labels {
inline constexpr const char* kEnergy = "energy";
inline constexpr const char* kForces = "forces";
inline constexpr const char* kCrystalSystem = "crystal_system";
inline constexpr const char* kSpaceGroup = "space_group";
inline constexpr const char* kFormationEnergy = "formation_energy";
}  // namespace labels

struct AtomicStructure {
  std::vector<int> species;
  Positions positions;
  std::optional<Mat3> cell;  // rows are lattice vectors, Angstrom
  bool periodic = false;
  std::map<std::string, LabelValue> labels;

  std::size_t size() const { return species.size(); }

  // Throws InputError when an invariant does not hold.
  void validate() const;

  std::optional<double> scalar_label(const std::string& key) const;
  std::optional<PerAtom> array_label(const std::string& key) const;
  // Integer-valued label stored either numerically or as text.
  std::optional<long> integer_label(const std::string& key) const;

  std::optional<double> energy() const { return scalar_label(labels::kEnergy); }
  std::optional<PerAtom> forces() const { return array_label(labels::kForces); }
};

struct Edge {
  int center;    // receiving node i
  int neighbor;  // sending node j
  Eigen::Vector3i shift;
};

// Directed radius graph. vectors(e) = x_j - x_i + shift * cell points from the
// center to the neighbor image.
struct NeighborGraph {
  std::vector<Edge> edges;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> vectors;
  Eigen::VectorXd distances;
  double cutoff = 0.0;
  int max_neighbors = 0;
  int num_nodes = 0;

  std::size_t size() const { return edges.size(); }
  std::vector<int> in_degree() const;
};

// Cartesian offset shift * cell for every edge.
Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> shift_offsets(
    const AtomicStructure& structure, const NeighborGraph& graph);

NeighborGraph build_graph(const AtomicStructure& structure, double cutoff, int max_neighbors);

struct CompositionToken {
  int z;      // 0 denotes the mask token
  int count;  // >= 1
  bool operator==(const CompositionToken&) const = default;
};

struct Composition {
  std::vector<CompositionToken> tokens;  // ascending z

  std::size_t size() const { return tokens.size(); }
  int total() const;
  int token_of(int z) const;  // index of element z, -1 when absent
  bool operator==(const Composition&) const = default;
};

Composition compress_composition(const AtomicStructure& structure);
// Masked atoms are grouped under the mask token (z = 0).
Composition compress_composition(const std::vector<int>& species, const std::vector<bool>& masked);

// Sorted distinct atomic numbers.
std::vector<int> element_set(const AtomicStructure& structure);
// Most frequent element, ties resolved toward the smaller atomic number.
int majority_element(const AtomicStructure& structure);
// Mean over atoms of the distance to the closest other atom or periodic image.
double mean_nearest_neighbor_distance(const AtomicStructure& structure);

// Applies R to positions and lattice rows.
AtomicStructure rotated(const AtomicStructure& structure, const Mat3& rotation);
AtomicStructure translated(const AtomicStructure& structure, const Vec3& offset);

}  // namespace tristream
