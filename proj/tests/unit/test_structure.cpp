#include "tristream/structure.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <tuple>

using namespace tristream;

namespace {

AtomicStructure cluster(std::vector<int> species, const std::vector<Vec3>& xs) {
  AtomicStructure s;
  s.species = std::move(species);
  s.positions.resize(static_cast<Eigen::Index>(xs.size()), 3);
  for (std::size_t i = 0; i < xs.size(); ++i) s.positions.row(static_cast<Eigen::Index>(i)) = xs[i].transpose();
  return s;
}

AtomicStructure random_cluster(std::mt19937_64& rng, int n, double box) {
  std::uniform_real_distribution<double> u(0.0, box);
  std::uniform_int_distribution<int> z(1, 20);
  std::vector<int> sp;
  std::vector<Vec3> xs;
  for (int i = 0; i < n; ++i) {
    sp.push_back(z(rng));
    xs.emplace_back(u(rng), u(rng), u(rng));
  }
  return cluster(sp, xs);
}

using EdgeKey = std::tuple<int, int, int, int, int>;

std::set<EdgeKey> edge_keys(const NeighborGraph& g) {
  std::set<EdgeKey> out;
  for (const auto& e : g.edges) out.emplace(e.center, e.neighbor, e.shift[0], e.shift[1], e.shift[2]);
  return out;
}

}  // namespace

TEST(BuildGraph, DimerHasTwoDirectedEdges) {
  const auto s = cluster({1, 1}, {Vec3(0, 0, 0), Vec3(1, 0, 0)});
  const auto g = build_graph(s, 6.0, 120);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_DOUBLE_EQ(g.distances[0], 1.0);
  EXPECT_DOUBLE_EQ(g.distances[1], 1.0);
}

TEST(BuildGraph, SingleAtomNonPeriodicHasNoEdges) {
  const auto s = cluster({6}, {Vec3(0.3, 0.1, -2.0)});
  EXPECT_EQ(build_graph(s, 6.0, 120).size(), 0u);
}

TEST(BuildGraph, SingleAtomCubicCellMatchesBruteForceImages) {
  auto s = cluster({14}, {Vec3(0.2, 0.4, 0.1)});
  s.periodic = true;
  s.cell = Mat3::Identity() * 2.0;
  const auto g = build_graph(s, 2.5, 120);
  // Brute force over shifts in [-2, 2]^3.
  int expected = 0;
  for (int a = -2; a <= 2; ++a)
    for (int b = -2; b <= 2; ++b)
      for (int c = -2; c <= 2; ++c) {
        if (a == 0 && b == 0 && c == 0) continue;
        const double d = 2.0 * std::sqrt(double(a * a + b * b + c * c));
        if (d <= 2.5) ++expected;
      }
  EXPECT_EQ(expected, 6);
  ASSERT_EQ(static_cast<int>(g.size()), expected);
  for (Eigen::Index e = 0; e < g.distances.size(); ++e) EXPECT_NEAR(g.distances[e], 2.0, 1e-12);
}

TEST(BuildGraph, PeriodicEnumerationMatchesBruteForceOnSkewedCells) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int trial = 0; trial < 10; ++trial) {
    AtomicStructure s = random_cluster(rng, 3, 3.0);
    Mat3 cell = Mat3::Identity() * 3.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) cell(i, j) = u(rng);
    s.cell = cell;
    s.periodic = true;
    const double rc = 4.0;
    const auto g = build_graph(s, rc, 100000);
    std::set<EdgeKey> brute;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int a = -6; a <= 6; ++a)
          for (int b = -6; b <= 6; ++b)
            for (int c = -6; c <= 6; ++c) {
              if (i == j && a == 0 && b == 0 && c == 0) continue;
              const Vec3 v = (s.positions.row(j) - s.positions.row(i)).transpose() +
                             (Eigen::RowVector3d(a, b, c) * cell).transpose();
              if (v.norm() <= rc) brute.emplace(i, j, a, b, c);
            }
    EXPECT_EQ(edge_keys(g), brute) << "trial " << trial;
  }
}

TEST(BuildGraph, InvariantsHold) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_cluster(rng, 12, 5.0);
    if (trial % 2) {
      s.periodic = true;
      s.cell = Mat3::Identity() * 5.0;
    }
    const auto g = build_graph(s, 3.0, 5);
    const auto off = shift_offsets(s, g);
    for (std::size_t e = 0; e < g.size(); ++e) {
      const auto ei = static_cast<Eigen::Index>(e);
      const auto& ed = g.edges[e];
      EXPECT_GT(g.distances[ei], 0.0);
      EXPECT_LE(g.distances[ei], 3.0);
      const Eigen::RowVector3d v = s.positions.row(ed.neighbor) - s.positions.row(ed.center) + off.row(ei);
      EXPECT_LT((v - g.vectors.row(ei)).norm(), 1e-12);
      EXPECT_FALSE(ed.center == ed.neighbor && ed.shift.isZero());
      if (!s.periodic) {
        EXPECT_TRUE(ed.shift.isZero());
      }
    }
    for (int d : g.in_degree()) EXPECT_LE(d, 5);
  }
}

TEST(BuildGraph, TruncationKeepsNearestWithDeterministicTies) {
  // Center at origin; four neighbors on the axes at equal distance and one farther.
  const auto s = cluster({1, 1, 1, 1, 1, 1},
                         {Vec3(0, 0, 0), Vec3(0, 0, 1), Vec3(0, 1, 0), Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 0, 1.5)});
  const auto g = build_graph(s, 6.0, 2);
  std::vector<int> nbrs;
  for (const auto& e : g.edges)
    if (e.center == 0) nbrs.push_back(e.neighbor);
  EXPECT_EQ(nbrs, (std::vector<int>{1, 2}));
}

TEST(BuildGraph, SymmetricForNonPeriodicBelowSaturation) {
  std::mt19937_64 rng(23);
  const auto s = random_cluster(rng, 15, 4.0);
  const auto keys = edge_keys(build_graph(s, 2.5, 1000));
  for (const auto& [i, j, a, b, c] : keys) EXPECT_TRUE(keys.count({j, i, 0, 0, 0}));
}

TEST(BuildGraph, TranslationInvariantForClusters) {
  std::mt19937_64 rng(24);
  const auto s = random_cluster(rng, 10, 4.0);
  const auto g1 = build_graph(s, 3.0, 1000);
  const auto g2 = build_graph(translated(s, Vec3(10.3, -7.1, 2.2)), 3.0, 1000);
  EXPECT_EQ(edge_keys(g1), edge_keys(g2));
  ASSERT_EQ(g1.distances.size(), g2.distances.size());
  EXPECT_LT((g1.distances - g2.distances).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BuildGraph, RejectsBadInputs) {
  auto s = cluster({1, 1}, {Vec3(0, 0, 0), Vec3(1, 0, 0)});
  EXPECT_THROW(build_graph(s, 0.0, 10), InputError);
  EXPECT_THROW(build_graph(s, 1.0, 0), InputError);
  auto bad = s;
  bad.positions(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(build_graph(bad, 3.0, 10), InputError);
  auto singular = s;
  singular.periodic = true;
  singular.cell = Mat3::Zero();
  EXPECT_THROW(build_graph(singular, 3.0, 10), InputError);
}

TEST(Composition, CompressesToSortedCounts) {
  const auto water = compress_composition(cluster({1, 1, 8}, {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)}));
  ASSERT_EQ(water.size(), 2u);
  EXPECT_EQ(water.tokens[0].z, 1);
  EXPECT_EQ(water.tokens[0].count, 2);
  EXPECT_EQ(water.tokens[1].z, 8);
  EXPECT_EQ(water.tokens[1].count, 1);

  const auto iron = compress_composition(cluster({26}, {Vec3(0, 0, 0)}));
  ASSERT_EQ(iron.size(), 1u);
  EXPECT_EQ(iron.tokens[0].count, 1);

  std::vector<Vec3> xs(5, Vec3::Zero());
  for (int i = 0; i < 5; ++i) xs[static_cast<std::size_t>(i)] = Vec3(i, 0, 0);
  const auto c = compress_composition(cluster({8, 1, 8, 1, 8}, xs));
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.tokens[0].z, 1);
  EXPECT_EQ(c.tokens[0].count, 2);
  EXPECT_EQ(c.tokens[1].z, 8);
  EXPECT_EQ(c.tokens[1].count, 3);
  EXPECT_EQ(c.total(), 5);
}

TEST(Composition, PermutationInvariant) {
  std::mt19937_64 rng(25);
  auto s = random_cluster(rng, 20, 5.0);
  const auto ref = compress_composition(s);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(s.species.begin(), s.species.end(), rng);
    EXPECT_EQ(compress_composition(s), ref);
  }
}

TEST(Composition, MaskedAtomsBecomeMaskToken) {
  const auto c = compress_composition({8, 1, 1}, {true, false, true});
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.tokens[0].z, 0);
  EXPECT_EQ(c.tokens[0].count, 2);
  EXPECT_EQ(c.tokens[1].z, 1);
}

TEST(Descriptors, MajorityAndNearestNeighbor) {
  const auto s = cluster({8, 1, 8, 1}, {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(3, 0, 0), Vec3(5, 0, 0)});
  EXPECT_EQ(majority_element(s), 1);  // tie between 1 and 8 goes to the smaller Z
  EXPECT_EQ(element_set(s), (std::vector<int>{1, 8}));
  EXPECT_NEAR(mean_nearest_neighbor_distance(s), (1.0 + 1.0 + 2.0 + 2.0) / 4.0, 1e-12);

  const auto dimer = cluster({1, 1}, {Vec3(0, 0, 0), Vec3(0, 0, 0.74)});
  EXPECT_NEAR(mean_nearest_neighbor_distance(dimer), 0.74, 1e-12);

  auto single = cluster({29}, {Vec3(0.1, 0.2, 0.3)});
  single.periodic = true;
  single.cell = Mat3::Identity() * 3.61;
  EXPECT_NEAR(mean_nearest_neighbor_distance(single), 3.61, 1e-12);

  auto big = cluster({29}, {Vec3(0, 0, 0)});
  big.periodic = true;
  big.cell = Mat3::Identity() * 9.0;  // first image beyond the initial search radius
  EXPECT_NEAR(mean_nearest_neighbor_distance(big), 9.0, 1e-12);
}

TEST(Structure, ValidationErrors) {
  AtomicStructure empty;
  EXPECT_THROW(empty.validate(), InputError);
  auto s = cluster({0}, {Vec3(0, 0, 0)});
  EXPECT_THROW(s.validate(), InputError);
  s.species[0] = 101;
  EXPECT_THROW(s.validate(), InputError);
  s.species[0] = 100;
  EXPECT_NO_THROW(s.validate());
  s.periodic = true;
  EXPECT_THROW(s.validate(), InputError);
}
