#include "support/fixtures.hpp"
#include "support/numeric.hpp"
#include "tristream/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tristream;
using namespace tristream::testing;

namespace {

void zero_prefix(Model& m, const std::string& prefix) {
  for (auto i : m.params().indices_with_prefix(prefix)) m.params().value(i).setZero();
}

AtomicStructure dimer(double r, int z = 8) {
  AtomicStructure s;
  s.species = {z, z};
  s.positions = Positions::Zero(2, 3);
  s.positions.row(1) = Eigen::RowVector3d(0.3 * r, -0.4 * r, std::sqrt(0.75) * r);
  s.positions.row(0) = Eigen::RowVector3d(1.0, 2.0, 3.0);
  s.positions.row(1) += s.positions.row(0);
  return s;
}

double energy(const Model& m, const Batch& b) { return m.forward(b).energy.value().sum(); }

}  // namespace

TEST(EnergyHead, ZeroWeightsGiveAtomCountTimesBias) {
  const auto cfg = small_config();
  Model m(cfg, 1);
  zero_prefix(m, "head.energy");
  m.params().value(m.params().index_of("head.energy.2.bias"))(0, 0) = 0.7;
  std::mt19937_64 rng(81);
  const auto s = random_cluster(rng, 9, 4.0);
  EXPECT_NEAR(energy(m, batch_of(s, cfg)), 9 * 0.7, 1e-14);
}

TEST(EnergyHead, DisconnectedCopiesDoubleTheEnergy) {
  auto cfg = small_config();
  cfg.comp.count_embedding = false;
  Model m(cfg, 2);
  std::mt19937_64 rng(82);
  const auto s = random_cluster(rng, 5, 3.0);
  AtomicStructure two = s;
  two.positions.conservativeResize(10, 3);
  two.positions.bottomRows(5) = s.positions.rowwise() + Eigen::RowVector3d(40.0, 0.0, 0.0);
  two.species.insert(two.species.end(), s.species.begin(), s.species.end());
  const double e1 = energy(m, batch_of(s, cfg));
  EXPECT_NEAR(energy(m, batch_of(two, cfg)), 2 * e1, 1e-12 * std::max(1.0, std::abs(e1)));
}

TEST(EnergyHead, BatchingAndClonesReproduceBitwise) {
  const auto cfg = small_config();
  Model m(cfg, 3);
  std::mt19937_64 rng(83);
  const auto a = random_cluster(rng, 6, 3.0);
  const auto b = random_crystal(rng, 4, 4.5);
  const ad::Matrix joint = m.forward(batch_of(std::vector{a, b}, cfg)).energy.value();
  EXPECT_NEAR(joint(0, 0), energy(m, batch_of(a, cfg)), 1e-12);
  EXPECT_NEAR(joint(1, 0), energy(m, batch_of(b, cfg)), 1e-12);
  const Model copy = m.clone();
  EXPECT_EQ(energy(copy, batch_of(a, cfg)), energy(m, batch_of(a, cfg)));
  const Model again(cfg, 3);
  EXPECT_EQ(energy(again, batch_of(b, cfg)), energy(m, batch_of(b, cfg)));
}

TEST(EnergyHead, RigidMotionInvariance) {
  const auto cfg = small_config();
  Model m(cfg, 4);
  std::mt19937_64 rng(84);
  for (int trial = 0; trial < 6; ++trial) {
    const auto s = trial % 2 ? random_crystal(rng, 4, 4.2) : random_cluster(rng, 7, 3.0);
    const double e = energy(m, batch_of(s, cfg));
    EXPECT_NEAR(energy(m, batch_of(rotated(s, random_rotation(rng)), cfg)), e, 1e-8 * std::abs(e));
    EXPECT_NEAR(energy(m, batch_of(translated(s, Vec3(3.0, -1.0, 0.25)), cfg)), e, 1e-12 * std::abs(e));
  }
}

TEST(ConservativeForces, IsolatedAtomAndDimer) {
  const auto cfg = small_config();
  Model m(cfg, 5);
  AtomicStructure one;
  one.species = {14};
  one.positions = Positions::Constant(1, 3, 0.4);
  EXPECT_EQ(m.predict(batch_of(one, cfg), ForceMode::conservative).forces.cwiseAbs().maxCoeff(), 0.0);

  const auto d = dimer(1.6);
  const ad::Matrix f = m.predict(batch_of(d, cfg), ForceMode::conservative).forces;
  const Eigen::RowVector3d axis = (d.positions.row(1) - d.positions.row(0)).normalized();
  EXPECT_LT((f.row(0) + f.row(1)).norm(), 1e-8);
  EXPECT_LT((f.row(0) - f.row(0).dot(axis) * axis).norm(), 1e-8);
  EXPECT_GT(f.row(0).norm(), 1e-8);
}

TEST(ConservativeForces, MatchFiniteDifferencesAndSumToZero) {
  const auto cfg = small_config();
  Model m(cfg, 6);
  std::mt19937_64 rng(85);
  for (int trial = 0; trial < 4; ++trial) {
    const auto s = trial == 3 ? random_crystal(rng, 4, 4.0) : random_cluster(rng, 6, 3.0);
    const Batch b = batch_of(s, cfg);
    const ad::Matrix f = m.predict(b, ForceMode::conservative).forces;
    auto e_of = [&](const ad::Matrix& x) {
      Batch moved = b;
      moved.positions = x;
      return energy(m, moved);
    };
    const ad::Matrix fd = -central_difference(e_of, b.positions, 1e-4);
    EXPECT_LT(relative_error(f, fd), 1e-4);
    EXPECT_LT(f.colwise().sum().cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(ConservativeForces, RotateWithTheStructure) {
  const auto cfg = small_config();
  Model m(cfg, 7);
  std::mt19937_64 rng(86);
  const auto s = random_cluster(rng, 6, 3.0);
  const Mat3 r = random_rotation(rng);
  const ad::Matrix f = m.predict(batch_of(s, cfg), ForceMode::conservative).forces;
  const ad::Matrix fr = m.predict(batch_of(rotated(s, r), cfg), ForceMode::conservative).forces;
  EXPECT_LT(relative_error(fr, f * r.transpose()), 1e-8);
}

TEST(DirectHeads, EquivariantAntisymmetricAndEmptyForIsolatedAtoms) {
  const auto cfg = small_config();
  Model m(cfg, 8);
  std::mt19937_64 rng(87);
  Model::Options opt;
  opt.direct_forces = true;
  opt.noise = true;

  AtomicStructure one;
  one.species = {3};
  one.positions = Positions::Zero(1, 3);
  const auto iso = m.forward(batch_of(one, cfg), opt);
  EXPECT_EQ(iso.direct_forces.value().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(iso.noise.value().cwiseAbs().maxCoeff(), 0.0);

  const auto pair = m.forward(batch_of(dimer(1.9), cfg), opt);
  for (const ad::Matrix& v : {pair.direct_forces.value(), pair.noise.value()}) {
    EXPECT_LT((v.row(0) + v.row(1)).norm(), 1e-12);
    EXPECT_GT(v.row(0).norm(), 1e-10);
  }

  for (int trial = 0; trial < 4; ++trial) {
    const auto s = trial % 2 ? random_crystal(rng, 4, 4.0) : random_cluster(rng, 6, 3.0);
    const Mat3 r = random_rotation(rng);
    const auto a = m.forward(batch_of(s, cfg), opt);
    const auto b = m.forward(batch_of(rotated(s, r), cfg), opt);
    EXPECT_LT(relative_error(b.direct_forces.value(), a.direct_forces.value() * r.transpose()), 1e-8);
    EXPECT_LT(relative_error(b.noise.value(), a.noise.value() * r.transpose()), 1e-8);
    EXPECT_GT((a.direct_forces.value() - a.noise.value()).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(MaskHead, ZeroWeightsGiveUniformDistribution) {
  const auto cfg = small_config();
  Model m(cfg, 9);
  zero_prefix(m, "head.mask");
  std::mt19937_64 rng(88);
  Model::Options opt;
  opt.mask_logits = true;
  opt.energy = false;
  const auto out = m.forward(batch_of(random_cluster(rng, 5, 3.0), cfg), opt);
  const ad::Matrix nll = -ad::log_softmax_rows(out.mask_logits).value();
  ASSERT_EQ(nll.cols(), 100);
  EXPECT_LT((nll.array() - std::log(100.0)).abs().maxCoeff(), 1e-14);
}

TEST(MaskHead, RowsFollowNodeOrder) {
  const auto cfg = small_config();
  Model m(cfg, 10);
  std::mt19937_64 rng(89);
  const auto s = random_cluster(rng, 5, 3.0);
  std::vector<bool> mask{true, false, true, true, false};
  Model::Options opt;
  opt.mask_logits = true;
  const ad::Matrix a =
      m.forward(Batch::assemble({BatchEntry{s, build_graph(s, cfg.graph_cutoff, cfg.max_neighbors), mask}}), opt)
          .mask_logits.value();
  const std::vector<int> perm{3, 4, 0, 2, 1};
  AtomicStructure p = s;
  std::vector<bool> pmask(5);
  for (int i = 0; i < 5; ++i) {
    p.positions.row(i) = s.positions.row(perm[static_cast<std::size_t>(i)]);
    p.species[static_cast<std::size_t>(i)] = s.species[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    pmask[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const ad::Matrix b =
      m.forward(Batch::assemble({BatchEntry{p, build_graph(p, cfg.graph_cutoff, cfg.max_neighbors), pmask}}), opt)
          .mask_logits.value();
  for (int i = 0; i < 5; ++i)
    EXPECT_LT((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, ZeroedSliceEqualsModelWithoutThatStream) {
  auto cfg = small_config();
  Model full(cfg, 11);
  cfg.streams.comp = false;
  Model without(cfg, 11);
  std::mt19937_64 rng(90);
  const auto s = random_crystal(rng, 5, 4.2);
  const Batch b = batch_of(s, cfg);
  const auto sl = full.slices();
  EXPECT_EQ(sl.total, full.config().fused_width());
  const ad::Matrix comp = full.forward(b).embeddings.comp.value();
  ad::Matrix offset = ad::Matrix::Zero(b.num_nodes, sl.total);
  offset.middleCols(sl.comp_offset, sl.comp_width) = -comp;
  Model::Options opt;
  opt.fused_offset = &offset;
  opt.direct_forces = true;
  const auto zeroed = full.forward(b, opt);
  Model::Options plain;
  plain.direct_forces = true;
  const auto ablated = without.forward(b, plain);
  EXPECT_EQ(zeroed.energy.value()(0, 0), ablated.energy.value()(0, 0));
  EXPECT_TRUE(zeroed.direct_forces.value() == ablated.direct_forces.value());
  EXPECT_TRUE(without.component_parameters("comp").empty());
}

TEST(Gradients, ParameterGradientOfForceLossMatchesFiniteDifferences) {
  const auto cfg = small_config();
  Model m(cfg, 12);
  std::mt19937_64 rng(91);
  const auto s = random_cluster(rng, 5, 2.8);
  const Batch b = batch_of(s, cfg);
  const ad::Matrix target = random_matrix(rng, 5, 3);

  // E + 0.5 |F - target|^2 touches first and second derivatives of every stream.
  auto loss = [&]() {
    const auto out = m.forward(b);
    const ad::Var f = Model::conservative_forces(out, true);
    return ad::add(ad::sum(out.energy), ad::scale(ad::sum(ad::square(ad::sub(f, ad::constant(target)))), 0.5));
  };
  const auto vars = m.params().vars();
  const auto grads = ad::grad(loss(), vars);

  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int checked = 0;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    ad::Matrix& w = m.params().value(i);
    // Two sampled coordinates per array keeps the sweep cheap but covers every array.
    for (int k = 0; k < 2; ++k) {
      const auto idx = static_cast<ad::Index>(u(rng) * static_cast<double>(w.size()));
      const double orig = w.data()[idx];
      const double h = 1e-5 * std::max(1.0, std::abs(orig));
      w.data()[idx] = orig + h;
      const double fp = loss().item();
      w.data()[idx] = orig - h;
      const double fm = loss().item();
      w.data()[idx] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = grads[i].value().data()[idx];
      if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
      worst = std::max(worst, std::abs(an - fd) / std::max(std::abs(fd), 1e-3));
      ++checked;
    }
  }
  EXPECT_GT(checked, 20);
  EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, RebuiltGraphIsNotDifferentiable) {
  const auto cfg = small_config();
  std::mt19937_64 rng(92);
  const auto s = random_crystal(rng, 4, 4.0);
  const Batch b = batch_of(s, cfg);
  ad::Var x(b.positions, true);
  const auto fixed = edge_geometry(x, b, cfg.structure.radial(), cfg.structure.bank(), 2);
  const auto rebuilt = rebuild_geometry(x, b, cfg.structure.radial(), cfg.structure.bank(), 2);
  EXPECT_TRUE(rebuilt.geometry.distances.value() == fixed.distances.value());
  const ad::Var y = ad::sum(rebuilt.geometry.distances);
  EXPECT_THROW(ad::grad(y, std::span<const ad::Var>(&x, 1)), ad::UnsupportedOperation);
  EXPECT_NO_THROW(ad::grad(ad::sum(fixed.distances), std::span<const ad::Var>(&x, 1)));
}
