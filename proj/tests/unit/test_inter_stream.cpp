#include "support/fixtures.hpp"
#include "support/numeric.hpp"
#include "tristream/inter_stream.hpp"

#include <gtest/gtest.h>

using namespace tristream;
using namespace tristream::testing;

namespace {

struct Fixture {
  InterStreamConfig cfg;
  RadialBasisSpec radial{RadialKind::bessel, 4, 4.0};
  CutoffBank bank{{0.5, 0.75, 1.0}};
  ParameterStore store;
  std::unique_ptr<InteractionBackbone> net;

  Fixture() {
    cfg.d_model = 8;
    cfg.layers = 2;
    Rng rng(71);
    net = make_interaction_backbone(store, cfg, radial.count * 3, rng);
  }

  Batch batch(const AtomicStructure& s) const {
    return Batch::assemble(std::vector<const AtomicStructure*>{&s}, radial.r_cut, 1000);
  }

  ad::Matrix run(const AtomicStructure& s) const {
    const Batch b = batch(s);
    return net->forward(store, b, edge_geometry(ad::constant(b.positions), b, radial, bank, -1)).value();
  }
};

}  // namespace

TEST(InteractionStream, SpeciesSwapChangesFeatures) {
  Fixture f;
  std::mt19937_64 rng(72);
  auto s = random_cluster(rng, 5, 2.5);
  s.species = {1, 8, 8, 6, 6};
  const ad::Matrix a = f.run(s);
  std::swap(s.species[0], s.species[1]);
  const ad::Matrix b = f.run(s);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(InteractionStream, RigidMotionInvariance) {
  Fixture f;
  std::mt19937_64 rng(73);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = trial % 2 ? random_crystal(rng, 3, 4.0) : random_cluster(rng, 7, 3.0);
    const ad::Matrix ref = f.run(s);
    const ad::Matrix r = f.run(rotated(s, random_rotation(rng)));
    const ad::Matrix t = f.run(translated(s, Vec3(-2.0, 0.5, 9.0)));
    EXPECT_LT(relative_error(r, ref), 1e-10);
    EXPECT_LT(relative_error(t, ref), 1e-12);
  }
}

TEST(InteractionStream, IsolatedAtomDependsOnlyOnSpecies) {
  Fixture f;
  AtomicStructure a;
  a.species = {26};
  a.positions = Positions::Zero(1, 3);
  AtomicStructure b = a;
  b.positions(0, 2) = 17.0;
  EXPECT_TRUE(f.run(a) == f.run(b));
  b.species = {27};
  EXPECT_FALSE(f.run(a) == f.run(b));
  // Out-of-table species never reach the stream: structure validation rejects them.
  b.species = {101};
  EXPECT_THROW(f.run(b), InputError);
}

TEST(InteractionStream, PositionGradientMatchesFiniteDifferences) {
  Fixture f;
  std::mt19937_64 rng(74);
  const auto s = random_cluster(rng, 6, 3.0);
  const Batch b = f.batch(s);
  const ad::Matrix w = random_matrix(rng, 6, 8);
  auto total = [&](const ad::Matrix& x) {
    return ad::sum(ad::mul(f.net->forward(f.store, b, edge_geometry(ad::constant(x), b, f.radial, f.bank, -1)),
                           ad::constant(w)))
        .item();
  };
  ad::Var x(b.positions, true);
  const auto out = f.net->forward(f.store, b, edge_geometry(x, b, f.radial, f.bank, -1));
  const auto g = ad::grad(ad::sum(ad::mul(out, ad::constant(w))), std::span<const ad::Var>(&x, 1));
  EXPECT_LT(relative_error(g[0].value(), central_difference(total, b.positions)), 1e-5);
}

namespace {

class ConstantBackbone final : public InteractionBackbone {
 public:
  explicit ConstantBackbone(int width) : width_(width) {}
  int width() const override { return width_; }
  ad::Var forward(const ParameterStore&, const Batch& batch, const EdgeGeometry&) const override {
    return ad::constant(ad::Matrix::Constant(batch.num_nodes, width_, 0.25));
  }

 private:
  int width_;
};

}  // namespace

TEST(InteractionStream, RegistryAcceptsNewBackbones) {
  register_interaction_backbone("constant_test", [](ParameterStore&, const InterStreamConfig& c, int, Rng&) {
    return std::unique_ptr<InteractionBackbone>(std::make_unique<ConstantBackbone>(c.d_model));
  });
  const auto names = interaction_backbones();
  EXPECT_NE(std::find(names.begin(), names.end(), "invariant_mp"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "constant_test"), names.end());

  auto cfg = small_config();
  cfg.interaction.backbone = "constant_test";
  Model m(cfg, 5);
  std::mt19937_64 rng(75);
  const auto out = m.forward(batch_of(random_cluster(rng, 4, 3.0), cfg));
  EXPECT_TRUE((out.embeddings.interaction.value().array() == 0.25).all());

  cfg.interaction.backbone = "missing";
  EXPECT_THROW(Model(cfg, 5), std::invalid_argument);
}
