#include "support/fixtures.hpp"
#include "support/numeric.hpp"
#include "tristream/comp_stream.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace tristream;
using namespace tristream::testing;

namespace {

CompStreamConfig tiny() {
  CompStreamConfig c;
  c.d_model = 8;
  c.layers = 2;
  c.heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  return c;
}

Composition comp_of(std::vector<std::pair<int, int>> zc) {
  Composition c;
  for (auto [z, k] : zc) c.tokens.push_back({z, k});
  return c;
}

}  // namespace

TEST(CountWeightedAttention, EqualLogitsFollowCounts) {
  const auto w = count_weighted_attention(ad::Matrix::Zero(2, 2), {2, 1});
  for (int r = 0; r < 2; ++r) {
    EXPECT_NEAR(w(r, 0), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(w(r, 1), 1.0 / 3.0, 1e-15);
  }
  const auto one = count_weighted_attention(ad::Matrix::Constant(1, 1, 3.7), {5});
  EXPECT_DOUBLE_EQ(one(0, 0), 1.0);
  EXPECT_THROW(count_weighted_attention(ad::Matrix::Zero(1, 1), {0}), DomainError);
}

TEST(CountWeightedAttention, EqualsExpandedMultiset) {
  std::mt19937_64 rng(51);
  const std::vector<int> counts{3, 1, 2};
  const ad::Matrix logits = random_matrix(rng, 3, 3);
  const auto w = count_weighted_attention(logits, counts);
  // Expanded 6-token multiset: each type repeated by its count.
  std::vector<int> type_of;
  for (int t = 0; t < 3; ++t)
    for (int k = 0; k < counts[static_cast<std::size_t>(t)]; ++k) type_of.push_back(t);
  for (int t = 0; t < 3; ++t) {
    double denom = 0.0;
    for (int s : type_of) denom += std::exp(logits(t, s));
    for (int s = 0; s < 3; ++s) {
      double num = 0.0;
      for (int u : type_of)
        if (u == s) num += std::exp(logits(t, u));
      EXPECT_NEAR(w(t, s), num / denom, 1e-14);
    }
    EXPECT_NEAR(w.row(t).sum(), 1.0, 1e-12);
  }
}

TEST(CompStream, FirstLayerAttentionEqualsExpandedMultisetPerHead) {
  std::mt19937_64 rng(52);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  std::uniform_int_distribution<int> tcount(1, 5), ccount(1, 6), zdist(1, 100);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::set<int> zs;
    const int t = tcount(rng);
    while (static_cast<int>(zs.size()) < t) zs.insert(zdist(rng));
    Composition c;
    for (int z : zs) c.tokens.push_back({z, ccount(rng)});
    const auto tokens = CompTokens::from(c);
    const ad::Matrix u = cs.embed(store, tokens).value();
    std::vector<double> bias;
    for (const auto& tok : c.tokens) bias.push_back(std::log(static_cast<double>(tok.count)));
    const auto compressed = cs.probe_attention(store, u, bias, 0);

    std::vector<int> first_row;
    std::vector<ad::Index> rows;
    for (std::size_t k = 0; k < c.tokens.size(); ++k) {
      first_row.push_back(static_cast<int>(rows.size()));
      for (int r = 0; r < c.tokens[k].count; ++r) rows.push_back(static_cast<ad::Index>(k));
    }
    ad::Matrix expanded(static_cast<ad::Index>(rows.size()), u.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) expanded.row(static_cast<ad::Index>(r)) = u.row(rows[r]);
    const auto full = cs.probe_attention(store, expanded, std::vector<double>(rows.size(), 0.0), 0);
    ASSERT_EQ(full.outputs.size(), compressed.outputs.size());
    for (std::size_t h = 0; h < full.outputs.size(); ++h) {
      for (std::size_t k = 0; k < c.tokens.size(); ++k) {
        const double d = (full.outputs[h].row(first_row[k]) - compressed.outputs[h].row(static_cast<ad::Index>(k)))
                              .cwiseAbs()
                              .maxCoeff();
        worst = std::max(worst, d);
      }
    }
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(CompStream, RowsAreStochastic) {
  std::mt19937_64 rng(53);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  const auto c = comp_of({{1, 4}, {8, 2}, {26, 1}});
  const auto probe = cs.probe_attention(store, cs.embed(store, CompTokens::from(c)).value(), {std::log(4.0), std::log(2.0), 0.0}, 1);
  for (const auto& w : probe.weights)
    for (ad::Index r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
}

TEST(CompStream, AbsoluteCountsChangeOutput) {
  std::mt19937_64 rng(54);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  const ad::Matrix water = cs.forward(store, CompTokens::from(comp_of({{1, 2}, {8, 1}}))).value();
  const ad::Matrix doubled = cs.forward(store, CompTokens::from(comp_of({{1, 4}, {8, 2}}))).value();
  EXPECT_GT((water - doubled).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CompStream, DoublingSingleElementOnlyActsThroughCounts) {
  std::mt19937_64 rng(55);
  auto cfg = tiny();
  ParameterStore with_counts;
  const auto a = CompStream::create(with_counts, cfg, rng);
  const ad::Matrix one = a.forward(with_counts, CompTokens::from(comp_of({{14, 3}}))).value();
  const ad::Matrix two = a.forward(with_counts, CompTokens::from(comp_of({{14, 6}}))).value();
  EXPECT_GT((one - two).cwiseAbs().maxCoeff(), 1e-6);

  cfg.count_embedding = false;
  cfg.count_bias = false;
  ParameterStore ablated;
  const auto b = CompStream::create(ablated, cfg, rng);
  const ad::Matrix p = b.forward(ablated, CompTokens::from(comp_of({{14, 3}}))).value();
  const ad::Matrix q = b.forward(ablated, CompTokens::from(comp_of({{14, 6}}))).value();
  EXPECT_TRUE(p == q);
}

TEST(CompStream, PermutedAtomsGiveIdenticalOutput) {
  std::mt19937_64 rng(56);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  auto s = random_cluster(rng, 9, 5.0, 30);
  const ad::Matrix ref = cs.forward(store, CompTokens::from(compress_composition(s))).value();
  for (int t = 0; t < 5; ++t) {
    std::shuffle(s.species.begin(), s.species.end(), rng);
    EXPECT_TRUE(cs.forward(store, CompTokens::from(compress_composition(s))).value() == ref);
  }
}

TEST(CompStream, SegmentsDoNotInteract) {
  std::mt19937_64 rng(57);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  const auto a = comp_of({{1, 2}, {8, 1}});
  const auto b = comp_of({{6, 1}, {7, 5}, {8, 2}});
  CompTokens both;
  both.append(a, 0);
  both.append(b, 1);
  const ad::Matrix joint = cs.forward(store, both).value();
  const ad::Matrix alone_a = cs.forward(store, CompTokens::from(a)).value();
  const ad::Matrix alone_b = cs.forward(store, CompTokens::from(b)).value();
  EXPECT_LT((joint.topRows(2) - alone_a).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT((joint.bottomRows(3) - alone_b).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(CompStream, UnknownElementIsDomainError) {
  std::mt19937_64 rng(58);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  EXPECT_THROW(cs.forward(store, CompTokens::from(comp_of({{101, 1}}))), DomainError);
}

TEST(CompStream, EmbeddingGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(59);
  ParameterStore store;
  const auto cs = CompStream::create(store, tiny(), rng);
  const auto tokens = CompTokens::from(comp_of({{1, 3}, {6, 1}, {8, 2}}));
  const ad::Matrix w = random_matrix(rng, 3, 8);
  const std::size_t table = store.index_of("comp.embed");
  auto scalar = [&]() { return ad::sum(ad::mul(cs.forward(store, tokens), ad::constant(w))); };
  const auto g = ad::grad(scalar(), std::span<const ad::Var>(&store.var(table), 1));
  const ad::Matrix orig = store.value(table);
  // Only rows of the tokens present matter; check those by central differences.
  for (int z : {1, 6, 8, 0}) {
    for (int k = 0; k < 8; ++k) {
      const double h = 1e-6;
      store.value(table)(z, k) = orig(z, k) + h;
      const double fp = scalar().item();
      store.value(table)(z, k) = orig(z, k) - h;
      const double fm = scalar().item();
      store.value(table)(z, k) = orig(z, k);
      const double fd = (fp - fm) / (2 * h);
      EXPECT_NEAR(g[0].value()(z, k), fd, 1e-5 * std::max(1.0, std::abs(fd))) << z << "," << k;
    }
  }
}

TEST(CompStream, IndependentOfPositions) {
  std::mt19937_64 rng(60);
  const auto cfg = small_config();
  Model m(cfg, 3);
  auto s = random_cluster(rng, 6, 4.0);
  const ad::Matrix a = m.forward(batch_of(s, cfg)).embeddings.comp.value();
  s.positions.array() += 0.37;
  s.positions(2, 1) -= 0.5;
  const ad::Matrix b = m.forward(batch_of(s, cfg)).embeddings.comp.value();
  EXPECT_TRUE(a == b);
}
