#include "support/fixtures.hpp"
#include "tristream/analysis.hpp"
#include "tristream/io.hpp"
#include "tristream/synthetic.hpp"
#include "tristream/trainer.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace tristream;
namespace fs = std::filesystem;

namespace {

std::vector<AtomicStructure> lj_data(std::uint64_t seed, int count) {
  Rng rng(seed);
  synthetic::PairDatasetOptions o;
  o.count = count;
  o.max_atoms = 6;
  return synthetic::pair_potential_dataset(rng, o);
}

PretrainConfig tiny_pretrain(int steps) {
  PretrainConfig c;
  c.optimizer.steps = steps;
  c.optimizer.warmup = 1;
  c.optimizer.batch_size = 4;
  c.weights.slices = 16;
  return c;
}

FinetuneConfig tiny_finetune(int steps, ForceMode mode) {
  FinetuneConfig c;
  c.optimizer.steps = steps;
  c.optimizer.warmup = 5;
  c.optimizer.batch_size = 8;
  c.optimizer.lr = 3e-3;
  c.mode = mode;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(Pipeline, PretrainThenFinetuneThroughCheckpoints) {
  const fs::path dir = fs::temp_directory_path() / "tristream_pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto data = lj_data(3, 32);
  const std::vector<AtomicStructure> train(data.begin(), data.begin() + 24), test(data.begin() + 24, data.end());

  // Disk round trip through the manifest must not change anything downstream.
  write_xyz(dir / "train.xyz", train);
  write_xyz(dir / "test.xyz", test);
  write_manifest(dir / "m.json", {"train.xyz", "test.xyz"}, {"train", "test"});
  const Dataset loaded = load_dataset(dir / "m.json");
  ASSERT_EQ(loaded.indices_of("train").size(), 24u);
  const auto train_disk = loaded.subset(loaded.indices_of("train")).structures;

  TrainState a(Model(tristream::testing::small_config(), 9), 9);
  TrainState b(Model(tristream::testing::small_config(), 9), 9);
  pretrain(a, train, tiny_pretrain(4));
  pretrain(b, train_disk, tiny_pretrain(4));
  save_checkpoint(dir / "a.ckpt", a);
  save_checkpoint(dir / "b.ckpt", b);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));

  TrainState ft = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(ft.stage, "pretrain");
  const auto before = evaluate(ft.model, test, ForceMode::conservative);
  const auto before_train = evaluate(ft.model, train, ForceMode::conservative);
  std::vector<LogRow> rows;
  finetune(ft, train, tiny_finetune(120, ForceMode::conservative), [&](const LogRow& r) { rows.push_back(r); });
  EXPECT_EQ(ft.stage, "finetune");
  EXPECT_EQ(ft.step, 120);
  ASSERT_EQ(rows.size(), 120u);
  const auto after_train = evaluate(ft.model, train, ForceMode::conservative);
  const auto after = evaluate(ft.model, test, ForceMode::conservative);
  EXPECT_LT(after_train.energy_mae, before_train.energy_mae);
  EXPECT_LT(after.energy_mae, before.energy_mae);
  EXPECT_TRUE(std::isfinite(after.force_mae));

  // Frozen embeddings of the fine-tuned model feed retrieval and probes.
  save_checkpoint(dir / "ft.ckpt", ft);
  const auto index = analysis::embed_dataset(dir / "ft.ckpt", data);
  index.save(dir / "ft.idx");
  const auto reloaded = analysis::EmbeddingIndex::load(dir / "ft.idx");
  ASSERT_EQ(reloaded.size(), data.size());
  for (auto space : analysis::kSpaces) {
    EXPECT_TRUE(reloaded.vectors(space) == index.vectors(space));
    EXPECT_EQ(analysis::knn_retrieve(reloaded, 0, space, 3).size(), 3u);
  }
  fs::remove_all(dir);
}

TEST(Pipeline, ModesShareTheDataOrder) {
  const auto data = lj_data(4, 16);
  TrainState c(Model(tristream::testing::small_config(), 2), 2);
  TrainState d(Model(tristream::testing::small_config(), 2), 2);
  finetune(c, data, tiny_finetune(6, ForceMode::conservative));
  finetune(d, data, tiny_finetune(6, ForceMode::direct));
  Rng rc = c.rng, rd = d.rng;
  EXPECT_EQ(rc(), rd());
  const auto mc = evaluate(c.model, data, ForceMode::conservative);
  const auto md = evaluate(d.model, data, ForceMode::direct);
  EXPECT_TRUE(std::isfinite(mc.force_mae));
  EXPECT_TRUE(std::isfinite(md.force_mae));
}
