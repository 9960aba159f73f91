#pragma once

#include "tristream/model.hpp"
#include "tristream/ssl.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tristream {

struct OptimizerConfig {
  double lr = 3e-4;
  int warmup = 500;
  int steps = 1000;
  double weight_decay = 0.01;
  double clip = 10.0;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerConfig pretrain_defaults() { return {}; }
  static OptimizerConfig finetune_defaults() {
    OptimizerConfig c;
    c.weight_decay = 1e-3;
    c.clip = 1.0;
    return c;
  }
  void validate() const;
};

// Linear ramp 0 -> lr over `warmup` steps, then cosine decay to 0 at `steps`.
double lr_at(int step, const OptimizerConfig& config);

// Rescales in place so the global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::vector<ad::Matrix>& grads, double max_norm);

// Decoupled weight decay: theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParameterStore& store, const OptimizerConfig& config);

  void step(ParameterStore& store, const std::vector<ad::Matrix>& grads, double lr);

  long long steps_taken() const { return t_; }
  const std::vector<ad::Matrix>& first_moment() const { return m_; }
  const std::vector<ad::Matrix>& second_moment() const { return v_; }
  void restore(long long t, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v);
  // Replaces the hyperparameters and keeps the moments.
  void configure(const OptimizerConfig& config);

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  long long t_ = 0;
  std::vector<ad::Matrix> m_, v_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, const std::string& detail);
  int step() const { return step_; }

 private:
  int step_;
};

// Everything needed to continue a run bit-exactly.
struct TrainState {
  Model model;
  AdamW optimizer;
  Rng rng;
  int step = 0;
  std::string stage;  // "init", "pretrain" or "finetune"

  TrainState(Model m, std::uint64_t seed);
};

using LogRow = std::map<std::string, double>;
using LogSink = std::function<void(const LogRow&)>;

struct PretrainConfig {
  OptimizerConfig optimizer = OptimizerConfig::pretrain_defaults();
  AugmentationConfig augment;
  SslWeights weights;
};

enum class SupervisedLoss { mae, mse };
const char* to_string(SupervisedLoss loss);
SupervisedLoss supervised_loss_from_string(const std::string& name);

struct FinetuneConfig {
  OptimizerConfig optimizer = OptimizerConfig::finetune_defaults();
  double energy_weight = 50.0;
  double force_weight = 100.0;
  SupervisedLoss loss = SupervisedLoss::mae;
  ForceMode mode = ForceMode::conservative;
};

// Batch indices for one step, drawn without replacement from state.rng.
std::vector<std::size_t> draw_batch(Rng& rng, std::size_t dataset_size, int batch_size);

// Runs until state.step == config.optimizer.steps, or stops early at stop_at
// without touching the schedule, so a later call resumes the same run. Throws
// TrainingDiverged on a non-finite loss.
void pretrain(TrainState& state, const std::vector<AtomicStructure>& data, const PretrainConfig& config,
              const LogSink& log = {}, std::optional<int> stop_at = std::nullopt);

void finetune(TrainState& state, const std::vector<AtomicStructure>& data, const FinetuneConfig& config,
              const LogSink& log = {}, std::optional<int> stop_at = std::nullopt);

// Supervised objective of one batch; exposed for gradient checks.
struct SupervisedTerms {
  ad::Var total, energy, forces;
};
SupervisedTerms supervised_loss(const Model& model, const std::vector<const AtomicStructure*>& batch,
                                const FinetuneConfig& config, bool training, Rng* rng);

struct Metrics {
  double energy_mae = 0.0;  // eV/atom
  double force_mae = 0.0;   // eV/A, mean over atoms and axes
  std::size_t structures = 0;
  std::size_t atoms = 0;
};

// Missing energy or force labels raise InputError.
Metrics evaluate(const Model& model, const std::vector<AtomicStructure>& data, ForceMode mode, int batch_size = 16);

// Versioned binary container: magic, version, JSON header (config, names,
// shapes, RNG, step, stage), then raw float64 parameters and AdamW moments.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

class CsvLog {
 public:
  void add(const LogRow& row) { rows_.push_back(row); }
  const std::vector<LogRow>& rows() const { return rows_; }
  // Columns are the union of keys, "step" first, then alphabetical.
  void write(const std::filesystem::path& path) const;
  static std::vector<LogRow> read(const std::filesystem::path& path);

 private:
  std::vector<LogRow> rows_;
};

}  // namespace tristream
