#pragma once

#include "tristream/batch.hpp"
#include "tristream/comp_stream.hpp"
#include "tristream/inter_stream.hpp"
#include "tristream/struct_stream.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tristream {

struct HeadConfig {
  std::vector<int> energy_hidden{128, 128};
  std::vector<int> pair_hidden{128, 128};  // direct-force and noise weights
  std::vector<int> mask_hidden{128, 128};
  int mask_classes = kMaxAtomicNumber;
  // Test-only split E = E_geom([struct || int]) + E_cf(comp) with no cross terms.
  bool additive = false;
};

struct StreamSwitches {
  bool comp = true;
  bool structure = true;
  bool interaction = true;
};

struct ModelConfig {
  CompStreamConfig comp;
  StructStreamConfig structure;
  InterStreamConfig interaction;
  HeadConfig heads;
  StreamSwitches streams;
  double graph_cutoff = 6.0;
  int max_neighbors = 120;

  void validate() const;
  int fused_width() const { return comp.d_model + structure.d_model + interaction.d_model; }
};

enum class ForceMode { conservative, direct };
const char* to_string(ForceMode mode);
ForceMode force_mode_from_string(const std::string& name);

// Per-node stream blocks and their concatenation. Disabled streams contribute
// constant zero blocks so that slice offsets never move.
struct StreamEmbeddings {
  ad::Var comp, structure, interaction, fused;  // N x width
  ad::Var pooled_comp, pooled_structure, pooled_interaction, pooled_fused;  // S x width
};

struct StreamSlices {
  int comp_offset, comp_width;
  int structure_offset, structure_width;
  int interaction_offset, interaction_width;
  int total;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  // Same architecture with copied parameter values.
  Model clone() const;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }
  StreamSlices slices() const;

  struct Options {
    bool training = false;
    Rng* rng = nullptr;  // dropout draws, used only when training
    bool energy = true;
    bool direct_forces = false;
    bool noise = false;
    bool mask_logits = false;
    const ad::Matrix* fused_offset = nullptr;  // N x fused_width constant added after fusion
  };

  struct Output {
    ad::Var positions;  // leaf with requires_grad
    EdgeGeometry geometry;
    StreamEmbeddings embeddings;
    ad::Var atom_energy;  // N x 1
    ad::Var energy;       // S x 1
    ad::Var direct_forces, noise, mask_logits;
  };

  Output forward(const Batch& batch, const Options& options) const;
  Output forward(const Batch& batch) const { return forward(batch, Options{}); }

  // -dE/dx for every node. With create_graph the result stays differentiable.
  static ad::Var conservative_forces(const Output& out, bool create_graph);

  struct Prediction {
    Eigen::VectorXd energy;  // per structure, eV
    ad::Matrix forces;       // N x 3, eV/A
  };
  Prediction predict(const Batch& batch, ForceMode mode) const;

  // Parameter indices owned by a component: "comp", "struct", "inter", "head".
  std::vector<std::size_t> component_parameters(const std::string& component) const;

 private:
  StreamEmbeddings embed(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry,
                         bool training, Rng* rng, const ad::Matrix* fused_offset) const;
  ad::Var pair_head(const nn::Mlp& mlp, const StreamEmbeddings& emb, const Batch& batch,
                    const EdgeGeometry& geometry) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  ParameterStore params_;
  std::optional<CompStream> comp_;
  std::optional<StructStream> structure_;
  std::shared_ptr<InteractionBackbone> interaction_;
  nn::Mlp energy_head_, geom_head_, cf_head_, force_head_, noise_head_, mask_head_;
};

// Mean of node rows per structure.
ad::Var mean_pool(const ad::Var& nodes, const Batch& batch);

}  // namespace tristream
