#pragma once

#include "tristream/batch.hpp"
#include "tristream/nn.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tristream {

struct InterStreamConfig {
  int d_model = 128;
  int layers = 3;
  std::string backbone = "invariant_mp";
  int vocab = kMaxAtomicNumber;

  void validate() const;
};

// Any map (batch, edge geometry, parameters) -> N x width node features can
// serve as the interaction stream.
class InteractionBackbone {
 public:
  virtual ~InteractionBackbone() = default;
  virtual int width() const = 0;
  virtual ad::Var forward(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry) const = 0;
};

using BackboneFactory = std::function<std::unique_ptr<InteractionBackbone>(
    ParameterStore& store, const InterStreamConfig& config, int edge_feature_width, Rng& rng)>;

void register_interaction_backbone(const std::string& name, BackboneFactory factory);
std::unique_ptr<InteractionBackbone> make_interaction_backbone(ParameterStore& store, const InterStreamConfig& config,
                                                               int edge_feature_width, Rng& rng);
std::vector<std::string> interaction_backbones();

// Species embedding followed by residual updates
//   h_i <- h_i + psi([h_i || sum_j s(r_ij) mlp([h_i || h_j || radial(r_ij)]) / (1 + sum_j s(r_ij))]).
class InvariantMessagePassing final : public InteractionBackbone {
 public:
  InvariantMessagePassing(ParameterStore& store, const InterStreamConfig& config, int edge_feature_width, Rng& rng);
  int width() const override { return config_.d_model; }
  ad::Var forward(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry) const override;

 private:
  struct Layer {
    nn::Mlp message, update;
  };
  InterStreamConfig config_;
  std::size_t table_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace tristream
