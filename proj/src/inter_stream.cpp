#include "tristream/inter_stream.hpp"

#include <map>
#include <mutex>
#include <stdexcept>

namespace tristream {

void InterStreamConfig::validate() const {
  if (d_model < 1 || layers < 1) throw std::invalid_argument("interaction stream needs d_model >= 1 and layers >= 1");
  if (vocab < 1) throw std::invalid_argument("interaction vocab must be positive");
}

namespace {

struct Registry {
  std::mutex mu;
  std::map<std::string, BackboneFactory> factories;
};

Registry& registry() {
  static Registry r;
  static std::once_flag defaults;
  std::call_once(defaults, [] {
    r.factories["invariant_mp"] = [](ParameterStore& store, const InterStreamConfig& c, int w, Rng& rng) {
      return std::unique_ptr<InteractionBackbone>(std::make_unique<InvariantMessagePassing>(store, c, w, rng));
    };
  });
  return r;
}

}  // namespace

void register_interaction_backbone(const std::string& name, BackboneFactory factory) {
  if (!factory) throw std::invalid_argument("backbone factory must be callable");
  auto& r = registry();
  std::lock_guard lock(r.mu);
  r.factories[name] = std::move(factory);
}

std::unique_ptr<InteractionBackbone> make_interaction_backbone(ParameterStore& store, const InterStreamConfig& config,
                                                               int edge_feature_width, Rng& rng) {
  config.validate();
  BackboneFactory f;
  {
    auto& r = registry();
    std::lock_guard lock(r.mu);
    auto it = r.factories.find(config.backbone);
    if (it == r.factories.end()) throw std::invalid_argument("unknown interaction backbone '" + config.backbone + "'");
    f = it->second;
  }
  return f(store, config, edge_feature_width, rng);
}

std::vector<std::string> interaction_backbones() {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  std::vector<std::string> names;
  for (const auto& [k, v] : r.factories) names.push_back(k);
  return names;
}

InvariantMessagePassing::InvariantMessagePassing(ParameterStore& store, const InterStreamConfig& config,
                                                 int edge_feature_width, Rng& rng)
    : config_(config) {
  config.validate();
  const int d = config.d_model;
  std::normal_distribution<double> n(0.0, 1.0);
  ad::Matrix table(config.vocab + 1, d);
  for (ad::Index i = 0; i < table.size(); ++i) table.data()[i] = n(rng);
  table_ = store.add("inter.embed", std::move(table));
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "inter.layer" + std::to_string(l);
    layers_.push_back({nn::Mlp::create(store, p + ".message", 2 * d + edge_feature_width, {d}, d, rng),
                       nn::Mlp::create(store, p + ".update", 2 * d, {d}, d, rng)});
  }
}

ad::Var InvariantMessagePassing::forward(const ParameterStore& store, const Batch& batch,
                                         const EdgeGeometry& geometry) const {
  for (int z : batch.node_types) {
    if (z < 0 || z > config_.vocab) throw DomainError("unknown element " + std::to_string(z));
  }
  ad::Var h = ad::gather_rows(store.var(table_), batch.node_types_index);
  const ad::Var den = ad::add_scalar(ad::scatter_add_rows(geometry.envelope, batch.edge_center, batch.num_nodes), 1.0);
  for (const auto& layer : layers_) {
    const ad::Var in = ad::concat_cols(
        {ad::gather_rows(h, batch.edge_center), ad::gather_rows(h, batch.edge_neighbor), geometry.radial});
    const ad::Var msg = ad::mul(layer.message(store, in), geometry.envelope);
    const ad::Var agg = ad::div(ad::scatter_add_rows(msg, batch.edge_center, batch.num_nodes), den);
    h = ad::add(h, layer.update(store, ad::concat_cols({h, agg})));
  }
  return h;
}

}  // namespace tristream
