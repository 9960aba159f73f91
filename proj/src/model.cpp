#include "tristream/model.hpp"

#include <stdexcept>

namespace tristream {

namespace {

// Independent initialization stream per component, so toggling one stream
// leaves the initial weights of the others unchanged.
Rng component_rng(std::uint64_t seed, std::uint64_t component) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(component)};
  return Rng(seq);
}

}  // namespace

void ModelConfig::validate() const {
  comp.validate();
  structure.validate();
  interaction.validate();
  if (!(graph_cutoff > 0.0)) throw std::invalid_argument("graph_cutoff must be positive");
  if (max_neighbors < 1) throw std::invalid_argument("max_neighbors must be >= 1");
  if (heads.mask_classes < 1) throw std::invalid_argument("mask head needs at least one class");
  if (!streams.comp && !streams.structure && !streams.interaction) {
    throw std::invalid_argument("at least one stream must be enabled");
  }
}

const char* to_string(ForceMode mode) { return mode == ForceMode::conservative ? "conservative" : "direct"; }

ForceMode force_mode_from_string(const std::string& name) {
  if (name == "conservative") return ForceMode::conservative;
  if (name == "direct") return ForceMode::direct;
  throw std::invalid_argument("unknown force mode '" + name + "'");
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  params_.seed = seed;
  if (config_.streams.comp) {
    Rng rng = component_rng(seed, 1);
    comp_ = CompStream::create(params_, config_.comp, rng);
  }
  if (config_.streams.structure) {
    Rng rng = component_rng(seed, 2);
    structure_ = StructStream::create(params_, config_.structure, rng);
  }
  const int edge_width = config_.structure.radial_count * static_cast<int>(config_.structure.scales.size());
  if (config_.streams.interaction) {
    Rng rng = component_rng(seed, 3);
    interaction_ = make_interaction_backbone(params_, config_.interaction, edge_width, rng);
    if (interaction_->width() != config_.interaction.d_model) {
      throw std::invalid_argument("interaction backbone width differs from interaction.d_model");
    }
  }
  Rng rng = component_rng(seed, 4);
  const auto& h = config_.heads;
  const int d = config_.fused_width();
  if (h.additive) {
    geom_head_ = nn::Mlp::create(params_, "head.energy_geom", config_.structure.d_model + config_.interaction.d_model,
                                 h.energy_hidden, 1, rng);
    cf_head_ = nn::Mlp::create(params_, "head.energy_comp", config_.comp.d_model, h.energy_hidden, 1, rng);
  } else {
    energy_head_ = nn::Mlp::create(params_, "head.energy", d, h.energy_hidden, 1, rng);
  }
  force_head_ = nn::Mlp::create(params_, "head.force", 2 * d + edge_width, h.pair_hidden, 1, rng);
  noise_head_ = nn::Mlp::create(params_, "head.noise", 2 * d + edge_width, h.pair_hidden, 1, rng);
  mask_head_ = nn::Mlp::create(params_, "head.mask", d, h.mask_hidden, h.mask_classes, rng);
}

Model Model::clone() const {
  Model m(config_, seed_);
  for (std::size_t i = 0; i < params_.size(); ++i) m.params_.value(i) = params_.value(i);
  return m;
}

StreamSlices Model::slices() const {
  StreamSlices s;
  s.comp_offset = 0;
  s.comp_width = config_.comp.d_model;
  s.structure_offset = s.comp_width;
  s.structure_width = config_.structure.d_model;
  s.interaction_offset = s.structure_offset + s.structure_width;
  s.interaction_width = config_.interaction.d_model;
  s.total = s.interaction_offset + s.interaction_width;
  return s;
}

std::vector<std::size_t> Model::component_parameters(const std::string& component) const {
  if (component != "comp" && component != "struct" && component != "inter" && component != "head") {
    throw std::invalid_argument("unknown model component '" + component + "'");
  }
  return params_.indices_with_prefix(component + ".");
}

ad::Var mean_pool(const ad::Var& nodes, const Batch& batch) {
  ad::Matrix inv(batch.num_structures, 1);
  for (int s = 0; s < batch.num_structures; ++s) inv(s, 0) = 1.0 / batch.atom_counts[static_cast<std::size_t>(s)];
  return ad::mul(ad::scatter_add_rows(nodes, batch.node_structure, batch.num_structures), ad::constant(std::move(inv)));
}

StreamEmbeddings Model::embed(const ParameterStore& store, const Batch& batch, const EdgeGeometry& geometry,
                              bool training, Rng* rng, const ad::Matrix* fused_offset) const {
  StreamEmbeddings e;
  const int n = batch.num_nodes;
  if (comp_) {
    const ad::Var tokens = comp_->forward(store, batch.tokens, training, rng);
    e.comp = ad::gather_rows(tokens, batch.atom_token);
  } else {
    e.comp = ad::zeros(n, config_.comp.d_model);
  }
  e.structure = structure_ ? structure_->forward(store, batch, geometry) : ad::zeros(n, config_.structure.d_model);
  e.interaction = interaction_ ? interaction_->forward(store, batch, geometry) : ad::zeros(n, config_.interaction.d_model);
  e.fused = ad::concat_cols({e.comp, e.structure, e.interaction});
  if (fused_offset) {
    if (fused_offset->rows() != n || fused_offset->cols() != e.fused.cols()) {
      throw std::invalid_argument("fused offset has the wrong shape");
    }
    e.fused = ad::add(e.fused, ad::constant(*fused_offset));
  }
  e.pooled_comp = mean_pool(e.comp, batch);
  e.pooled_structure = mean_pool(e.structure, batch);
  e.pooled_interaction = mean_pool(e.interaction, batch);
  e.pooled_fused = mean_pool(e.fused, batch);
  return e;
}

ad::Var Model::pair_head(const nn::Mlp& mlp, const StreamEmbeddings& emb, const Batch& batch,
                         const EdgeGeometry& geometry) const {
  const ad::Var in = ad::concat_cols(
      {ad::gather_rows(emb.fused, batch.edge_center), ad::gather_rows(emb.fused, batch.edge_neighbor), geometry.radial});
  const ad::Var w = ad::mul(mlp(params_, in), geometry.envelope);
  return ad::scatter_add_rows(ad::mul(w, geometry.unit), batch.edge_center, batch.num_nodes);
}

Model::Output Model::forward(const Batch& batch, const Options& options) const {
  Output out;
  out.positions = ad::Var(batch.positions, true);
  const int lmax = structure_ ? config_.structure.lmax : -1;
  out.geometry = edge_geometry(out.positions, batch, config_.structure.radial(), config_.structure.bank(), lmax);
  out.embeddings = embed(params_, batch, out.geometry, options.training, options.rng, options.fused_offset);
  const auto& emb = out.embeddings;
  if (options.energy) {
    if (config_.heads.additive) {
      const auto sl = slices();
      const ad::Var geom_in = ad::slice_cols(emb.fused, sl.structure_offset, sl.structure_width + sl.interaction_width);
      const ad::Var comp_in = ad::slice_cols(emb.fused, sl.comp_offset, sl.comp_width);
      out.atom_energy = ad::add(geom_head_(params_, geom_in), cf_head_(params_, comp_in));
    } else {
      out.atom_energy = energy_head_(params_, emb.fused);
    }
    out.energy = ad::scatter_add_rows(out.atom_energy, batch.node_structure, batch.num_structures);
  }
  if (options.direct_forces) out.direct_forces = pair_head(force_head_, emb, batch, out.geometry);
  if (options.noise) out.noise = pair_head(noise_head_, emb, batch, out.geometry);
  if (options.mask_logits) out.mask_logits = mask_head_(params_, emb.fused);
  return out;
}

ad::Var Model::conservative_forces(const Output& out, bool create_graph) {
  if (!out.energy.defined()) throw std::logic_error("conservative forces need the energy output");
  const auto g = ad::grad(ad::sum(out.energy), std::span<const ad::Var>(&out.positions, 1), ad::Var(), create_graph);
  return ad::neg(g[0]);
}

Model::Prediction Model::predict(const Batch& batch, ForceMode mode) const {
  Options opt;
  opt.direct_forces = mode == ForceMode::direct;
  Output out;
  Prediction p;
  if (mode == ForceMode::conservative) {
    out = forward(batch, opt);
    p.forces = conservative_forces(out, false).value();
  } else {
    ad::NoGradGuard ng;
    out = forward(batch, opt);
    p.forces = out.direct_forces.value();
  }
  p.energy = Eigen::Map<const Eigen::VectorXd>(out.energy.value().data(), out.energy.rows());
  return p;
}

}  // namespace tristream
