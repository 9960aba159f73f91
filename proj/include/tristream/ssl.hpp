#pragma once

#include "tristream/model.hpp"

#include <map>
#include <string>
#include <vector>

namespace tristream {

struct AugmentationConfig {
  double noise_min = 0.05, noise_max = 0.3;  // A
  double mask_probability = 0.3;
  double rotation_max_degrees = 180.0;
  double cell_sigma_min = 0.01, cell_sigma_max = 0.03;
  double radius_min = 4.0, radius_max = 6.0;  // A
  int neighbors_min = 20, neighbors_max = 120;
  // Cap on augmentations beyond the position noise, which is always applied.
  int max_augmentations = 3;
  int views = 2;

  void validate() const;
};

// One corrupted copy of a structure. Every random draw is recorded, so
// corrupt(clean, view) rebuilds the corrupted geometry bitwise.
struct View {
  AtomicStructure structure;  // corrupted
  ad::Matrix noise;           // N x 3, added last, in the rotated frame
  std::vector<bool> masked;
  Mat3 rotation = Mat3::Identity();
  Mat3 strain = Mat3::Identity();  // cell <- cell * strain, fractional coordinates kept
  double graph_cutoff = 0.0;
  int max_neighbors = 0;
  std::vector<std::string> applied;

  BatchEntry entry() const;
};

struct ViewPair {
  std::vector<View> views;
};

AtomicStructure corrupt(const AtomicStructure& clean, const View& view);

// Graph parameters used when graph randomization is not drawn.
struct GraphDefaults {
  double cutoff = 6.0;
  int max_neighbors = 120;
};

ViewPair sample_views(const AtomicStructure& structure, const AugmentationConfig& config, const GraphDefaults& graph,
                      Rng& rng);

struct SslWeights {
  double denoise = 10.0;
  double mask = 0.1;
  double lejepa_node = 0.1;
  double lejepa_graph = 0.1;
  double sigreg = 0.1;  // lambda inside each LeJEPA term
  int slices = 1024;
  double t_max = 3.0;
  int quadrature = 17;

  void validate() const;
};

// sum_i |pred_i - eps_i|^2
ad::Var denoise_loss(const ad::Var& predicted, const ad::Matrix& noise);
// -sum_{i in M} log softmax(logits_i)[z_i - 1]; zero when M is empty.
ad::Var mask_loss(const ad::Var& logits, const std::vector<int>& species, const std::vector<bool>& masked);

// Epps-Pulley statistic of each 1-D projection (columns of `projected`, n rows):
//   n * int_{-t_max}^{t_max} |ecf(t) - exp(-t^2/2)|^2 exp(-t^2/2) dt
// by the trapezoid rule on `points` nodes of [0, t_max], doubled by symmetry.
// Returns 1 x slices. First-order differentiable only.
ad::Var epps_pulley(const ad::Var& projected, double t_max, int points);

// Mean statistic over `slices` random unit directions drawn from rng.
ad::Var sigreg(const ad::Var& embeddings, int slices, double t_max, int points, Rng& rng);

struct LejepaTerms {
  ad::Var total;
  ad::Var node_prediction, graph_prediction;  // per-structure means
  ad::Var node_sigreg, graph_sigreg;          // undefined when skipped
  bool sigreg_skipped = false;
};

// Views are given as N x d node embeddings (same node order) and S x d pooled
// embeddings. Prediction terms are averaged over the S structures.
LejepaTerms lejepa_loss(const std::vector<ad::Var>& nodes, const std::vector<ad::Var>& pooled, int num_structures,
                        const SslWeights& weights, Rng& rng);

struct SslLoss {
  ad::Var total;
  std::map<std::string, double> breakdown;
  bool sigreg_skipped = false;
};

// Every view in `pairs` is run through the model. Denoising and masking are
// summed per structure, averaged over structures and over views.
SslLoss combined_loss(const Model& model, const std::vector<ViewPair>& pairs, const SslWeights& weights, Rng& rng,
                      bool training = true);

}  // namespace tristream
