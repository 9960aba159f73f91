#pragma once

#include "tristream/model.hpp"
#include "tristream/structure.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace tristream::analysis {

enum class Space { comp, structure, interaction, joint };
constexpr std::array<Space, 4> kSpaces{Space::comp, Space::structure, Space::interaction, Space::joint};
// "comp", "struct", "int", "joint".
const char* to_string(Space space);
Space space_from_string(const std::string& name);

using Label = std::variant<double, std::string>;
using LabelRow = std::map<std::string, Label>;
using Vectors = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Pooled per-structure vectors of every space plus one label row per record.
// Row i of every matrix and labels[i] describe the same structure.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::array<Vectors, 4> spaces, std::vector<LabelRow> labels);

  std::size_t size() const { return labels_.size(); }
  const Vectors& vectors(Space space) const { return spaces_[static_cast<std::size_t>(space)]; }
  const std::vector<LabelRow>& labels() const { return labels_; }
  const LabelRow& labels(std::size_t id) const { return labels_.at(id); }

  void save(const std::filesystem::path& path) const;
  static EmbeddingIndex load(const std::filesystem::path& path);

 private:
  void validate() const;

  std::array<Vectors, 4> spaces_;
  std::vector<LabelRow> labels_;
};

// Scalar and string labels of the dataset are carried over. Always added:
// "element_set" ("z1,z2,..." ascending), "majority_element",
// "mean_nn_distance" (A, minimum image for periodic structures).
EmbeddingIndex embed_dataset(const Model& model, const std::vector<AtomicStructure>& data, int batch_size = 16);
EmbeddingIndex embed_dataset(const std::filesystem::path& checkpoint, const std::vector<AtomicStructure>& data,
                             int batch_size = 16);

struct Hit {
  std::size_t id;
  double score;  // cosine similarity
};

// Exact cosine ranking over every other record; ties go to the lower id.
// Records with zero-norm vectors are skipped with a warning.
std::vector<Hit> knn_retrieve(const EmbeddingIndex& index, std::size_t query, Space space, int k);
// Same ranking for an external query vector; `exclude` is never returned.
std::vector<Hit> knn_search(const EmbeddingIndex& index, Space space, const Eigen::VectorXd& query, int k,
                            std::optional<std::size_t> exclude = std::nullopt);

struct Recall {
  double recall = 0.0;
  std::size_t queries = 0;   // queries with at least one positive
  std::size_t excluded = 0;  // queries without a positive, or with a zero-norm vector
};
// A query succeeds when one of its top-k records shares its `target` label.
Recall recall_at_k(const EmbeddingIndex& index, Space space, const std::string& target, int k);
// recall_at_k for each k in `ks` from a single ranking per query.
std::vector<Recall> recall_curve(const EmbeddingIndex& index, Space space, const std::string& target,
                                 const std::vector<int>& ks);

enum class ProbeHead { linear, mlp };
enum class ProbeTask { classification, regression };
const char* to_string(ProbeHead head);
ProbeHead probe_head_from_string(const std::string& name);
// Categorical for string labels and for the known id-valued keys.
ProbeTask default_task(const std::string& target);

struct Split {
  std::vector<std::size_t> train, test;
};
Split random_split(std::size_t n, double test_fraction, std::uint64_t seed);

struct ProbeOptions {
  int steps = 1000;
  double lr = 3e-3;
  double weight_decay = 0.0;
  int hidden = 128;  // MLP probe: two hidden layers of this width, SiLU
  double ridge = 1e-8;
  bool shuffle_labels = false;  // permutation control: train labels permuted
  std::uint64_t seed = 0;
};

struct ProbeResult {
  ProbeTask task = ProbeTask::regression;
  double metric = 0.0;    // accuracy, or MAE in target units
  double baseline = 0.0;  // majority-class accuracy, or MAE of the train mean
  double target_scale = 0.0;  // regression: std of all targets
  int classes = 0;
  std::vector<std::string> absent_classes;  // present in test but not in train
};

ProbeResult probe(const EmbeddingIndex& index, Space space, const std::string& target, ProbeHead head,
                  const Split& split, const ProbeOptions& options = {});
ProbeResult probe(const EmbeddingIndex& index, Space space, const std::string& target, ProbeTask task,
                  ProbeHead head, const Split& split, const ProbeOptions& options = {});

// log mean_{i<j} exp(-2 |x_i - x_j|^2) over L2-normalized rows.
double uniformity(const Eigen::MatrixXd& vectors);

enum class SensitivityTarget { energy, force_norm_sum };
struct Sensitivity {
  double comp = 0.0, structure = 0.0, interaction = 0.0;
  ad::Matrix gradient;  // N x fused_width
};
// Gradient of the target w.r.t. the fused node vectors; per stream the mean
// over nodes of the L2 norm of its slice.
Sensitivity stream_sensitivity(const Model& model, const AtomicStructure& structure, SensitivityTarget target);
double sensitivity_target(const Model& model, const AtomicStructure& structure, SensitivityTarget target,
                          const ad::Matrix* fused_offset = nullptr);

}  // namespace tristream::analysis
