#pragma once

#include "tristream/model.hpp"
#include "tristream/structure.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace tristream::theory {

// One named measurement against an explicit threshold. relation is "<=",
// ">=" or "report" (recorded, never fails).
struct Check {
  std::string name;
  double measured = 0.0;
  double threshold = 0.0;
  std::string relation = "<=";
  bool passed = false;
  nlohmann::json details = nlohmann::json::object();
};

Check make_check(std::string name, double measured, std::string relation, double threshold,
                 nlohmann::json details = nlohmann::json::object());

struct CouplingReport {
  std::vector<Check> checks;
  bool passed() const;
  nlohmann::json to_json() const;  // array, one object per check
};

// Singular values above rel_tol * largest; 0 for an all-zero matrix.
int numerical_rank(const Eigen::MatrixXd& m, double rel_tol = 1e-8);

// dE/dtheta over `params`, flattened in store order.
Eigen::VectorXd energy_jacobian(const Model& model, const AtomicStructure& s, const std::vector<std::size_t>& params);
// d2E/(dtheta dx): P x 3N with column 3k+a for atom k, axis a.
// The FD form differentiates dE/dtheta in x; the autodiff form differentiates
// dE/dx in theta.
Eigen::MatrixXd mixed_hessian_fd(const Model& model, const AtomicStructure& s, const std::vector<std::size_t>& params,
                                 double step = 1e-4);
Eigen::MatrixXd mixed_hessian_autodiff(const Model& model, const AtomicStructure& s,
                                       const std::vector<std::size_t>& params);

struct Targets {
  double energy = 0.0;
  PerAtom forces;
};

enum class HessianMethod { finite_difference, autodiff };

struct CouplingResult {
  double discrepancy = 0.0;  // max |autodiff - formula| / max |formula|, absolute when the formula is zero
  double autodiff_norm = 0.0, formula_norm = 0.0;
};
// Loss (E - E*)^2 + lambda sum_k |F_k - F*_k|^2 over every model parameter.
CouplingResult verify_grad_coupling(const Model& model, const AtomicStructure& s, const Targets& targets,
                                    double lambda, HessianMethod method = HessianMethod::finite_difference);

// Composition-side parameters: the composition stream, plus the coordinate-free
// energy head in additive mode.
std::vector<std::size_t> composition_parameters(const Model& model);

struct DecouplingResult {
  double force_change = 0.0;   // max |dF|, eV/A
  double energy_change = 0.0;  // |dE|, eV
};
DecouplingResult verify_additive_decoupling(const Model& model, const AtomicStructure& s, const Eigen::VectorXd& delta);
// Draws delta of the given norm half along dE/dtheta_cf, half random.
DecouplingResult verify_additive_decoupling(const Model& model, const AtomicStructure& s, double delta_norm, Rng& rng);

enum class Activation { silu, linear };
struct RankBoundOptions {
  int d_c = 6, d_g = 5, m = 4;
  int rank_c = -1;  // construct W_c with this rank; -1 for full
  Activation activation = Activation::silu;
};
struct RankBoundResult {
  Eigen::MatrixXd cross_hessian;  // d_c x d_g
  double fd_discrepancy = 0.0;
  double max_abs = 0.0;
  int rank = 0, rank_wc = 0, rank_wg = 0, bound = 0;
};
// E = v . sigma(W_c h_c + W_g h_g + b) with random factors.
RankBoundResult verify_rank_bound(const RankBoundOptions& options, Rng& rng);

struct StackedRankResult {
  int width = 0;     // hidden width m of the energy head
  int species = 0;   // distinct elements T
  int bound = 0;     // m * T, capped by 3N; m for single-element inputs
  int rank = 0;
  long dimension = 0;  // dim(theta_comp)
  long null_dimension = 0;
  double top_change = 0.0, null_change = 0.0;  // max |dF| at `step` along each direction
  double ratio = 0.0;
  Eigen::VectorXd singular_values;
};
// Requires a one-hidden-layer energy head.
StackedRankResult verify_stacked_rank(const Model& model, const AtomicStructure& s, Rng& rng, double step = 1e-4);

// max |H_fd - H_autodiff| / max |H_autodiff| over every parameter.
double verify_commutation(const Model& model, const AtomicStructure& s, double step = 1e-4);

// Small model with a one-hidden-layer energy head of width m.
ModelConfig suite_model_config(int m, bool additive = false);

struct SuiteOptions {
  std::uint64_t seed = 0;
  int trials = 20;
};
CouplingReport run_suite(const SuiteOptions& options);

}  // namespace tristream::theory
