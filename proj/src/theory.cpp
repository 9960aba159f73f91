#include "tristream/theory.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace tristream::theory {

namespace {

Batch single(const Model& model, const AtomicStructure& s) {
  return Batch::assemble(std::vector<const AtomicStructure*>{&s}, model.config().graph_cutoff,
                         model.config().max_neighbors);
}

std::vector<ad::Var> vars_of(const Model& model, const std::vector<std::size_t>& params) {
  std::vector<ad::Var> v;
  v.reserve(params.size());
  for (auto i : params) v.push_back(model.params().var(i));
  return v;
}

Eigen::VectorXd flat(const std::vector<ad::Var>& grads) {
  Eigen::Index n = 0;
  for (const auto& g : grads) n += g.value().size();
  Eigen::VectorXd out(n);
  Eigen::Index at = 0;
  for (const auto& g : grads) {
    out.segment(at, g.value().size()) = Eigen::Map<const Eigen::VectorXd>(g.value().data(), g.value().size());
    at += g.value().size();
  }
  return out;
}

std::vector<std::size_t> all_parameters(const Model& model) {
  std::vector<std::size_t> idx(model.params().size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

double relative(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double diff = (got - want).cwiseAbs().maxCoeff();
  const double scale = want.cwiseAbs().maxCoeff();
  return scale > 0.0 ? diff / scale : diff;
}

// Flat row-major N x 3 view.
Eigen::VectorXd flat_forces(const ad::Matrix& f) { return Eigen::Map<const Eigen::VectorXd>(f.data(), f.size()); }

Model::Prediction predict_one(const Model& model, const AtomicStructure& s) {
  return model.predict(single(model, s), ForceMode::conservative);
}

AtomicStructure random_structure(Rng& rng, int n, const std::vector<int>& elements) {
  std::uniform_real_distribution<double> u(0.0, 2.6);
  AtomicStructure s;
  s.positions.resize(n, 3);
  int placed = 0;
  while (placed < n) {
    const Eigen::RowVector3d x(u(rng), u(rng), u(rng));
    bool ok = true;
    for (int j = 0; j < placed && ok; ++j) ok = (s.positions.row(j) - x).norm() >= 1.0;
    if (!ok) continue;
    s.positions.row(placed++) = x;
    s.species.push_back(elements[rng() % elements.size()]);
  }
  return s;
}

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

Check make_check(std::string name, double measured, std::string relation, double threshold, nlohmann::json details) {
  Check c;
  c.name = std::move(name);
  c.measured = measured;
  c.relation = std::move(relation);
  c.threshold = threshold;
  c.details = std::move(details);
  if (c.relation == "<=") {
    c.passed = measured <= threshold;
  } else if (c.relation == ">=") {
    c.passed = measured >= threshold;
  } else if (c.relation == "report") {
    c.passed = true;
  } else {
    throw std::invalid_argument("unknown check relation '" + c.relation + "'");
  }
  return c;
}

bool CouplingReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

nlohmann::json CouplingReport::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : checks) {
    nlohmann::json j;
    j["check"] = c.name;
    j["measured"] = std::isfinite(c.measured) ? nlohmann::json(c.measured) : nlohmann::json(std::to_string(c.measured));
    j["threshold"] = c.threshold;
    j["relation"] = c.relation;
    j["passed"] = c.passed;
    j["details"] = c.details;
    out.push_back(std::move(j));
  }
  return out;
}

int numerical_rank(const Eigen::MatrixXd& m, double rel_tol) {
  if (m.size() == 0) return 0;
  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
  if (sv.size() == 0 || !(sv(0) > 0.0)) return 0;
  return static_cast<int>((sv.array() > rel_tol * sv(0)).count());
}

Eigen::VectorXd energy_jacobian(const Model& model, const AtomicStructure& s, const std::vector<std::size_t>& params) {
  const auto out = model.forward(single(model, s));
  return flat(ad::grad(ad::sum(out.energy), vars_of(model, params)));
}

Eigen::MatrixXd mixed_hessian_fd(const Model& model, const AtomicStructure& s, const std::vector<std::size_t>& params,
                                 double step) {
  const auto n = static_cast<Eigen::Index>(s.size());
  Eigen::MatrixXd h;
  AtomicStructure x = s;
  for (Eigen::Index k = 0; k < n; ++k) {
    for (int a = 0; a < 3; ++a) {
      const double orig = x.positions(k, a);
      x.positions(k, a) = orig + step;
      const Eigen::VectorXd jp = energy_jacobian(model, x, params);
      x.positions(k, a) = orig - step;
      const Eigen::VectorXd jm = energy_jacobian(model, x, params);
      x.positions(k, a) = orig;
      if (h.size() == 0) h.resize(jp.size(), 3 * n);
      h.col(3 * k + a) = (jp - jm) / (2.0 * step);
    }
  }
  return h;
}

Eigen::MatrixXd mixed_hessian_autodiff(const Model& model, const AtomicStructure& s,
                                       const std::vector<std::size_t>& params) {
  const auto out = model.forward(single(model, s));
  const std::vector<ad::Var> pos{out.positions};
  const ad::Var dedx = ad::grad(ad::sum(out.energy), pos, ad::Var(), true).front();
  const auto vars = vars_of(model, params);
  const auto n = dedx.rows();
  Eigen::MatrixXd h;
  for (Eigen::Index k = 0; k < n; ++k) {
    for (int a = 0; a < 3; ++a) {
      ad::Matrix seed = ad::Matrix::Zero(n, 3);
      seed(k, a) = 1.0;
      const Eigen::VectorXd col = flat(ad::grad(dedx, vars, ad::constant(seed)));
      if (h.size() == 0) h.resize(col.size(), 3 * n);
      h.col(3 * k + a) = col;
    }
  }
  return h;
}

CouplingResult verify_grad_coupling(const Model& model, const AtomicStructure& s, const Targets& targets,
                                    double lambda, HessianMethod method) {
  if (targets.forces.rows() != static_cast<Eigen::Index>(s.size()) || targets.forces.cols() != 3) {
    throw std::invalid_argument("force targets must be N x 3");
  }
  const auto params = all_parameters(model);
  const auto vars = vars_of(model, params);

  const auto out = model.forward(single(model, s));
  const ad::Var f = Model::conservative_forces(out, true);
  const ad::Var de = ad::add_scalar(ad::sum(out.energy), -targets.energy);
  const ad::Var df = ad::sub(f, ad::constant(targets.forces));
  const ad::Var loss = ad::add(ad::square(de), ad::scale(ad::sum(ad::square(df)), lambda));
  const Eigen::VectorXd autodiff = flat(ad::grad(loss, vars));

  const double e_err = de.item();
  const Eigen::VectorXd f_err = flat_forces(df.value());
  const Eigen::VectorXd jac = energy_jacobian(model, s, params);
  Eigen::VectorXd formula = 2.0 * e_err * jac;
  if (lambda != 0.0) {
    const Eigen::MatrixXd h = method == HessianMethod::finite_difference ? mixed_hessian_fd(model, s, params)
                                                                          : mixed_hessian_autodiff(model, s, params);
    formula -= 2.0 * lambda * (h * f_err);
  }
  CouplingResult r;
  r.discrepancy = relative(autodiff, formula);
  r.autodiff_norm = autodiff.norm();
  r.formula_norm = formula.norm();
  return r;
}

std::vector<std::size_t> composition_parameters(const Model& model) {
  auto idx = model.component_parameters("comp");
  if (model.config().heads.additive) {
    for (auto i : model.params().indices_with_prefix("head.energy_comp.")) idx.push_back(i);
  }
  return idx;
}

DecouplingResult verify_additive_decoupling(const Model& model, const AtomicStructure& s,
                                            const Eigen::VectorXd& delta) {
  const auto idx = composition_parameters(model);
  Model moved = model.clone();
  const Eigen::VectorXd base = moved.params().flatten(idx);
  if (delta.size() != base.size()) throw std::invalid_argument("delta has the wrong size");
  moved.params().assign(idx, base + delta);
  const auto a = predict_one(model, s);
  const auto b = predict_one(moved, s);
  DecouplingResult r;
  r.force_change = (a.forces - b.forces).cwiseAbs().maxCoeff();
  r.energy_change = std::abs(a.energy(0) - b.energy(0));
  return r;
}

DecouplingResult verify_additive_decoupling(const Model& model, const AtomicStructure& s, double delta_norm,
                                            Rng& rng) {
  const auto idx = composition_parameters(model);
  const auto count = static_cast<Eigen::Index>(model.params().scalar_count(idx));
  // Random direction at 45 degrees to dE/dtheta_cf, so the energy moves by a
  // predictable amount; forces must not move for any direction.
  const Eigen::VectorXd r = gaussian(rng, count, 1);
  const Eigen::VectorXd g = energy_jacobian(model, s, idx);
  Eigen::VectorXd d = r / r.norm();
  if (g.norm() > 0.0) d += g / g.norm();
  d *= delta_norm / d.norm();
  return verify_additive_decoupling(model, s, d);
}

RankBoundResult verify_rank_bound(const RankBoundOptions& o, Rng& rng) {
  if (o.d_c < 1 || o.d_g < 1 || o.m < 1) throw std::invalid_argument("rank bound dimensions must be positive");
  Eigen::MatrixXd wc = o.rank_c > 0 ? Eigen::MatrixXd(gaussian(rng, o.m, o.rank_c) * gaussian(rng, o.rank_c, o.d_c))
                                    : gaussian(rng, o.m, o.d_c);
  const Eigen::MatrixXd wg = gaussian(rng, o.m, o.d_g);
  const Eigen::VectorXd v = gaussian(rng, o.m, 1);
  const Eigen::VectorXd b = gaussian(rng, o.m, 1);
  const Eigen::VectorXd hc = gaussian(rng, o.d_c, 1);
  const Eigen::VectorXd hg = gaussian(rng, o.d_g, 1);
  const bool silu = o.activation == Activation::silu;

  // Closed form W_c^T Diag(v * sigma''(a)) W_g.
  const Eigen::VectorXd a = wc * hc + wg * hg + b;
  Eigen::VectorXd d2(o.m);
  for (int i = 0; i < o.m; ++i) {
    const double sg = 1.0 / (1.0 + std::exp(-a(i)));
    d2(i) = silu ? v(i) * sg * (1.0 - sg) * (2.0 + a(i) * (1.0 - 2.0 * sg)) : 0.0;
  }
  RankBoundResult r;
  r.cross_hessian = wc.transpose() * d2.asDiagonal() * wg;

  // Oracle: central differences in h_g of the autodiff gradient in h_c.
  const ad::Var wct = ad::constant(wc.transpose()), wgt = ad::constant(wg.transpose());
  const ad::Var vv = ad::constant(v), bb = ad::constant(b.transpose());
  auto grad_c = [&](const Eigen::VectorXd& g) {
    const ad::Var c(ad::Matrix(hc.transpose()), true);
    const ad::Var pre = ad::add(ad::add(ad::matmul(c, wct), ad::matmul(ad::constant(g.transpose()), wgt)), bb);
    const ad::Var e = ad::matmul(silu ? ad::silu(pre) : pre, vv);
    const std::vector<ad::Var> wrt{c};
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(ad::grad(e, wrt).front().value().data(), o.d_c));
  };
  const double h = 1e-4;
  Eigen::MatrixXd fd(o.d_c, o.d_g);
  for (int j = 0; j < o.d_g; ++j) {
    Eigen::VectorXd p = hg, q = hg;
    p(j) += h;
    q(j) -= h;
    fd.col(j) = (grad_c(p) - grad_c(q)) / (2.0 * h);
  }
  r.fd_discrepancy = relative(fd, r.cross_hessian);
  r.max_abs = r.cross_hessian.cwiseAbs().maxCoeff();
  r.rank = numerical_rank(r.cross_hessian);
  r.rank_wc = numerical_rank(wc);
  r.rank_wg = numerical_rank(wg);
  r.bound = std::min({r.rank_wc, r.rank_wg, o.m});
  return r;
}

StackedRankResult verify_stacked_rank(const Model& model, const AtomicStructure& s, Rng& rng, double step) {
  const auto& hidden = model.config().heads.energy_hidden;
  if (hidden.size() != 1 || model.config().heads.additive) {
    throw std::invalid_argument("stacked rank check needs a concatenated one-hidden-layer energy head");
  }
  const auto idx = model.component_parameters("comp");
  // Rows 3k+a: (d2E / dtheta_comp dx_k)^T.
  const Eigen::MatrixXd stacked = mixed_hessian_autodiff(model, s, idx).transpose();
  StackedRankResult r;
  r.width = hidden.front();
  r.species = static_cast<int>(element_set(s).size());
  r.bound = std::min<int>(r.width * r.species, static_cast<int>(stacked.rows()));
  r.dimension = stacked.cols();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(stacked, Eigen::ComputeThinV);
  r.singular_values = svd.singularValues();
  r.rank = numerical_rank(stacked);
  r.null_dimension = r.dimension - r.rank;

  // First-order force change at `step`, by central differences.
  const Eigen::VectorXd base = model.params().flatten(idx);
  auto force_change = [&](const Eigen::VectorXd& u) {
    Model p = model.clone(), q = model.clone();
    p.params().assign(idx, base + step * u);
    q.params().assign(idx, base - step * u);
    const ad::Matrix df = (predict_one(p, s).forces - predict_one(q, s).forces) / 2.0;
    return df.cwiseAbs().maxCoeff();
  };
  const Eigen::MatrixXd v = svd.matrixV();
  Eigen::VectorXd null_dir = gaussian(rng, r.dimension, 1);
  if (r.rank > 0) {
    const auto basis = v.leftCols(r.rank);
    null_dir -= basis * (basis.transpose() * null_dir);
  }
  null_dir.normalize();
  r.null_change = force_change(null_dir);
  if (r.rank > 0) {
    r.top_change = force_change(v.col(0));
    r.ratio = r.null_change > 0.0 ? r.top_change / r.null_change : std::numeric_limits<double>::infinity();
  }
  return r;
}

double verify_commutation(const Model& model, const AtomicStructure& s, double step) {
  const auto params = all_parameters(model);
  return relative(mixed_hessian_fd(model, s, params, step), mixed_hessian_autodiff(model, s, params));
}

ModelConfig suite_model_config(int m, bool additive) {
  ModelConfig c;
  c.comp.d_model = 8;
  c.comp.layers = 1;
  c.comp.heads = 2;
  c.comp.d_ff = 16;
  c.comp.dropout = 0.0;
  c.structure.d_model = 8;
  c.structure.radial_count = 4;
  c.structure.mixed_channels = 3;
  c.structure.lmax = 2;
  c.structure.mlp_layers = 1;
  c.structure.mp_layers = 1;
  c.structure.r_cut = 4.0;
  c.interaction.d_model = 8;
  c.interaction.layers = 1;
  c.heads.energy_hidden = {m};
  c.heads.pair_hidden = {8};
  c.heads.mask_hidden = {8};
  c.heads.additive = additive;
  c.graph_cutoff = 4.0;
  c.max_neighbors = 32;
  return c;
}

CouplingReport run_suite(const SuiteOptions& o) {
  if (o.trials < 1) throw std::invalid_argument("trials must be positive");
  Rng rng(o.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<int> elements{1, 6, 7, 8, 14, 26};

  double coupling = 0.0, coupling_ad = 0.0, energy_only = 0.0, perfect = 0.0, commute = 0.0;
  double add_force = 0.0, add_energy = std::numeric_limits<double>::infinity(), add_zero = 0.0, full_force = 0.0;
  double rb_fd = 0.0, rb_margin = -1e9, rb_deficient = -1e9, rb_linear = 0.0;
  double st_margin = -1e9, st_null_margin = std::numeric_limits<double>::infinity(), st_null = 0.0;
  double st_ratio = std::numeric_limits<double>::infinity(), st_zero = 0.0, st_multi = -1e9;
  nlohmann::json ranks = nlohmann::json::array();

  for (int t = 0; t < o.trials; ++t) {
    const int m = 1 + t % 8;
    const std::uint64_t model_seed = rng();
    const int n = 3 + t % 3;
    const AtomicStructure mixed = random_structure(rng, n, elements);
    AtomicStructure mono = mixed;
    std::fill(mono.species.begin(), mono.species.end(), elements[rng() % elements.size()]);

    const Model model(suite_model_config(m), model_seed);
    const auto pred = predict_one(model, mixed);
    Targets targets{pred.energy(0) + (u(rng) - 0.5), pred.forces + gaussian(rng, n, 3) * 0.3};
    const double lambda = 0.1 + 9.9 * u(rng);
    coupling = std::max(coupling, verify_grad_coupling(model, mixed, targets, lambda).discrepancy);
    coupling_ad = std::max(coupling_ad,
                           verify_grad_coupling(model, mixed, targets, lambda, HessianMethod::autodiff).discrepancy);
    energy_only = std::max(energy_only, verify_grad_coupling(model, mixed, targets, 0.0).discrepancy);
    const auto exact = verify_grad_coupling(model, mixed, {pred.energy(0), pred.forces}, lambda);
    perfect = std::max({perfect, exact.autodiff_norm, exact.formula_norm});
    commute = std::max(commute, verify_commutation(model, mixed));

    const Model additive(suite_model_config(m, true), model_seed);
    const auto dec = verify_additive_decoupling(additive, mixed, 1e-2, rng);
    add_force = std::max(add_force, dec.force_change);
    add_energy = std::min(add_energy, dec.energy_change);
    const auto zero = verify_additive_decoupling(
        additive, mixed, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(
                             additive.params().scalar_count(composition_parameters(additive)))));
    add_zero = std::max({add_zero, zero.force_change, zero.energy_change});
    full_force = std::max(full_force, verify_additive_decoupling(model, mixed, 1e-2, rng).force_change);

    RankBoundOptions ro;
    ro.m = m;
    ro.d_c = 3 + static_cast<int>(rng() % 6);
    ro.d_g = 3 + static_cast<int>(rng() % 6);
    const auto rb = verify_rank_bound(ro, rng);
    rb_fd = std::max(rb_fd, rb.fd_discrepancy);
    rb_margin = std::max(rb_margin, static_cast<double>(rb.rank - rb.bound));
    ro.rank_c = 2;
    ro.d_c = 6;
    const auto rd = verify_rank_bound(ro, rng);
    rb_fd = std::max(rb_fd, rd.fd_discrepancy);
    rb_deficient = std::max(rb_deficient, static_cast<double>(rd.rank - std::min(2, m)));
    ro.rank_c = -1;
    ro.activation = Activation::linear;
    rb_linear = std::max(rb_linear, verify_rank_bound(ro, rng).max_abs);

    const auto st = verify_stacked_rank(model, mono, rng);
    st_margin = std::max(st_margin, static_cast<double>(st.rank - m));
    st_null_margin = std::min(st_null_margin, static_cast<double>(st.null_dimension - (st.dimension - m)));
    st_null = std::max(st_null, st.null_change);
    if (st.rank > 0) st_ratio = std::min(st_ratio, st.ratio);
    ranks.push_back({{"trial", t}, {"m", m}, {"rank", st.rank}, {"dimension", st.dimension}});
    const auto sm = verify_stacked_rank(model, mixed, rng);
    st_multi = std::max(st_multi, static_cast<double>(sm.rank - sm.bound));

    Model blind = model.clone();
    const auto sl = blind.slices();
    blind.params().value(blind.params().index_of("head.energy.0.weight")).middleRows(sl.comp_offset, sl.comp_width).setZero();
    st_zero = std::max(st_zero, static_cast<double>(verify_stacked_rank(blind, mono, rng).rank));
  }

  const nlohmann::json trials{{"trials", o.trials}, {"seed", o.seed}};
  CouplingReport r;
  r.checks.push_back(make_check("grad_coupling", coupling, "<=", 1e-3, trials));
  r.checks.push_back(make_check("grad_coupling_autodiff_hessian", coupling_ad, "<=", 1e-6, trials));
  r.checks.push_back(make_check("grad_coupling_energy_only", energy_only, "<=", 1e-6, trials));
  r.checks.push_back(make_check("grad_coupling_perfect_prediction", perfect, "<=", 1e-12, trials));
  r.checks.push_back(make_check("mixed_partials_commute", commute, "<=", 1e-4, trials));
  r.checks.push_back(make_check("additive_force_change", add_force, "<=", 1e-8, trials));
  r.checks.push_back(make_check("additive_energy_change", add_energy, ">=", 1e-3, trials));
  r.checks.push_back(make_check("additive_zero_delta", add_zero, "<=", 0.0, trials));
  r.checks.push_back(make_check("full_head_force_change", full_force, "report", 0.0, trials));
  r.checks.push_back(make_check("rank_bound_fd", rb_fd, "<=", 1e-4, trials));
  r.checks.push_back(make_check("rank_bound", rb_margin, "<=", 0.0, trials));
  r.checks.push_back(make_check("rank_bound_deficient_wc", rb_deficient, "<=", 0.0, trials));
  r.checks.push_back(make_check("rank_bound_linear_activation", rb_linear, "<=", 0.0, trials));
  r.checks.push_back(make_check("stacked_rank", st_margin, "<=", 0.0, {{"trials", ranks}}));
  r.checks.push_back(make_check("stacked_null_dimension", st_null_margin, ">=", 0.0, trials));
  r.checks.push_back(make_check("stacked_null_force_change", st_null, "<=", 1e-6, trials));
  r.checks.push_back(make_check("stacked_top_null_ratio", st_ratio, ">=", 1e3, trials));
  r.checks.push_back(make_check("stacked_rank_multi_species", st_multi, "<=", 0.0, trials));
  r.checks.push_back(make_check("stacked_rank_zero_comp_head", st_zero, "<=", 0.0, trials));
  return r;
}

}  // namespace tristream::theory
