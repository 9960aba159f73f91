#include "tristream/ssl.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tristream {

void AugmentationConfig::validate() const {
  if (noise_min < 0.0 || noise_max < noise_min) throw std::invalid_argument("bad noise sigma range");
  if (mask_probability < 0.0 || mask_probability > 1.0) throw std::invalid_argument("mask probability outside [0, 1]");
  if (rotation_max_degrees < 0.0 || rotation_max_degrees > 180.0) {
    throw std::invalid_argument("rotation angle outside [0, 180]");
  }
  if (cell_sigma_min < 0.0 || cell_sigma_max < cell_sigma_min) throw std::invalid_argument("bad cell sigma range");
  if (!(radius_min > 0.0) || radius_max < radius_min) throw std::invalid_argument("bad graph radius range");
  if (neighbors_min < 1 || neighbors_max < neighbors_min) throw std::invalid_argument("bad neighbor range");
  if (max_augmentations < 0) throw std::invalid_argument("max_augmentations must be >= 0");
  if (views < 2) throw std::invalid_argument("need at least two views");
}

void SslWeights::validate() const {
  for (double w : {denoise, mask, lejepa_node, lejepa_graph, sigreg}) {
    if (!(w >= 0.0)) throw std::invalid_argument("SSL weights must be non-negative");
  }
  if (sigreg > 1.0) throw std::invalid_argument("sigreg mixing weight must be in [0, 1]");
  if (slices < 1 || quadrature < 2 || !(t_max > 0.0)) throw std::invalid_argument("bad SIGReg constants");
}

BatchEntry View::entry() const { return {structure, build_graph(structure, graph_cutoff, max_neighbors), masked}; }

AtomicStructure corrupt(const AtomicStructure& clean, const View& view) {
  AtomicStructure s = clean;
  if (s.periodic && s.cell) {
    s.positions = s.positions * view.strain;
    s.cell = *s.cell * view.strain;
  }
  s = rotated(s, view.rotation);
  s.positions += view.noise;
  return s;
}

ViewPair sample_views(const AtomicStructure& structure, const AugmentationConfig& config, const GraphDefaults& graph,
                      Rng& rng) {
  config.validate();
  structure.validate();
  const auto n = static_cast<Eigen::Index>(structure.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  ViewPair pair;
  for (int v = 0; v < config.views; ++v) {
    View view;
    view.graph_cutoff = graph.cutoff;
    view.max_neighbors = graph.max_neighbors;

    const double sigma = config.noise_min + (config.noise_max - config.noise_min) * unit(rng);
    view.noise.resize(n, 3);
    for (Eigen::Index i = 0; i < view.noise.size(); ++i) view.noise.data()[i] = sigma * normal(rng);
    view.applied.push_back("noise");

    // Draw everything up front so the number of draws never depends on the outcome.
    std::vector<bool> mask(structure.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = unit(rng) < config.mask_probability;
    Eigen::Vector3d axis(normal(rng), normal(rng), normal(rng));
    const double angle = config.rotation_max_degrees * std::numbers::pi / 180.0 * unit(rng);
    const double radius = config.radius_min + (config.radius_max - config.radius_min) * unit(rng);
    const int neighbors = std::uniform_int_distribution<int>(config.neighbors_min, config.neighbors_max)(rng);
    const double cell_sigma = config.cell_sigma_min + (config.cell_sigma_max - config.cell_sigma_min) * unit(rng);
    Mat3 eps;
    for (int a = 0; a < 3; ++a)
      for (int b = a; b < 3; ++b) eps(a, b) = eps(b, a) = cell_sigma * normal(rng);
    const bool take_graph = unit(rng) < 0.5;
    const bool take_cell = unit(rng) < 0.5;
    const bool graph_first = unit(rng) < 0.5;

    std::vector<std::string> wanted;
    if (config.mask_probability > 0.0) wanted.push_back("mask");
    if (config.rotation_max_degrees > 0.0) wanted.push_back("rotation");
    std::vector<std::string> optional;
    if (take_graph) optional.push_back("graph");
    if (take_cell && structure.periodic) optional.push_back("cell");
    if (!graph_first) std::reverse(optional.begin(), optional.end());
    wanted.insert(wanted.end(), optional.begin(), optional.end());
    if (static_cast<int>(wanted.size()) > config.max_augmentations) wanted.resize(static_cast<std::size_t>(config.max_augmentations));

    view.masked.assign(structure.size(), false);
    for (const auto& name : wanted) {
      if (name == "mask") {
        view.masked = mask;
      } else if (name == "rotation") {
        if (axis.norm() > 0.0) view.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
      } else if (name == "graph") {
        view.graph_cutoff = radius;
        view.max_neighbors = neighbors;
      } else if (name == "cell") {
        view.strain = Mat3::Identity() + eps;
      }
      view.applied.push_back(name);
    }
    view.structure = corrupt(structure, view);
    pair.views.push_back(std::move(view));
  }
  return pair;
}

ad::Var denoise_loss(const ad::Var& predicted, const ad::Matrix& noise) {
  if (predicted.rows() != noise.rows() || predicted.cols() != noise.cols()) {
    throw std::invalid_argument("noise prediction and target differ in shape");
  }
  return ad::sum(ad::square(ad::sub(predicted, ad::constant(noise))));
}

ad::Var mask_loss(const ad::Var& logits, const std::vector<int>& species, const std::vector<bool>& masked) {
  if (static_cast<std::size_t>(logits.rows()) != species.size() || species.size() != masked.size()) {
    throw std::invalid_argument("mask loss inputs differ in length");
  }
  std::vector<int> rows;
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (masked[i]) rows.push_back(static_cast<int>(i));
  if (rows.empty()) return ad::scalar(0.0);
  ad::Matrix pick = ad::Matrix::Zero(static_cast<ad::Index>(rows.size()), logits.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int z = species[static_cast<std::size_t>(rows[k])];
    if (z < 1 || z > logits.cols()) throw DomainError("species outside the mask-head classes");
    pick(static_cast<ad::Index>(k), z - 1) = 1.0;
  }
  const ad::Var picked = ad::gather_rows(ad::log_softmax_rows(logits), ad::make_index(std::move(rows)));
  return ad::neg(ad::sum(ad::mul(picked, ad::constant(std::move(pick)))));
}

namespace {

struct Quadrature {
  std::vector<double> t, coef;  // coef_j = 2 w_j exp(-t_j^2 / 2)
  double dt;
};

Quadrature quadrature(double t_max, int points) {
  Quadrature q;
  q.dt = t_max / (points - 1);
  for (int j = 0; j < points; ++j) {
    const double t = j * q.dt;
    const double w = (j == 0 || j == points - 1) ? 0.5 * q.dt : q.dt;
    q.t.push_back(t);
    q.coef.push_back(2.0 * w * std::exp(-0.5 * t * t));
  }
  return q;
}

// Column sums of cos(t_j z) and sin(t_j z) for every node, using the angle
// addition recurrence from a single sincos per entry.
void characteristic_sums(const ad::Matrix& z, const Quadrature& q, ad::Matrix& c, ad::Matrix& s) {
  const int p = static_cast<int>(q.t.size());
  c = ad::Matrix::Zero(p, z.cols());
  s = ad::Matrix::Zero(p, z.cols());
  for (ad::Index i = 0; i < z.rows(); ++i) {
    for (ad::Index m = 0; m < z.cols(); ++m) {
      const double a = q.dt * z(i, m);
      const double ca = std::cos(a), sa = std::sin(a);
      double cj = 1.0, sj = 0.0;
      for (int j = 0; j < p; ++j) {
        c(j, m) += cj;
        s(j, m) += sj;
        const double cn = cj * ca - sj * sa;
        sj = sj * ca + cj * sa;
        cj = cn;
      }
    }
  }
}

}  // namespace

ad::Var epps_pulley(const ad::Var& projected, double t_max, int points) {
  if (points < 2 || !(t_max > 0.0)) throw std::invalid_argument("bad quadrature for the Epps-Pulley statistic");
  const ad::Matrix& z = projected.value();
  const double n = static_cast<double>(z.rows());
  if (z.rows() < 1) throw std::invalid_argument("Epps-Pulley statistic needs samples");
  const Quadrature q = quadrature(t_max, points);
  ad::Matrix c, s;
  characteristic_sums(z, q, c, s);
  c /= n;
  s /= n;
  ad::Matrix stat = ad::Matrix::Zero(1, z.cols());
  for (int j = 0; j < points; ++j) {
    const double phi = std::exp(-0.5 * q.t[static_cast<std::size_t>(j)] * q.t[static_cast<std::size_t>(j)]);
    stat.row(0) += q.coef[static_cast<std::size_t>(j)] *
                   ((c.row(j).array() - phi).square() + s.row(j).array().square()).matrix();
  }
  stat *= n;

  auto backward = [q, c, s, t_max, points](const ad::BackwardContext& ctx) -> std::vector<ad::Var> {
    const ad::Matrix& zz = ctx.inputs[0].value();
    const ad::Matrix& g = ctx.grad.value();
    // d stat_m / d z_im = 2 sum_j coef_j t_j (s_jm cos(t_j z) - (c_jm - phi_j) sin(t_j z))
    ad::Matrix a(points, zz.cols()), b(points, zz.cols());
    for (int j = 0; j < points; ++j) {
      const double t = q.t[static_cast<std::size_t>(j)];
      const double phi = std::exp(-0.5 * t * t);
      const double k = 2.0 * q.coef[static_cast<std::size_t>(j)] * t;
      a.row(j) = k * s.row(j).cwiseProduct(g.row(0));
      b.row(j) = -k * (c.row(j).array() - phi).matrix().cwiseProduct(g.row(0));
    }
    ad::Matrix dz(zz.rows(), zz.cols());
    for (ad::Index i = 0; i < zz.rows(); ++i) {
      for (ad::Index m = 0; m < zz.cols(); ++m) {
        const double ang = q.dt * zz(i, m);
        const double ca = std::cos(ang), sa = std::sin(ang);
        double cj = 1.0, sj = 0.0, acc = 0.0;
        for (int j = 0; j < points; ++j) {
          acc += a(j, m) * cj + b(j, m) * sj;
          const double cn = cj * ca - sj * sa;
          sj = sj * ca + cj * sa;
          cj = cn;
        }
        dz(i, m) = acc;
      }
    }
    (void)t_max;
    return {ad::make_op(std::move(dz), {ctx.inputs[0], ctx.grad},
                        [](const ad::BackwardContext&) -> std::vector<ad::Var> {
                          throw ad::UnsupportedOperation("second derivative of the Epps-Pulley statistic");
                        },
                        "epps_pulley_grad")};
  };
  return ad::make_op(std::move(stat), {projected}, backward, "epps_pulley");
}

ad::Var sigreg(const ad::Var& embeddings, int slices, double t_max, int points, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Matrix dirs(embeddings.cols(), slices);
  for (int m = 0; m < slices; ++m) {
    for (ad::Index k = 0; k < dirs.rows(); ++k) dirs(k, m) = normal(rng);
    dirs.col(m).normalize();
  }
  return ad::mean(epps_pulley(ad::matmul(embeddings, ad::constant(std::move(dirs))), t_max, points));
}

LejepaTerms lejepa_loss(const std::vector<ad::Var>& nodes, const std::vector<ad::Var>& pooled, int num_structures,
                        const SslWeights& weights, Rng& rng) {
  if (nodes.size() < 2 || nodes.size() != pooled.size()) throw std::invalid_argument("LeJEPA needs matching views");
  for (std::size_t v = 1; v < nodes.size(); ++v) {
    if (nodes[v].rows() != nodes[0].rows() || pooled[v].rows() != pooled[0].rows()) {
      throw std::invalid_argument("views disagree on node or structure count");
    }
  }
  LejepaTerms t;
  const double inv_s = 1.0 / num_structures;
  const double inv_pairs = 2.0 / static_cast<double>(nodes.size() * (nodes.size() - 1));
  ad::Var node_pred = ad::scalar(0.0), graph_pred = ad::scalar(0.0);
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    for (std::size_t b = a + 1; b < nodes.size(); ++b) {
      node_pred = ad::add(node_pred, ad::sum(ad::square(ad::sub(nodes[a], nodes[b]))));
      graph_pred = ad::add(graph_pred, ad::sum(ad::square(ad::sub(pooled[a], pooled[b]))));
    }
  }
  t.node_prediction = ad::scale(node_pred, inv_s * inv_pairs);
  t.graph_prediction = ad::scale(graph_pred, inv_s * inv_pairs);

  const double lam = weights.sigreg;
  ad::Var node_term = ad::scale(t.node_prediction, 1.0 - lam);
  ad::Var graph_term = ad::scale(t.graph_prediction, 1.0 - lam);
  t.sigreg_skipped = num_structures < 2;
  if (!t.sigreg_skipped) {
    // Independent projections for the node and graph statistics.
    t.node_sigreg = sigreg(ad::concat_rows(nodes), weights.slices, weights.t_max, weights.quadrature, rng);
    t.graph_sigreg = sigreg(ad::concat_rows(pooled), weights.slices, weights.t_max, weights.quadrature, rng);
    node_term = ad::add(node_term, ad::scale(t.node_sigreg, lam));
    graph_term = ad::add(graph_term, ad::scale(t.graph_sigreg, lam));
  }
  t.total = ad::add(ad::scale(node_term, weights.lejepa_node), ad::scale(graph_term, weights.lejepa_graph));
  return t;
}

SslLoss combined_loss(const Model& model, const std::vector<ViewPair>& pairs, const SslWeights& weights, Rng& rng,
                      bool training) {
  weights.validate();
  if (pairs.empty()) throw std::invalid_argument("SSL loss needs at least one structure");
  const std::size_t num_views = pairs.front().views.size();
  const int s = static_cast<int>(pairs.size());
  std::vector<ad::Var> nodes, pooled;
  ad::Var denoise = ad::scalar(0.0), mask = ad::scalar(0.0);
  for (std::size_t v = 0; v < num_views; ++v) {
    std::vector<BatchEntry> entries;
    std::vector<ad::Matrix> noise;
    for (const auto& p : pairs) {
      if (p.views.size() != num_views) throw std::invalid_argument("view pairs differ in view count");
      entries.push_back(p.views[v].entry());
      noise.push_back(p.views[v].noise);
    }
    const Batch batch = Batch::assemble(entries);
    ad::Matrix target(batch.num_nodes, 3);
    for (std::size_t k = 0; k < noise.size(); ++k) target.middleRows(batch.node_offset[k], noise[k].rows()) = noise[k];
    Model::Options opt;
    opt.training = training;
    opt.rng = &rng;
    opt.energy = false;
    opt.noise = weights.denoise > 0.0;
    opt.mask_logits = weights.mask > 0.0;
    const auto out = model.forward(batch, opt);
    if (opt.noise) denoise = ad::add(denoise, denoise_loss(out.noise, target));
    if (opt.mask_logits) mask = ad::add(mask, mask_loss(out.mask_logits, batch.species, batch.masked));
    nodes.push_back(out.embeddings.fused);
    pooled.push_back(out.embeddings.pooled_fused);
  }
  const double per = 1.0 / (static_cast<double>(s) * static_cast<double>(num_views));
  denoise = ad::scale(denoise, per);
  mask = ad::scale(mask, per);
  const auto lj = lejepa_loss(nodes, pooled, s, weights, rng);

  SslLoss loss;
  loss.total = ad::add(ad::add(ad::scale(denoise, weights.denoise), ad::scale(mask, weights.mask)), lj.total);
  loss.sigreg_skipped = lj.sigreg_skipped;
  loss.breakdown["denoise"] = denoise.item();
  loss.breakdown["mask"] = mask.item();
  loss.breakdown["node_prediction"] = lj.node_prediction.item();
  loss.breakdown["graph_prediction"] = lj.graph_prediction.item();
  loss.breakdown["node_sigreg"] = lj.sigreg_skipped ? 0.0 : lj.node_sigreg.item();
  loss.breakdown["graph_sigreg"] = lj.sigreg_skipped ? 0.0 : lj.graph_sigreg.item();
  loss.breakdown["lejepa"] = lj.total.item();
  loss.breakdown["total"] = loss.total.item();
  return loss;
}

}  // namespace tristream
