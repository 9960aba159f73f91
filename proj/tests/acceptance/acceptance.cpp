// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "support/fixtures.hpp"
#include "support/numeric.hpp"
#include "tristream/analysis.hpp"
#include "tristream/comp_stream.hpp"
#include "tristream/ssl.hpp"
#include "tristream/struct_stream.hpp"
#include "tristream/synthetic.hpp"
#include "tristream/theory.hpp"
#include "tristream/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

using namespace tristream;
using namespace tristream::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string summary;
  nlohmann::json measured = nlohmann::json::object();
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string sci(double v) {
  std::ostringstream s;
  s << std::setprecision(3) << v;
  return s.str();
}

double max_rel(const ad::Matrix& a, const ad::Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// Desk-scale model shared by the training criteria.
ModelConfig desk_config() {
  ModelConfig c;
  c.comp.d_model = 32;
  c.comp.layers = 2;
  c.comp.heads = 4;
  c.comp.d_ff = 64;
  c.comp.dropout = 0.0;
  c.structure.d_model = 32;
  c.structure.radial_count = 6;
  c.structure.mixed_channels = 4;
  c.structure.lmax = 3;
  c.structure.mlp_layers = 2;
  c.structure.mp_layers = 1;
  c.structure.r_cut = 5.0;
  c.interaction.d_model = 32;
  c.interaction.layers = 2;
  c.heads.energy_hidden = {32};
  c.heads.pair_hidden = {32};
  c.heads.mask_hidden = {32};
  c.graph_cutoff = 5.0;
  c.max_neighbors = 32;
  return c;
}

AtomicStructure on_axis(const std::vector<double>& zs) {
  AtomicStructure s;
  s.positions.resize(static_cast<Eigen::Index>(zs.size()), 3);
  for (std::size_t i = 0; i < zs.size(); ++i) {
    s.positions.row(static_cast<Eigen::Index>(i)) = Eigen::RowVector3d(0.0, 0.0, zs[i]);
    s.species.push_back(6);
  }
  return s;
}

// ---------------------------------------------------------------------------

Outcome count_weighted_equivalence() {
  std::mt19937_64 rng(1001);
  ParameterStore store;
  CompStreamConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.d_ff = 32;
  cfg.dropout = 0.0;
  const auto cs = CompStream::create(store, cfg, rng);
  std::uniform_int_distribution<int> tcount(1, 5), ccount(1, 6), zdist(1, 100);
  std::normal_distribution<double> n;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::set<int> zs;
    const int t = tcount(rng);
    while (static_cast<int>(zs.size()) < t) zs.insert(zdist(rng));
    Composition c;
    for (int z : zs) c.tokens.push_back({z, ccount(rng)});
    std::vector<int> counts;
    std::vector<ad::Index> expanded_rows, first_row;
    for (std::size_t k = 0; k < c.tokens.size(); ++k) {
      counts.push_back(c.tokens[k].count);
      first_row.push_back(static_cast<ad::Index>(expanded_rows.size()));
      for (int r = 0; r < c.tokens[k].count; ++r) expanded_rows.push_back(static_cast<ad::Index>(k));
    }
    const auto T = static_cast<ad::Index>(counts.size());
    const auto M = static_cast<ad::Index>(expanded_rows.size());

    // Weights on raw logits against the softmax over the expanded multiset.
    ad::Matrix logits(T, T);
    for (ad::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    const ad::Matrix w = count_weighted_attention(logits, counts);
    for (ad::Index q = 0; q < T; ++q) {
      double denom = 0.0;
      for (auto s : expanded_rows) denom += std::exp(logits(q, s));
      for (ad::Index s = 0; s < T; ++s) {
        double num = 0.0;
        for (auto u : expanded_rows)
          if (u == s) num += std::exp(logits(q, u));
        worst = std::max(worst, std::abs(w(q, s) - num / denom));
      }
    }

    // Attention outputs of the stream's own blocks, every head and layer input.
    const ad::Matrix u = cs.embed(store, CompTokens::from(c)).value();
    std::vector<double> bias;
    for (int k : counts) bias.push_back(std::log(static_cast<double>(k)));
    ad::Matrix expanded(M, u.cols());
    for (ad::Index r = 0; r < M; ++r) expanded.row(r) = u.row(expanded_rows[static_cast<std::size_t>(r)]);
    for (int layer = 0; layer < cfg.layers; ++layer) {
      const auto compressed = cs.probe_attention(store, u, bias, layer);
      const auto full = cs.probe_attention(store, expanded, std::vector<double>(static_cast<std::size_t>(M), 0.0), layer);
      for (std::size_t h = 0; h < full.outputs.size(); ++h)
        for (ad::Index k = 0; k < T; ++k)
          worst = std::max(worst, (full.outputs[h].row(first_row[static_cast<std::size_t>(k)]) -
                                   compressed.outputs[h].row(k))
                                      .cwiseAbs()
                                      .maxCoeff());
    }
  }
  Outcome o;
  o.passed = worst <= 1e-10;
  o.summary = "100 instances, max abs deviation " + sci(worst) + " (<= 1e-10)";
  o.measured = {{"max_abs_deviation", worst}};
  return o;
}

Outcome structure_invariance() {
  ModelConfig cfg = desk_config();
  cfg.structure = StructStreamConfig{};  // default descriptor settings
  cfg.structure.d_model = 32;
  cfg.graph_cutoff = cfg.structure.r_cut;
  cfg.max_neighbors = 120;
  const Model model(cfg, 1002);
  std::mt19937_64 rng(1002);
  Model::Options opt;
  opt.energy = false;
  auto h_struct = [&](const AtomicStructure& s) {
    return ad::Matrix(model.forward(batch_of(s, cfg), opt).embeddings.structure.value());
  };
  double worst_rot = 0.0, worst_trans = 0.0;
  bool relabel_bitwise = true;
  std::uniform_int_distribution<int> z(1, 100);
  std::uniform_real_distribution<double> shift(-5.0, 5.0);
  for (int k = 0; k < 50; ++k) {
    const AtomicStructure s = k % 2 ? random_crystal(rng, 3 + k % 4, 4.2, 100) : random_cluster(rng, 4 + k % 6, 3.2, 100);
    const ad::Matrix ref = h_struct(s);
    for (int r = 0; r < 10; ++r) {
      worst_rot = std::max(worst_rot, max_rel(h_struct(rotated(s, random_rotation(rng))), ref));
      worst_trans = std::max(worst_trans, max_rel(h_struct(translated(s, Vec3(shift(rng), shift(rng), shift(rng)))), ref));
    }
    AtomicStructure relabeled = s;
    for (auto& zi : relabeled.species) zi = z(rng);
    relabel_bitwise = relabel_bitwise && (h_struct(relabeled) == ref);
  }
  Outcome o;
  o.passed = worst_rot <= 1e-6 && worst_trans <= 1e-6 && relabel_bitwise;
  o.summary = "50 structures x 10 motions: rotation " + sci(worst_rot) + ", translation " + sci(worst_trans) +
              " (<= 1e-6 relative); species relabel " + (relabel_bitwise ? "bitwise identical" : "CHANGED");
  o.measured = {{"rotation", worst_rot}, {"translation", worst_trans}, {"relabel_bitwise", relabel_bitwise}};
  return o;
}

Outcome power_spectrum_closed_forms() {
  constexpr double kPi = std::numbers::pi;
  StructStreamConfig cfg;  // lmax 4, 8 mixed channels
  cfg.d_model = 16;
  ParameterStore store;
  Rng rng(1003);
  const auto stream = StructStream::create(store, cfg, rng);
  const int per = (cfg.lmax + 1) * (cfg.lmax + 1);
  double worst_spec = 0.0, worst_parity = 0.0, worst_m = 0.0;
  for (double r : {0.8, 1.7, 2.9, 4.1, 5.6}) {
    const auto s = on_axis({0.0, r});
    const Batch b = Batch::assemble(std::vector<const AtomicStructure*>{&s}, cfg.r_cut, 1000);
    const auto g = edge_geometry(ad::constant(b.positions), b, cfg.radial(), cfg.bank(), cfg.lmax);
    const ad::Matrix mixed = stream.mixed_radial(store, g).value();
    const ad::Matrix c = density_coefficients(ad::constant(mixed), g.harmonics, b.edge_center, b.num_nodes).value();
    const ad::Matrix p = power_spectrum(ad::constant(c), cfg.mixed_channels, cfg.lmax).value();
    for (int a = 0; a < cfg.mixed_channels; ++a)
      for (int l = 0; l <= cfg.lmax; ++l)
        for (int m = -l; m <= l; ++m)
          if (m != 0) worst_m = std::max(worst_m, std::abs(c(0, a * per + l * l + l + m)));
    int pair = 0;
    for (int a = 0; a < cfg.mixed_channels; ++a)
      for (int a2 = a; a2 < cfg.mixed_channels; ++a2, ++pair)
        for (int l = 0; l <= cfg.lmax; ++l)
          worst_spec = std::max(worst_spec, std::abs(p(0, pair * (cfg.lmax + 1) + l) -
                                                     mixed(0, a) * mixed(0, a2) * (2 * l + 1) / (4 * kPi)));

    const auto pm = on_axis({0.0, r, -r});
    StructStream::Trace t;
    const Batch bp = Batch::assemble(std::vector<const AtomicStructure*>{&pm}, cfg.r_cut, 1000);
    const auto gp = edge_geometry(ad::constant(bp.positions), bp, cfg.radial(), cfg.bank(), cfg.lmax);
    stream.forward(store, bp, gp, &t);
    const ad::Matrix cp = t.coefficients.value();
    for (int a = 0; a < cfg.mixed_channels; ++a)
      for (int l = 1; l <= cfg.lmax; l += 2)
        for (int m = -l; m <= l; ++m) worst_parity = std::max(worst_parity, std::abs(cp(0, a * per + l * l + l + m)));
  }
  Outcome o;
  o.passed = worst_spec <= 1e-10 && worst_parity <= 1e-10 && worst_m <= 1e-10;
  o.summary = "single +z neighbour spectrum error " + sci(worst_spec) + ", m != 0 coefficients " + sci(worst_m) +
              ", odd-l residue for +-z pair " + sci(worst_parity) + " (all <= 1e-10)";
  o.measured = {{"spectrum", worst_spec}, {"off_axis_m", worst_m}, {"odd_l_parity", worst_parity}};
  return o;
}

Outcome gradient_correctness() {
  const auto cfg = small_config();
  std::mt19937_64 rng(1004);
  double worst_param = 0.0, worst_force = 0.0, worst_sum = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 4; ++trial) {
    Model m(cfg, 1004 + static_cast<std::uint64_t>(trial));
    const auto s = trial == 3 ? random_crystal(rng, 4, 4.0) : random_cluster(rng, 4 + trial, 2.8);
    const Batch b = batch_of(s, cfg);

    const ad::Matrix f = m.predict(b, ForceMode::conservative).forces;
    auto e_of = [&](const ad::Matrix& x) {
      Batch moved = b;
      moved.positions = x;
      return m.forward(moved).energy.value().sum();
    };
    worst_force = std::max(worst_force, relative_error(f, -central_difference(e_of, b.positions, 1e-4)));
    worst_sum = std::max(worst_sum, f.colwise().sum().cwiseAbs().maxCoeff());

    // E + 0.5 |F - target|^2 reaches first and second derivatives of every parameter array.
    const ad::Matrix target = random_matrix(rng, b.positions.rows(), 3);
    auto loss = [&]() {
      const auto out = m.forward(b);
      const ad::Var fv = Model::conservative_forces(out, true);
      return ad::add(ad::sum(out.energy), ad::scale(ad::sum(ad::square(ad::sub(fv, ad::constant(target)))), 0.5));
    };
    const auto vars = m.params().vars();
    const auto grads = ad::grad(loss(), vars);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      ad::Matrix& w = m.params().value(i);
      for (int k = 0; k < 3; ++k) {
        const auto idx = std::min(static_cast<ad::Index>(u(rng) * static_cast<double>(w.size())), w.size() - 1);
        const double orig = w.data()[idx];
        const double h = 1e-5 * std::max(1.0, std::abs(orig));
        w.data()[idx] = orig + h;
        const double fp = loss().item();
        w.data()[idx] = orig - h;
        const double fm = loss().item();
        w.data()[idx] = orig;
        const double fd = (fp - fm) / (2 * h);
        const double an = grads[i].value().data()[idx];
        if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
        worst_param = std::max(worst_param, std::abs(an - fd) / std::max(std::abs(fd), 1e-3));
        ++checked;
      }
    }
  }
  Outcome o;
  o.passed = worst_param <= 1e-4 && worst_force <= 1e-4 && worst_sum <= 1e-8 && checked > 100;
  o.summary = std::to_string(checked) + " parameter entries, worst relative error " + sci(worst_param) +
              "; forces vs FD " + sci(worst_force) + " (<= 1e-4); |sum F| " + sci(worst_sum) + " eV/A (<= 1e-8)";
  o.measured = {{"parameter", worst_param}, {"forces", worst_force}, {"force_sum", worst_sum}, {"entries", checked}};
  return o;
}

Outcome theory_suite() {
  const auto report = theory::run_suite({7, 20});
  Outcome o;
  o.passed = report.passed();
  double coupling = 0, force_change = 0, energy_change = 0, ratio = 0;
  std::string failed;
  for (const auto& c : report.checks) {
    if (c.name == "grad_coupling") coupling = c.measured;
    if (c.name == "additive_force_change") force_change = c.measured;
    if (c.name == "additive_energy_change") energy_change = c.measured;
    if (c.name == "stacked_top_null_ratio") ratio = c.measured;
    if (!c.passed) failed += " " + c.name;
  }
  o.summary = "20 trials, " + std::to_string(report.checks.size()) + " checks; identity " + sci(coupling) +
              " (<= 1e-3), additive force change " + sci(force_change) + " (<= 1e-8) with energy change " +
              sci(energy_change) + ", top/null ratio " + sci(ratio) + " (>= 1e3)" +
              (failed.empty() ? "" : "; failed:" + failed);
  o.measured = report.to_json();
  return o;
}

Outcome ssl_closed_forms() {
  const auto cfg = small_config();
  std::mt19937_64 gen(1006);
  bool ok = true;
  std::ostringstream s;

  // Uniform mask head: zeroed head weights give identical logits on all 100 classes.
  Model uniform(cfg, 1006);
  for (auto i : uniform.params().indices_with_prefix("head.mask")) uniform.params().value(i).setZero();
  AugmentationConfig a;
  a.mask_probability = 0.5;
  Rng vr(3);
  const auto st = random_cluster(gen, 9, 3.5);
  const auto pair = sample_views(st, a, {cfg.graph_cutoff, cfg.max_neighbors}, vr);
  double mask_err = 0.0;
  std::size_t masked_total = 0;
  for (const auto& v : pair.views) {
    Model::Options opt;
    opt.mask_logits = true;
    opt.energy = false;
    const auto out = uniform.forward(Batch::assemble(std::vector<BatchEntry>{v.entry()}), opt);
    const auto masked = static_cast<std::size_t>(std::count(v.masked.begin(), v.masked.end(), true));
    masked_total += masked;
    mask_err = std::max(mask_err, std::abs(mask_loss(out.mask_logits, st.species, v.masked).item() -
                                           static_cast<double>(masked) * std::log(100.0)));
  }
  ok = ok && mask_err <= 1e-12 && masked_total > 0;
  s << "uniform mask head |M| ln 100 error " << sci(mask_err) << " over " << masked_total << " masked atoms";

  // Perfect denoiser: zero noise and a zeroed noise head.
  Model denoiser(cfg, 1007);
  for (auto i : denoiser.params().indices_with_prefix("head.noise")) denoiser.params().value(i).setZero();
  AugmentationConfig quiet;
  quiet.noise_min = quiet.noise_max = 0.0;
  Rng qr(4);
  std::vector<ViewPair> pairs;
  for (int k = 0; k < 3; ++k)
    pairs.push_back(sample_views(random_cluster(gen, 5, 3.0), quiet, {cfg.graph_cutoff, cfg.max_neighbors}, qr));
  SslWeights only_denoise;
  only_denoise.mask = only_denoise.lejepa_node = only_denoise.lejepa_graph = 0.0;
  Rng lr(5);
  const double denoise = combined_loss(denoiser, pairs, only_denoise, lr, false).total.item();
  ok = ok && denoise == 0.0;
  s << "; perfect denoiser " << sci(denoise);

  // Identical views: both prediction terms vanish.
  const ad::Matrix h = random_matrix(gen, 12, 8), p = random_matrix(gen, 3, 8);
  SslWeights w;
  w.slices = 64;
  Rng jr(6);
  const auto same = lejepa_loss({ad::constant(h), ad::constant(h)}, {ad::constant(p), ad::constant(p)}, 3, w, jr);
  const double pred = same.node_prediction.item() + same.graph_prediction.item();
  ok = ok && pred == 0.0;
  s << "; identical-view prediction " << sci(pred);

  // Gaussian against constant embeddings, at the default slice count.
  std::normal_distribution<double> n;
  ad::Matrix gauss(512, 32);
  for (ad::Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = n(gen);
  Rng r1(9), r2(9);
  const double g = sigreg(ad::constant(gauss), 1024, 3.0, 17, r1).item();
  const double c = sigreg(ad::constant(ad::Matrix::Constant(512, 32, 0.7)), 1024, 3.0, 17, r2).item();
  ok = ok && c >= 10.0 * g;
  s << "; SIGReg constant/gaussian " << sci(c / g) << " (>= 10)";

  Outcome o;
  o.passed = ok;
  o.summary = s.str();
  o.measured = {{"mask_error", mask_err}, {"denoise", denoise}, {"prediction", pred}, {"sigreg_ratio", c / g}};
  return o;
}

Outcome determinism(const fs::path& dir) {
  Rng dr(8);
  synthetic::PairDatasetOptions po;
  po.count = 24;
  po.max_atoms = 6;
  const auto data = synthetic::pair_potential_dataset(dr, po);
  PretrainConfig pc;
  pc.optimizer.steps = 8;
  pc.optimizer.warmup = 2;
  pc.optimizer.batch_size = 4;
  pc.weights.slices = 32;
  FinetuneConfig fc;
  fc.optimizer.steps = 8;
  fc.optimizer.warmup = 2;
  fc.optimizer.batch_size = 4;

  auto full_run = [&](const std::string& tag) {
    TrainState s(Model(small_config(), 77), 77);
    pretrain(s, data, pc);
    save_checkpoint(dir / (tag + ".pre"), s);
    finetune(s, data, fc);
    save_checkpoint(dir / (tag + ".ft"), s);
  };
  full_run("a");
  full_run("b");
  // Interrupted at step 5 of each stage (past the warmup), checkpointed and resumed.
  {
    TrainState s(Model(small_config(), 77), 77);
    pretrain(s, data, pc, {}, 5);
    save_checkpoint(dir / "c.mid", s);
    TrainState r = load_checkpoint(dir / "c.mid");
    pretrain(r, data, pc);
    save_checkpoint(dir / "c.pre", r);
    finetune(r, data, fc, {}, 5);
    save_checkpoint(dir / "c.fmid", r);
    TrainState q = load_checkpoint(dir / "c.fmid");
    finetune(q, data, fc);
    save_checkpoint(dir / "c.ft", q);
  }
  const bool pre = slurp(dir / "a.pre") == slurp(dir / "b.pre");
  const bool ft = slurp(dir / "a.ft") == slurp(dir / "b.ft");
  const bool resumed = slurp(dir / "a.pre") == slurp(dir / "c.pre") && slurp(dir / "a.ft") == slurp(dir / "c.ft");
  Outcome o;
  o.passed = pre && ft && resumed;
  o.summary = std::string("repeat pretrain checkpoint ") + (pre ? "identical" : "DIFFERS") + ", finetune checkpoint " +
              (ft ? "identical" : "DIFFERS") + ", resumed runs " + (resumed ? "identical" : "DIFFER");
  o.measured = {{"pretrain", pre}, {"finetune", ft}, {"resumed", resumed}};
  return o;
}

struct Shared {
  std::optional<analysis::EmbeddingIndex> corpus_index;
};

Outcome retrieval_semantics(Shared& shared, int steps, const fs::path& dir) {
  Rng rng(1008);
  const auto corpus = synthetic::retrieval_corpus(rng, {});
  TrainState state(Model(desk_config(), 1008), 1008);
  PretrainConfig pc;
  pc.optimizer.steps = steps;
  pc.optimizer.batch_size = 16;
  pc.weights.slices = 1024;
  pc.augment.radius_min = 4.0;
  pc.augment.radius_max = 5.0;
  pc.augment.neighbors_min = 16;
  pc.augment.neighbors_max = 32;
  CsvLog log;
  pretrain(state, corpus, pc, [&](const LogRow& r) { log.add(r); });
  log.write(dir / "ssl.csv");
  const auto index = analysis::embed_dataset(state.model, corpus);
  using analysis::Space;
  const double comp_es = analysis::recall_at_k(index, Space::comp, "element_set", 10).recall;
  const double struct_es = analysis::recall_at_k(index, Space::structure, "element_set", 10).recall;
  const double struct_geo = analysis::recall_at_k(index, Space::structure, "geometry_family", 10).recall;
  const double comp_geo = analysis::recall_at_k(index, Space::comp, "geometry_family", 10).recall;
  shared.corpus_index = index;
  double first = 0.0, last = 0.0;
  if (!log.rows().empty()) {
    first = log.rows().front().at("total");
    last = log.rows().back().at("total");
  }
  Outcome o;
  o.passed = comp_es - struct_es >= 0.2 && struct_geo - comp_geo >= 0.2;
  o.summary = std::to_string(steps) + " SSL steps (loss " + sci(first) + " -> " + sci(last) +
              "); element_set R@10 comp " + sci(comp_es) + " vs struct " + sci(struct_es) + ", geometry R@10 struct " +
              sci(struct_geo) + " vs comp " + sci(comp_geo) + " (margins >= 0.2)";
  o.measured = {{"steps", steps},
                {"comp_element_set", comp_es},
                {"struct_element_set", struct_es},
                {"struct_geometry", struct_geo},
                {"comp_geometry", comp_geo},
                {"loss_first", first},
                {"loss_last", last}};
  return o;
}

Outcome stream_ablation(int steps, const fs::path& dir) {
  Rng rng(1009);
  synthetic::PairDatasetOptions po;
  po.count = 2000;
  const auto data = synthetic::pair_potential_dataset(rng, po);
  const auto split = analysis::random_split(data.size(), 0.1, 1009);
  std::vector<AtomicStructure> train, test;
  for (auto i : split.train) train.push_back(data[i]);
  for (auto i : split.test) test.push_back(data[i]);

  FinetuneConfig fc;
  fc.optimizer.steps = steps;
  fc.optimizer.batch_size = 16;
  auto run = [&](bool comp, const std::string& tag) {
    ModelConfig cfg = desk_config();
    cfg.streams.structure = false;
    cfg.streams.comp = comp;
    TrainState s(Model(cfg, 1009), 1009);
    CsvLog log;
    finetune(s, train, fc, [&](const LogRow& r) {
      if (r.at("step") == 1.0 || static_cast<int>(r.at("step")) % 100 == 0) log.add(r);
    });
    const auto m = evaluate(s.model, test, ForceMode::conservative);
    log.add({{"step", s.step}, {"eval_energy_mae", m.energy_mae}, {"eval_force_mae", m.force_mae}});
    log.write(dir / (tag + ".csv"));
    return m;
  };
  const auto ci = run(true, "comp_inter");
  const auto io = run(false, "inter_only");
  const double ratio = ci.energy_mae / io.energy_mae;
  Outcome o;
  o.passed = ratio <= 1.05;
  o.summary = std::to_string(steps) + " fine-tuning steps on 1800 structures; held-out energy MAE C+I " +
              sci(1e3 * ci.energy_mae) + " vs I-only " + sci(1e3 * io.energy_mae) + " meV/atom (ratio " + sci(ratio) +
              ", <= 1.05); force MAE " + sci(1e3 * ci.force_mae) + " vs " + sci(1e3 * io.force_mae) + " meV/A";
  o.measured = {{"steps", steps},
                {"comp_inter_energy_mae", ci.energy_mae},
                {"inter_only_energy_mae", io.energy_mae},
                {"comp_inter_force_mae", ci.force_mae},
                {"inter_only_force_mae", io.force_mae},
                {"ratio", ratio}};
  return o;
}

Outcome probing(Shared& shared) {
  if (!shared.corpus_index) {
    Rng rng(1008);
    shared.corpus_index = analysis::embed_dataset(Model(desk_config(), 1008), synthetic::retrieval_corpus(rng, {}));
  }
  const auto& base = *shared.corpus_index;
  using analysis::Space;

  // Planted target: a fixed random linear function of the frozen joint embedding.
  std::mt19937_64 gen(1010);
  const analysis::Vectors& joint = base.vectors(Space::joint);
  const Eigen::VectorXd w = random_matrix(gen, joint.cols(), 1).col(0);
  std::array<analysis::Vectors, 4> spaces;
  for (auto s : analysis::kSpaces) spaces[static_cast<std::size_t>(s)] = base.vectors(s);
  auto labels = base.labels();
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i]["planted"] = joint.row(static_cast<Eigen::Index>(i)).cast<double>().dot(w) + 3.0;
  const analysis::EmbeddingIndex index(std::move(spaces), std::move(labels));
  const auto split = analysis::random_split(index.size(), 0.2, 1010);

  analysis::ProbeOptions opt;
  opt.seed = 1010;
  const auto planted = analysis::probe(index, Space::joint, "planted", analysis::ProbeHead::linear, split, opt);
  const double rel = planted.metric / planted.target_scale;

  opt.shuffle_labels = true;
  const auto control =
      analysis::probe(index, Space::joint, "composition_family", analysis::ProbeHead::linear, split, opt);
  opt.shuffle_labels = false;
  const auto real = analysis::probe(index, Space::joint, "composition_family", analysis::ProbeHead::linear, split, opt);
  const double chance = 1.0 / control.classes;
  const double sigma = std::sqrt(chance * (1.0 - chance) / static_cast<double>(split.test.size()));
  const bool at_chance = std::abs(control.metric - chance) <= 3.0 * sigma;

  Outcome o;
  o.passed = rel <= 1e-3 && at_chance;
  o.summary = "planted linear target MAE " + sci(rel) + " of scale (<= 1e-3); shuffled-label accuracy " +
              sci(control.metric) + " vs chance " + sci(chance) + " +- " + sci(3.0 * sigma) + " (unshuffled " +
              sci(real.metric) + ")";
  o.measured = {{"planted_relative_mae", rel},
                {"shuffled_accuracy", control.metric},
                {"chance", chance},
                {"tolerance", 3.0 * sigma},
                {"unshuffled_accuracy", real.metric}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string report_path, work_dir = (fs::temp_directory_path() / "tristream_acceptance").string();
  int ssl_steps = 5000, finetune_steps = 5000;
  app.add_option("--only", only, "criteria to run (default all)")->check(CLI::Range(1, 10));
  app.add_option("--report", report_path, "write a JSON report");
  app.add_option("--work-dir", work_dir, "scratch directory for checkpoints and logs");
  app.add_option("--ssl-steps", ssl_steps, "criterion 8 pretraining steps (the criterion requires 5000)");
  app.add_option("--finetune-steps", finetune_steps, "criterion 9 steps per model (the criterion requires 5000)");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work_dir);
  Shared shared;
  const std::vector<Criterion> criteria{
      {1, "count-weighted attention equals the expanded multiset", 1.0, count_weighted_equivalence},
      {2, "structure stream invariances", 30.0, structure_invariance},
      {3, "power-spectrum closed forms", 60.0, power_spectrum_closed_forms},
      {4, "gradients match finite differences", 300.0, gradient_correctness},
      {5, "energy/force coupling suite", 300.0, theory_suite},
      {6, "SSL loss closed forms", 60.0, ssl_closed_forms},
      {7, "bitwise determinism", 300.0, [&] { return determinism(work_dir); }},
      {8, "retrieval semantics after SSL", 1200.0, [&] { return retrieval_semantics(shared, ssl_steps, work_dir); }},
      {9, "composition stream helps fine-tuning", 1800.0, [&] { return stream_ablation(finetune_steps, work_dir); }},
      {10, "probing plumbing", 60.0, [&] { return probing(shared); }},
  };

  nlohmann::json report = nlohmann::json::array();
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.passed = false;
      o.summary = std::string("exception: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = seconds < c.budget_seconds;
    const bool passed = o.passed && in_budget;
    failures += passed ? 0 : 1;
    std::cout << (passed ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << c.id << "  " << c.name << ": "
              << o.summary << "; " << std::fixed << std::setprecision(1) << seconds << " s (< " << c.budget_seconds
              << " s" << (in_budget ? "" : ", OVER BUDGET") << ")" << std::defaultfloat << std::endl;
    report.push_back({{"criterion", c.id},
                      {"name", c.name},
                      {"passed", passed},
                      {"seconds", seconds},
                      {"budget_seconds", c.budget_seconds},
                      {"measured", o.measured}});
  }
  if (!report_path.empty()) std::ofstream(report_path) << report.dump(2) << '\n';
  return failures == 0 ? 0 : 1;
}
