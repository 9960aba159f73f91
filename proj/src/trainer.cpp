#include "tristream/trainer.hpp"

#include <optional>

#include "tristream/config.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace tristream {

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (warmup < 0 || steps < 0) throw std::invalid_argument("warmup and steps must be non-negative");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
  if (!(clip > 0.0)) throw std::invalid_argument("clip norm must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw std::invalid_argument("bad AdamW moments configuration");
  }
}

double lr_at(int step, const OptimizerConfig& c) {
  if (step < 0) throw std::invalid_argument("step must be non-negative");
  if (step < c.warmup) return c.lr * static_cast<double>(step) / c.warmup;
  if (c.steps <= c.warmup) return c.lr;
  if (step >= c.steps) return 0.0;
  const double progress = static_cast<double>(step - c.warmup) / (c.steps - c.warmup);
  return 0.5 * c.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(std::vector<ad::Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) g *= f;
  }
  return norm;
}

AdamW::AdamW(const ParameterStore& store, const OptimizerConfig& c)
    : beta1_(c.beta1), beta2_(c.beta2), eps_(c.eps), wd_(c.weight_decay) {
  c.validate();
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.push_back(ad::Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
    v_.push_back(ad::Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
  }
}

void AdamW::step(ParameterStore& store, const std::vector<ad::Matrix>& grads, double lr) {
  if (grads.size() != m_.size() || store.size() != m_.size()) throw std::invalid_argument("optimizer/store mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double decay = 1.0 - lr * wd_;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
    auto& w = store.value(i);
    w.array() = w.array() * decay - lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void AdamW::configure(const OptimizerConfig& c) {
  c.validate();
  beta1_ = c.beta1;
  beta2_ = c.beta2;
  eps_ = c.eps;
  wd_ = c.weight_decay;
}

void AdamW::restore(long long t, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw std::invalid_argument("optimizer state size mismatch");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

TrainingDiverged::TrainingDiverged(int step, const std::string& detail)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + detail), step_(step) {}

namespace {

Rng run_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x7261696eu};
  return Rng(seq);
}

std::string describe(const LogRow& row) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : row) {
    os << (first ? "" : ", ") << k << "=" << v;
    first = false;
  }
  return os.str();
}

std::vector<ad::Matrix> values_of(const std::vector<ad::Var>& grads) {
  std::vector<ad::Matrix> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(g.value());
  return out;
}

}  // namespace

TrainState::TrainState(Model m, std::uint64_t seed) : model(std::move(m)), rng(run_rng(seed)), stage("init") {}

const char* to_string(SupervisedLoss loss) { return loss == SupervisedLoss::mae ? "mae" : "mse"; }

SupervisedLoss supervised_loss_from_string(const std::string& name) {
  if (name == "mae") return SupervisedLoss::mae;
  if (name == "mse") return SupervisedLoss::mse;
  throw std::invalid_argument("unknown supervised loss '" + name + "'");
}

std::vector<std::size_t> draw_batch(Rng& rng, std::size_t n, int batch_size) {
  if (n == 0) throw std::invalid_argument("dataset is empty");
  const std::size_t b = std::min<std::size_t>(n, static_cast<std::size_t>(batch_size));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(b);
  return idx;
}

namespace {

// Initializes the optimizer lazily so a fresh state and a loaded one agree.
void ensure_optimizer(TrainState& state, const OptimizerConfig& config, const std::string& stage) {
  if (state.stage != stage || state.optimizer.first_moment().size() != state.model.params().size()) {
    state.optimizer = AdamW(state.model.params(), config);
    state.stage = stage;
    state.step = 0;
  } else {
    state.optimizer.configure(config);
  }
}

void apply_step(TrainState& state, const ad::Var& loss, const OptimizerConfig& config, LogRow& row) {
  const auto vars = state.model.params().vars();
  auto grads = values_of(ad::grad(loss, vars));
  const double norm = clip_grad_norm(grads, config.clip);
  const double lr = lr_at(state.step + 1, config);
  state.optimizer.step(state.model.params(), grads, lr);
  ++state.step;
  row["step"] = state.step;
  row["lr"] = lr;
  row["grad_norm"] = norm;
}

}  // namespace

void pretrain(TrainState& state, const std::vector<AtomicStructure>& data, const PretrainConfig& config,
              const LogSink& log, std::optional<int> stop_at) {
  config.optimizer.validate();
  config.augment.validate();
  config.weights.validate();
  if (data.empty()) throw std::invalid_argument("pretraining needs a nonempty dataset");
  ensure_optimizer(state, config.optimizer, "pretrain");
  const GraphDefaults graph{state.model.config().graph_cutoff, state.model.config().max_neighbors};
  const int last = std::min(config.optimizer.steps, stop_at.value_or(config.optimizer.steps));
  while (state.step < last) {
    const auto idx = draw_batch(state.rng, data.size(), config.optimizer.batch_size);
    std::vector<ViewPair> pairs;
    for (auto i : idx) pairs.push_back(sample_views(data[i], config.augment, graph, state.rng));
    const SslLoss loss = combined_loss(state.model, pairs, config.weights, state.rng, true);
    LogRow row(loss.breakdown.begin(), loss.breakdown.end());
    row["sigreg_skipped"] = loss.sigreg_skipped ? 1.0 : 0.0;
    if (!std::isfinite(loss.total.item())) throw TrainingDiverged(state.step + 1, describe(row));
    apply_step(state, loss.total, config.optimizer, row);
    if (log) log(row);
  }
}

SupervisedTerms supervised_loss(const Model& model, const std::vector<const AtomicStructure*>& structures,
                                const FinetuneConfig& config, bool training, Rng* rng) {
  for (const auto* s : structures) {
    if (!s->energy()) throw InputError("structure without an energy label");
    if (!s->forces()) throw InputError("structure without a forces label");
  }
  const Batch batch = Batch::assemble(structures, model.config().graph_cutoff, model.config().max_neighbors);
  ad::Matrix target_e(batch.num_structures, 1), inv_n(batch.num_structures, 1), target_f(batch.num_nodes, 3);
  for (int s = 0; s < batch.num_structures; ++s) {
    const double n = batch.atom_counts[static_cast<std::size_t>(s)];
    inv_n(s, 0) = 1.0 / n;
    target_e(s, 0) = *structures[static_cast<std::size_t>(s)]->energy() / n;
    const PerAtom f = *structures[static_cast<std::size_t>(s)]->forces();
    if (f.rows() != n || f.cols() != 3) throw InputError("forces label must be N x 3");
    target_f.middleRows(batch.node_offset[static_cast<std::size_t>(s)], f.rows()) = f;
  }
  Model::Options opt;
  opt.training = training;
  opt.rng = rng;
  opt.direct_forces = config.mode == ForceMode::direct;
  const auto out = model.forward(batch, opt);
  const ad::Var forces =
      config.mode == ForceMode::direct ? out.direct_forces : Model::conservative_forces(out, true);
  const ad::Var de = ad::sub(ad::mul(out.energy, ad::constant(inv_n)), ad::constant(target_e));
  const ad::Var df = ad::sub(forces, ad::constant(target_f));
  SupervisedTerms t;
  if (config.loss == SupervisedLoss::mae) {
    t.energy = ad::mean(ad::abs(de));
    t.forces = ad::mean(ad::abs(df));
  } else {
    t.energy = ad::mean(ad::square(de));
    t.forces = ad::mean(ad::square(df));
  }
  t.total = ad::add(ad::scale(t.energy, config.energy_weight), ad::scale(t.forces, config.force_weight));
  return t;
}

void finetune(TrainState& state, const std::vector<AtomicStructure>& data, const FinetuneConfig& config,
              const LogSink& log, std::optional<int> stop_at) {
  config.optimizer.validate();
  if (data.empty()) throw std::invalid_argument("fine-tuning needs a nonempty dataset");
  for (const auto& s : data) {
    if (!s.energy() || !s.forces()) throw InputError("fine-tuning data needs energy and forces labels");
  }
  ensure_optimizer(state, config.optimizer, "finetune");
  const int last = std::min(config.optimizer.steps, stop_at.value_or(config.optimizer.steps));
  while (state.step < last) {
    const auto idx = draw_batch(state.rng, data.size(), config.optimizer.batch_size);
    std::vector<const AtomicStructure*> batch;
    for (auto i : idx) batch.push_back(&data[i]);
    const auto terms = supervised_loss(state.model, batch, config, true, &state.rng);
    LogRow row{{"total", terms.total.item()}, {"energy", terms.energy.item()}, {"forces", terms.forces.item()}};
    if (!std::isfinite(row["total"])) throw TrainingDiverged(state.step + 1, describe(row));
    apply_step(state, terms.total, config.optimizer, row);
    if (log) log(row);
  }
}

Metrics evaluate(const Model& model, const std::vector<AtomicStructure>& data, ForceMode mode, int batch_size) {
  Metrics m;
  double e_sum = 0.0, f_sum = 0.0;
  for (std::size_t lo = 0; lo < data.size(); lo += static_cast<std::size_t>(batch_size)) {
    std::vector<const AtomicStructure*> chunk;
    for (std::size_t i = lo; i < std::min(data.size(), lo + static_cast<std::size_t>(batch_size)); ++i) {
      if (!data[i].energy() || !data[i].forces()) throw InputError("evaluation data needs energy and forces labels");
      chunk.push_back(&data[i]);
    }
    const Batch b = Batch::assemble(chunk, model.config().graph_cutoff, model.config().max_neighbors);
    const auto p = model.predict(b, mode);
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      const double n = static_cast<double>(chunk[s]->size());
      e_sum += std::abs(p.energy(static_cast<Eigen::Index>(s)) / n - *chunk[s]->energy() / n);
      const PerAtom f = *chunk[s]->forces();
      f_sum += (p.forces.middleRows(b.node_offset[s], f.rows()) - f).cwiseAbs().sum();
      m.atoms += chunk[s]->size();
    }
    m.structures += chunk.size();
  }
  if (m.structures > 0) {
    m.energy_mae = e_sum / static_cast<double>(m.structures);
    m.force_mae = f_sum / (3.0 * static_cast<double>(m.atoms));
  }
  return m;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'R', 'I', 'S', 'T', 'C', 'K', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_matrix(std::ostream& out, const ad::Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void read_matrix(std::istream& in, ad::Matrix& m) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const auto& store = state.model.params();
  nlohmann::json h;
  h["format"] = "tristream-checkpoint";
  h["model"] = model_config_to_map(state.model.config());
  h["seed"] = state.model.seed();
  h["step"] = state.step;
  h["stage"] = state.stage;
  h["rng"] = save_rng(state.rng);
  const bool has_opt = state.optimizer.first_moment().size() == store.size() && store.size() > 0;
  h["optimizer_steps"] = has_opt ? state.optimizer.steps_taken() : 0;
  h["has_optimizer"] = has_opt;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : store.entries()) params.push_back({{"name", e.name}, {"rows", e.var.rows()}, {"cols", e.var.cols()}});
  h["parameters"] = params;
  const std::string header = h.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (std::size_t i = 0; i < store.size(); ++i) write_matrix(out, store.value(i));
    if (has_opt) {
      for (const auto& m : state.optimizer.first_moment()) write_matrix(out, m);
      for (const auto& v : state.optimizer.second_moment()) write_matrix(out, v);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const auto h = nlohmann::json::parse(header);

  const ModelConfig config = model_config_from_map(h.at("model").get<std::map<std::string, std::string>>());
  TrainState state(Model(config, h.at("seed").get<std::uint64_t>()), 0);
  auto& store = state.model.params();
  const auto& params = h.at("parameters");
  if (params.size() != store.size()) throw std::runtime_error("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = params[i];
    if (p.at("name").get<std::string>() != store.entries()[i].name || p.at("rows").get<ad::Index>() != store.value(i).rows() ||
        p.at("cols").get<ad::Index>() != store.value(i).cols()) {
      throw std::runtime_error("checkpoint parameter '" + p.at("name").get<std::string>() + "' does not match the model");
    }
    read_matrix(in, store.value(i));
  }
  if (h.at("has_optimizer").get<bool>()) {
    std::vector<ad::Matrix> m, v;
    for (std::size_t i = 0; i < store.size(); ++i) {
      m.emplace_back(store.value(i).rows(), store.value(i).cols());
      read_matrix(in, m.back());
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      v.emplace_back(store.value(i).rows(), store.value(i).cols());
      read_matrix(in, v.back());
    }
    OptimizerConfig oc;
    state.optimizer = AdamW(store, oc);
    state.optimizer.restore(h.at("optimizer_steps").get<long long>(), std::move(m), std::move(v));
  }
  state.step = h.at("step").get<int>();
  state.stage = h.at("stage").get<std::string>();
  load_rng(state.rng, h.at("rng").get<std::string>());
  return state;
}

Model load_model(const std::filesystem::path& path) { return std::move(load_checkpoint(path).model); }

void CsvLog::write(const std::filesystem::path& path) const {
  std::set<std::string> keys;
  for (const auto& r : rows_)
    for (const auto& [k, v] : r) keys.insert(k);
  keys.erase("step");
  std::vector<std::string> cols{"step"};
  cols.insert(cols.end(), keys.begin(), keys.end());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write log " + path.string());
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  out.precision(17);
  for (const auto& r : rows_) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) out << ",";
      const auto it = r.find(cols[i]);
      if (it != r.end()) out << it->second;
    }
    out << "\n";
  }
}

std::vector<LogRow> CsvLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read log " + path.string());
  std::string line;
  std::vector<std::string> cols;
  std::vector<LogRow> rows;
  if (!std::getline(in, line)) return rows;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    LogRow row;
    for (std::size_t i = 0; i < cols.size() && std::getline(ss, cell, ','); ++i) {
      if (!cell.empty()) row[cols[i]] = std::stod(cell);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace tristream
