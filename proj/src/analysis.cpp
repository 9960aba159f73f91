#include "tristream/analysis.hpp"

#include "tristream/log.hpp"
#include "tristream/nn.hpp"
#include "tristream/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

namespace tristream::analysis {

namespace {

constexpr char kIndexMagic[8] = {'T', 'R', 'I', 'S', 'T', 'I', 'X', '\0'};
constexpr std::uint32_t kIndexVersion = 1;

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string label_text(const Label& l) {
  if (const auto* d = std::get_if<double>(&l)) return format_double(*d);
  return std::get<std::string>(l);
}

const Label& require_label(const EmbeddingIndex& index, std::size_t id, const std::string& key) {
  const auto& row = index.labels(id);
  auto it = row.find(key);
  if (it == row.end()) throw InputError("record " + std::to_string(id) + " has no label '" + key + "'");
  return it->second;
}

Eigen::VectorXd row_norms(const Vectors& v) { return v.cast<double>().rowwise().norm(); }

}  // namespace

const char* to_string(Space space) {
  switch (space) {
    case Space::comp: return "comp";
    case Space::structure: return "struct";
    case Space::interaction: return "int";
    case Space::joint: return "joint";
  }
  return "?";
}

Space space_from_string(const std::string& name) {
  for (Space s : kSpaces)
    if (name == to_string(s)) return s;
  throw std::invalid_argument("unknown embedding space '" + name + "' (expected comp, struct, int or joint)");
}

// ---------------------------------------------------------------------------
// index

EmbeddingIndex::EmbeddingIndex(std::array<Vectors, 4> spaces, std::vector<LabelRow> labels)
    : spaces_(std::move(spaces)), labels_(std::move(labels)) {
  validate();
}

void EmbeddingIndex::validate() const {
  for (Space s : kSpaces) {
    const auto& v = vectors(s);
    if (static_cast<std::size_t>(v.rows()) != labels_.size()) {
      throw std::invalid_argument(std::string("embedding space ") + to_string(s) + " has " +
                                  std::to_string(v.rows()) + " records, labels have " +
                                  std::to_string(labels_.size()));
    }
    if (!v.allFinite()) throw std::invalid_argument(std::string("non-finite vector in space ") + to_string(s));
  }
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "tristream-index";
  header["records"] = size();
  for (Space s : kSpaces) header["dims"][to_string(s)] = vectors(s).cols();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : labels_) {
    nlohmann::json r = nlohmann::json::object();
    for (const auto& [k, v] : row) {
      if (const auto* d = std::get_if<double>(&v)) {
        r[k] = *d;
      } else {
        r[k] = std::get<std::string>(v);
      }
    }
    rows.push_back(std::move(r));
  }
  header["labels"] = std::move(rows);
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write index " + tmp.string());
    out.write(kIndexMagic, sizeof kIndexMagic);
    out.write(reinterpret_cast<const char*>(&kIndexVersion), sizeof kIndexVersion);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (Space s : kSpaces) {
      const auto& v = vectors(s);
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * v.size()));
    }
    if (!out) throw std::runtime_error("failed writing index " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kIndexMagic, sizeof magic) != 0) {
    throw std::runtime_error(path.string() + " is not an embedding index");
  }
  if (version != kIndexVersion) throw std::runtime_error("unsupported index version " + std::to_string(version));
  if (len > (1ull << 34)) throw std::runtime_error("corrupt index header in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt index header in " + path.string() + ": " + e.what());
  }
  const auto records = header.at("records").get<Eigen::Index>();
  std::array<Vectors, 4> spaces;
  for (Space s : kSpaces) {
    auto& v = spaces[static_cast<std::size_t>(s)];
    v.resize(records, header.at("dims").at(to_string(s)).get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * v.size()));
  }
  if (!in) throw std::runtime_error("truncated index " + path.string());
  std::vector<LabelRow> labels;
  for (const auto& r : header.at("labels")) {
    LabelRow row;
    for (auto it = r.begin(); it != r.end(); ++it) {
      if (it->is_number()) {
        row[it.key()] = it->get<double>();
      } else {
        row[it.key()] = it->get<std::string>();
      }
    }
    labels.push_back(std::move(row));
  }
  return EmbeddingIndex(std::move(spaces), std::move(labels));
}

// ---------------------------------------------------------------------------
// embedding

EmbeddingIndex embed_dataset(const Model& model, const std::vector<AtomicStructure>& data, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  const auto sl = model.slices();
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  std::array<Vectors, 4> spaces{Vectors(n, sl.comp_width), Vectors(n, sl.structure_width),
                                Vectors(n, sl.interaction_width), Vectors(n, sl.total)};
  std::vector<LabelRow> labels;
  labels.reserve(data.size());
  Model::Options opt;
  opt.energy = false;
  for (std::size_t lo = 0; lo < data.size(); lo += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(batch_size));
    std::vector<const AtomicStructure*> chunk;
    for (std::size_t i = lo; i < hi; ++i) chunk.push_back(&data[i]);
    const Batch b = Batch::assemble(chunk, model.config().graph_cutoff, model.config().max_neighbors);
    const auto out = model.forward(b, opt);
    const auto rows = static_cast<Eigen::Index>(hi - lo);
    const auto at = static_cast<Eigen::Index>(lo);
    spaces[0].middleRows(at, rows) = out.embeddings.pooled_comp.value().cast<float>();
    spaces[1].middleRows(at, rows) = out.embeddings.pooled_structure.value().cast<float>();
    spaces[2].middleRows(at, rows) = out.embeddings.pooled_interaction.value().cast<float>();
    spaces[3].middleRows(at, rows) = out.embeddings.pooled_fused.value().cast<float>();
  }
  for (const auto& s : data) {
    LabelRow row;
    for (const auto& [k, v] : s.labels) {
      if (const auto* d = std::get_if<double>(&v)) row[k] = *d;
      if (const auto* t = std::get_if<std::string>(&v)) row[k] = *t;
    }
    std::string set;
    for (int z : element_set(s)) set += (set.empty() ? "" : ",") + std::to_string(z);
    row["element_set"] = set;
    row["majority_element"] = static_cast<double>(majority_element(s));
    row["mean_nn_distance"] = mean_nearest_neighbor_distance(s);
    labels.push_back(std::move(row));
  }
  return EmbeddingIndex(std::move(spaces), std::move(labels));
}

EmbeddingIndex embed_dataset(const std::filesystem::path& checkpoint, const std::vector<AtomicStructure>& data,
                             int batch_size) {
  const Model model = load_model(checkpoint);
  return embed_dataset(model, data, batch_size);
}

// ---------------------------------------------------------------------------
// retrieval

namespace {

struct Ranker {
  Eigen::MatrixXd unit;           // normalized rows; zero rows stay zero
  std::vector<char> usable;
  std::size_t skipped = 0;

  Ranker(const EmbeddingIndex& index, Space space) {
    const Eigen::MatrixXd v = index.vectors(space).cast<double>();
    const Eigen::VectorXd norms = row_norms(index.vectors(space));
    unit = Eigen::MatrixXd::Zero(v.rows(), v.cols());
    usable.assign(static_cast<std::size_t>(v.rows()), 0);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (norms(i) > 0.0) {
        unit.row(i) = v.row(i) / norms(i);
        usable[static_cast<std::size_t>(i)] = 1;
      } else {
        ++skipped;
      }
    }
  }

  std::vector<Hit> rank(const Eigen::VectorXd& q_unit, int k, std::optional<std::size_t> exclude) const {
    const Eigen::VectorXd scores = unit * q_unit;
    std::vector<Hit> hits;
    hits.reserve(usable.size());
    for (std::size_t i = 0; i < usable.size(); ++i) {
      if (!usable[i] || (exclude && *exclude == i)) continue;
      hits.push_back({i, scores(static_cast<Eigen::Index>(i))});
    }
    const auto keep = std::min(hits.size(), static_cast<std::size_t>(std::max(k, 0)));
    auto before = [](const Hit& a, const Hit& b) { return a.score > b.score || (a.score == b.score && a.id < b.id); };
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(), before);
    hits.resize(keep);
    return hits;
  }
};

void check_k(const EmbeddingIndex& index, int k) {
  if (k < 1 || static_cast<std::size_t>(k) >= index.size()) {
    throw std::invalid_argument("k must be in [1, " + std::to_string(index.size()) + ")");
  }
}

void warn_skipped(const Ranker& r, Space space) {
  if (r.skipped > 0) {
    warn(std::to_string(r.skipped) + " zero-norm vector(s) in space " + to_string(space) + " excluded from retrieval");
  }
}

}  // namespace

std::vector<Hit> knn_search(const EmbeddingIndex& index, Space space, const Eigen::VectorXd& query, int k,
                            std::optional<std::size_t> exclude) {
  check_k(index, k);
  if (query.size() != index.vectors(space).cols()) throw std::invalid_argument("query width does not match index");
  const Ranker r(index, space);
  warn_skipped(r, space);
  const double n = query.norm();
  if (!(n > 0.0)) {
    warn("zero-norm query vector; nothing retrieved");
    return {};
  }
  return r.rank(query / n, k, exclude);
}

std::vector<Hit> knn_retrieve(const EmbeddingIndex& index, std::size_t query, Space space, int k) {
  if (query >= index.size()) throw std::out_of_range("query id " + std::to_string(query) + " out of range");
  return knn_search(index, space, index.vectors(space).row(static_cast<Eigen::Index>(query)).cast<double>().transpose(),
                    k, query);
}

std::vector<Recall> recall_curve(const EmbeddingIndex& index, Space space, const std::string& target,
                                 const std::vector<int>& ks) {
  if (ks.empty()) return {};
  for (int k : ks) check_k(index, k);
  const int kmax = *std::max_element(ks.begin(), ks.end());
  std::vector<std::string> keys(index.size());
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < index.size(); ++i) {
    keys[i] = label_text(require_label(index, i, target));
    ++counts[keys[i]];
  }
  const Ranker r(index, space);
  warn_skipped(r, space);
  std::vector<std::size_t> hits(ks.size(), 0);
  std::size_t queries = 0, excluded = 0;
  for (std::size_t q = 0; q < index.size(); ++q) {
    if (counts[keys[q]] < 2 || !r.usable[q]) {
      ++excluded;
      continue;
    }
    ++queries;
    const auto ranked = r.rank(r.unit.row(static_cast<Eigen::Index>(q)).transpose(), kmax, q);
    // Rank (1-based) of the first positive, or past the end.
    std::size_t first = ranked.size() + 1;
    for (std::size_t j = 0; j < ranked.size(); ++j) {
      if (keys[ranked[j].id] == keys[q]) {
        first = j + 1;
        break;
      }
    }
    for (std::size_t t = 0; t < ks.size(); ++t)
      if (first <= static_cast<std::size_t>(ks[t])) ++hits[t];
  }
  std::vector<Recall> out;
  for (std::size_t t = 0; t < ks.size(); ++t) {
    Recall rc;
    rc.queries = queries;
    rc.excluded = excluded;
    rc.recall = queries ? static_cast<double>(hits[t]) / static_cast<double>(queries) : 0.0;
    out.push_back(rc);
  }
  return out;
}

Recall recall_at_k(const EmbeddingIndex& index, Space space, const std::string& target, int k) {
  return recall_curve(index, space, target, {k}).front();
}

// ---------------------------------------------------------------------------
// probes

const char* to_string(ProbeHead head) { return head == ProbeHead::linear ? "linear" : "mlp"; }

ProbeHead probe_head_from_string(const std::string& name) {
  if (name == "linear") return ProbeHead::linear;
  if (name == "mlp") return ProbeHead::mlp;
  throw std::invalid_argument("unknown probe head '" + name + "' (expected linear or mlp)");
}

ProbeTask default_task(const std::string& target) {
  static const std::set<std::string> categorical{"crystal_system", "space_group",       "majority_element",
                                                 "element_set",    "composition_family", "geometry_family"};
  return categorical.count(target) ? ProbeTask::classification : ProbeTask::regression;
}

Split random_split(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  Split s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace {

// Trains `forward` with AdamW on the full training set.
void fit(ParameterStore& store, const std::function<ad::Var()>& loss, const ProbeOptions& o) {
  OptimizerConfig c;
  c.lr = o.lr;
  c.warmup = 0;
  c.steps = std::max(o.steps, 1);
  c.weight_decay = o.weight_decay;
  AdamW opt(store, c);
  const auto vars = store.vars();
  for (int step = 0; step < o.steps; ++step) {
    const auto grads = ad::grad(loss(), vars);
    std::vector<ad::Matrix> g;
    g.reserve(grads.size());
    for (const auto& v : grads) g.push_back(v.value());
    opt.step(store, g, lr_at(step, c));
  }
}

}  // namespace

ProbeResult probe(const EmbeddingIndex& index, Space space, const std::string& target, ProbeHead head,
                  const Split& split, const ProbeOptions& options) {
  return probe(index, space, target, default_task(target), head, split, options);
}

ProbeResult probe(const EmbeddingIndex& index, Space space, const std::string& target, ProbeTask task,
                  ProbeHead head, const Split& split, const ProbeOptions& options) {
  if (split.train.empty() || split.test.empty()) throw std::invalid_argument("probe split needs train and test records");
  for (auto i : split.train)
    if (i >= index.size()) throw std::out_of_range("split id out of range");
  for (auto i : split.test)
    if (i >= index.size()) throw std::out_of_range("split id out of range");

  const Eigen::MatrixXd all = index.vectors(space).cast<double>();
  const auto d = all.cols();
  auto gather = [&](const std::vector<std::size_t>& ids) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(ids.size()), d);
    for (std::size_t r = 0; r < ids.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = all.row(static_cast<Eigen::Index>(ids[r]));
    return m;
  };
  Eigen::MatrixXd xtr = gather(split.train), xte = gather(split.test);
  // Standardize with train statistics; constant columns are only centered.
  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  xtr = ((xtr.rowwise() - mu).array().rowwise() / sd.array()).matrix();
  xte = ((xte.rowwise() - mu).array().rowwise() / sd.array()).matrix();

  std::vector<Label> ytr, yte;
  for (auto i : split.train) ytr.push_back(require_label(index, i, target));
  for (auto i : split.test) yte.push_back(require_label(index, i, target));
  Rng rng(options.seed);
  if (options.shuffle_labels) std::shuffle(ytr.begin(), ytr.end(), rng);

  ProbeResult res;
  res.task = task;
  ParameterStore store;
  const int width = options.hidden;

  if (task == ProbeTask::regression) {
    auto value = [&](const Label& l) {
      if (const auto* v = std::get_if<double>(&l)) return *v;
      throw InputError("regression target '" + target + "' is not numeric");
    };
    Eigen::VectorXd ttr(static_cast<Eigen::Index>(ytr.size())), tte(static_cast<Eigen::Index>(yte.size()));
    for (std::size_t i = 0; i < ytr.size(); ++i) ttr(static_cast<Eigen::Index>(i)) = value(ytr[i]);
    for (std::size_t i = 0; i < yte.size(); ++i) tte(static_cast<Eigen::Index>(i)) = value(yte[i]);
    Eigen::VectorXd both(ttr.size() + tte.size());
    both << ttr, tte;
    res.target_scale = std::sqrt((both.array() - both.mean()).square().mean());
    const double tmu = ttr.mean();
    double tsd = std::sqrt((ttr.array() - tmu).square().mean());
    if (!(tsd > 1e-300)) tsd = 1.0;
    const Eigen::VectorXd z = (ttr.array() - tmu) / tsd;
    res.baseline = (tte.array() - tmu).abs().mean();

    Eigen::VectorXd pred;
    if (head == ProbeHead::linear) {
      // The affine least-squares fit is the optimum of the linear probe; solve it directly.
      Eigen::MatrixXd a(xtr.rows(), d + 1);
      a << xtr, Eigen::VectorXd::Ones(xtr.rows());
      Eigen::MatrixXd gram = a.transpose() * a;
      gram.diagonal().head(d).array() += options.ridge * static_cast<double>(xtr.rows());
      const Eigen::VectorXd w = gram.ldlt().solve(a.transpose() * z);
      pred = xte * w.head(d) + Eigen::VectorXd::Constant(xte.rows(), w(d));
    } else {
      const auto mlp = nn::Mlp::create(store, "probe", static_cast<int>(d), {width, width}, 1, rng);
      const ad::Var x = ad::constant(xtr);
      const ad::Var y = ad::constant(z);
      fit(store, [&] { return ad::mean(ad::square(mlp(store, x) - y)); }, options);
      pred = mlp(store, ad::constant(xte)).value();
    }
    res.metric = ((pred.array() * tsd + tmu) - tte.array()).abs().mean();
    return res;
  }

  // Classification over every class seen in either split.
  std::map<std::string, int> cls;
  for (const auto& l : ytr) cls.emplace(label_text(l), 0);
  std::set<std::string> in_train;
  for (const auto& l : ytr) in_train.insert(label_text(l));
  for (const auto& l : yte) {
    const auto t = label_text(l);
    if (cls.emplace(t, 0).second) res.absent_classes.push_back(t);
  }
  int next = 0;
  for (auto& [name, id] : cls) id = next++;
  res.classes = next;
  if (!res.absent_classes.empty()) {
    warn(std::to_string(res.absent_classes.size()) + " test class(es) of '" + target + "' absent from the train split");
  }
  std::vector<int> ctr, cte;
  for (const auto& l : ytr) ctr.push_back(cls.at(label_text(l)));
  for (const auto& l : yte) cte.push_back(cls.at(label_text(l)));

  std::vector<int> freq(static_cast<std::size_t>(res.classes), 0);
  for (int c : ctr) ++freq[static_cast<std::size_t>(c)];
  const int majority = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  auto accuracy = [&](const std::vector<int>& pred) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < cte.size(); ++i) ok += pred[i] == cte[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(cte.size());
  };
  res.baseline = accuracy(std::vector<int>(cte.size(), majority));

  ad::Matrix onehot = ad::Matrix::Zero(static_cast<Eigen::Index>(ctr.size()), res.classes);
  for (std::size_t i = 0; i < ctr.size(); ++i) onehot(static_cast<Eigen::Index>(i), ctr[i]) = 1.0;
  const ad::Var y = ad::constant(onehot);
  const ad::Var x = ad::constant(xtr);
  const double inv_n = 1.0 / static_cast<double>(ctr.size());
  std::function<ad::Var(const ad::Var&)> logits;
  if (head == ProbeHead::linear) {
    const auto lin = nn::Linear::create(store, "probe", static_cast<int>(d), res.classes, rng);
    store.value(lin.weight).setZero();
    logits = [&store, lin](const ad::Var& in) { return lin(store, in); };
  } else {
    const auto mlp = nn::Mlp::create(store, "probe", static_cast<int>(d), {width, width}, res.classes, rng);
    logits = [&store, mlp](const ad::Var& in) { return mlp(store, in); };
  }
  fit(store, [&] { return ad::sum(ad::mul(y, ad::log_softmax_rows(logits(x)))) * (-inv_n); }, options);
  const ad::Matrix scores = logits(ad::constant(xte)).value();
  std::vector<int> pred(cte.size());
  for (std::size_t i = 0; i < cte.size(); ++i) {
    Eigen::Index best = 0;
    scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    pred[i] = static_cast<int>(best);
  }
  res.metric = accuracy(pred);
  return res;
}

// ---------------------------------------------------------------------------
// latent metrics

double uniformity(const Eigen::MatrixXd& vectors) {
  const auto n = vectors.rows();
  if (n < 2) throw std::invalid_argument("uniformity needs at least two vectors");
  Eigen::MatrixXd u = vectors;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = u.row(i).norm();
    if (!(norm > 0.0)) throw std::invalid_argument("uniformity of a zero vector is undefined");
    u.row(i) /= norm;
  }
  const Eigen::MatrixXd g = u * u.transpose();
  // |x-y|^2 = 2 - 2 x.y for unit rows; log-sum-exp over i<j.
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) terms.push_back(-2.0 * std::max(0.0, 2.0 - 2.0 * g(i, j)));
  const double top = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - top);
  return top + std::log(s / static_cast<double>(terms.size()));
}

namespace {

ad::Var target_of(const Model::Output& out, SensitivityTarget target) {
  if (target == SensitivityTarget::energy) return ad::sum(out.energy);
  const ad::Var f = Model::conservative_forces(out, true);
  return ad::sum(ad::sqrt(ad::sum_cols(ad::square(f))));
}

}  // namespace

double sensitivity_target(const Model& model, const AtomicStructure& structure, SensitivityTarget target,
                          const ad::Matrix* fused_offset) {
  const Batch b = Batch::assemble(std::vector<const AtomicStructure*>{&structure}, model.config().graph_cutoff,
                                  model.config().max_neighbors);
  Model::Options opt;
  opt.fused_offset = fused_offset;
  const auto out = model.forward(b, opt);
  return target_of(out, target).item();
}

Sensitivity stream_sensitivity(const Model& model, const AtomicStructure& structure, SensitivityTarget target) {
  const Batch b = Batch::assemble(std::vector<const AtomicStructure*>{&structure}, model.config().graph_cutoff,
                                  model.config().max_neighbors);
  const auto out = model.forward(b);
  const ad::Var t = target_of(out, target);
  const std::vector<ad::Var> wrt{out.embeddings.fused};
  Sensitivity s;
  s.gradient = ad::grad(t, wrt).front().value();
  const auto sl = model.slices();
  const double n = static_cast<double>(s.gradient.rows());
  auto block = [&](int offset, int width) {
    return width == 0 ? 0.0 : s.gradient.middleCols(offset, width).rowwise().norm().sum() / n;
  };
  s.comp = block(sl.comp_offset, sl.comp_width);
  s.structure = block(sl.structure_offset, sl.structure_width);
  s.interaction = block(sl.interaction_offset, sl.interaction_width);
  return s;
}

}  // namespace tristream::analysis
