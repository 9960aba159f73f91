#include "tristream/cli.hpp"

#include "tristream/analysis.hpp"
#include "tristream/config.hpp"
#include "tristream/io.hpp"
#include "tristream/log.hpp"
#include "tristream/synthetic.hpp"
#include "tristream/theory.hpp"
#include "tristream/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

namespace tristream::cli {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<int> workers;
  std::string out;
  std::vector<std::string> set;
};

struct Args {
  Common common;
  std::string data, init, checkpoint, index, stream = "joint", target, head = "linear", mode, suite = "theory",
                                              synthetic, eval, log;
  std::optional<int> steps;
  int count = 2000, k = 5, trials = 20;
  std::optional<std::size_t> query;
  double test_fraction = 0.0;
  bool shuffle = false;
  std::vector<std::string> logs;
};

// Defaults < --config < TRISTREAM_SEED < --set < dedicated flags.
RunConfig effective_config(const Args& a, const std::string& command) {
  RunConfig c;
  if (!a.common.config.empty()) c.merge_file(a.common.config);
  c.seed = seed_from_environment(c.seed);
  for (const auto& kv : a.common.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    c.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (a.common.seed) c.seed = *a.common.seed;
  if (a.common.deterministic) c.deterministic = true;
  if (a.common.workers) c.set("workers", std::to_string(*a.common.workers));
  if (a.steps) c.set(command + ".steps", std::to_string(*a.steps));
  if (!a.mode.empty()) c.set("finetune.mode", a.mode);
  return c;
}

void echo_config(const RunConfig& c, std::ostream& err, const std::string& out_path) {
  err << "# effective configuration\n" << c.dump();
  if (!out_path.empty()) {
    std::ofstream f(out_path + ".config");
    f << c.dump();
  }
}

Dataset train_part(const Dataset& d) {
  auto idx = d.indices_of("train");
  if (idx.empty()) return d;
  return d.subset(idx);
}

void print_table(std::ostream& out, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      out << (c ? "  " : "") << std::left << std::setw(static_cast<int>(w[c])) << (c < r.size() ? r[c] : "");
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::string label_text(const analysis::Label& l) {
  if (const auto* d = std::get_if<double>(&l)) return fmt(*d, 10);
  return std::get<std::string>(l);
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ConfigError(flag + " is required");
}

TrainState start_state(const Args& a, const RunConfig& c, std::ostream& err) {
  if (a.init.empty()) return TrainState(Model(c.model, c.seed), c.seed);
  TrainState s = load_checkpoint(a.init);
  if (model_config_to_map(s.model.config()) != model_config_to_map(c.model)) {
    err << "note: model settings come from " << a.init << "; model.* configuration keys are ignored\n";
  }
  return s;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Args& a, std::ostream& out, std::ostream& err) {
  const RunConfig c = effective_config(a, "pretrain");
  Dataset d;
  if (!a.synthetic.empty()) {
    Rng rng(c.seed);
    if (a.synthetic == "pairs") {
      synthetic::PairDatasetOptions o;
      o.count = a.count;
      d.structures = synthetic::pair_potential_dataset(rng, o);
    } else {
      d.structures = synthetic::retrieval_corpus(rng, {});
    }
    d.splits.assign(d.structures.size(), "train");
    d.sources.assign(d.structures.size(), "synthetic:" + a.synthetic);
  } else {
    require(a.data, "--data");
    d = load_dataset(a.data);
  }
  if (a.test_fraction > 0.0) {
    const auto split = analysis::random_split(d.size(), a.test_fraction, c.seed);
    for (auto i : split.train) d.splits[i] = "train";
    for (auto i : split.test) d.splits[i] = "test";
  }
  std::size_t atoms = 0, periodic = 0;
  std::set<int> elements;
  std::map<std::string, std::size_t> labels, splits;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& s = d.structures[i];
    s.validate();
    atoms += s.size();
    periodic += s.periodic ? 1 : 0;
    for (int z : s.species) elements.insert(z);
    for (const auto& [k, v] : s.labels) ++labels[k];
    ++splits[d.splits[i]];
  }
  out << "structures  " << d.size() << "\natoms       " << atoms << "\nperiodic    " << periodic << "\nelements   ";
  for (int z : elements) out << ' ' << element_symbol(z);
  out << "\nlabels     ";
  for (const auto& [k, n] : labels) out << ' ' << k << '(' << n << ')';
  out << "\nsplits     ";
  for (const auto& [k, n] : splits) out << ' ' << k << '=' << n;
  out << '\n';

  if (!a.common.out.empty()) {
    const fs::path o(a.common.out);
    if (o.extension() == ".json") {
      std::vector<std::string> files, names;
      for (const auto& [split, n] : splits) {
        (void)n;
        const fs::path file = o.parent_path() / (o.stem().string() + "." + split + ".xyz");
        write_xyz(file, d.subset(d.indices_of(split)).structures);
        files.push_back(file.filename().string());
        names.push_back(split);
      }
      write_manifest(o, files, names);
    } else {
      write_xyz(o, d.structures);
    }
    err << "wrote " << o.string() << '\n';
  }
  return kOk;
}

int cmd_pretrain(const Args& a, std::ostream& out, std::ostream& err) {
  require(a.data, "--data");
  require(a.common.out, "--out");
  const RunConfig c = effective_config(a, "pretrain");
  echo_config(c, err, a.common.out);
  const Dataset d = train_part(load_dataset(a.data));
  TrainState state = start_state(a, c, err);
  CsvLog log;
  pretrain(state, d.structures, c.pretrain_config(), [&](const LogRow& r) { log.add(r); });
  save_checkpoint(a.common.out, state);
  if (!a.log.empty()) log.write(a.log);
  out << "pretrained to step " << state.step << "; checkpoint " << a.common.out << '\n';
  if (!log.rows().empty()) out << "final total loss " << fmt(log.rows().back().at("total")) << '\n';
  return kOk;
}

int cmd_finetune(const Args& a, std::ostream& out, std::ostream& err) {
  require(a.data, "--data");
  require(a.common.out, "--out");
  const RunConfig c = effective_config(a, "finetune");
  echo_config(c, err, a.common.out);
  const Dataset full = load_dataset(a.data);
  const Dataset train = train_part(full);
  TrainState state = start_state(a, c, err);
  CsvLog log;
  finetune(state, train.structures, c.finetune, [&](const LogRow& r) { log.add(r); });
  save_checkpoint(a.common.out, state);
  std::vector<AtomicStructure> held_out;
  if (!a.eval.empty()) {
    held_out = load_dataset(a.eval).structures;
  } else {
    const auto test = full.indices_of("test");
    if (!test.empty()) held_out = full.subset(test).structures;
  }
  out << "fine-tuned to step " << state.step << "; checkpoint " << a.common.out << '\n';
  if (!held_out.empty()) {
    const auto m = evaluate(state.model, held_out, c.finetune.mode);
    log.add({{"step", state.step},
             {"eval_energy_mae", m.energy_mae},
             {"eval_force_mae", m.force_mae},
             {"eval_structures", static_cast<double>(m.structures)}});
    out << "held-out energy MAE " << fmt(1e3 * m.energy_mae) << " meV/atom, force MAE " << fmt(1e3 * m.force_mae)
        << " meV/A over " << m.structures << " structures\n";
  }
  if (!a.log.empty()) log.write(a.log);
  return kOk;
}

int cmd_embed(const Args& a, std::ostream& out, std::ostream& err) {
  require(a.checkpoint, "--checkpoint");
  require(a.data, "--data");
  require(a.common.out, "--out");
  const RunConfig c = effective_config(a, "pretrain");
  echo_config(c, err, "");
  const Dataset d = load_dataset(a.data);
  const auto index = analysis::embed_dataset(fs::path(a.checkpoint), d.structures);
  index.save(a.common.out);
  out << "embedded " << index.size() << " structures into " << a.common.out << '\n';
  return kOk;
}

int cmd_retrieve(const Args& a, std::ostream& out, std::ostream&) {
  require(a.index, "--index");
  if (!a.query) throw ConfigError("--query is required");
  const auto index = analysis::EmbeddingIndex::load(a.index);
  const auto space = analysis::space_from_string(a.stream);
  const auto hits = analysis::knn_retrieve(index, *a.query, space, a.k);
  std::set<std::string> keys;
  for (const auto& row : index.labels())
    for (const auto& [k, v] : row) keys.insert(k);
  std::vector<std::string> header{"rank", "id", "score"};
  header.insert(header.end(), keys.begin(), keys.end());
  std::vector<std::vector<std::string>> rows;
  for (std::size_t r = 0; r < hits.size(); ++r) {
    std::vector<std::string> row{std::to_string(r + 1), std::to_string(hits[r].id), fmt(hits[r].score, 6)};
    const auto& labels = index.labels(hits[r].id);
    for (const auto& k : keys) {
      auto it = labels.find(k);
      row.push_back(it == labels.end() ? "-" : label_text(it->second));
    }
    rows.push_back(std::move(row));
  }
  print_table(out, header, rows);
  return kOk;
}

int cmd_probe(const Args& a, std::ostream& out, std::ostream& err) {
  require(a.index, "--index");
  require(a.target, "--target");
  const RunConfig c = effective_config(a, "pretrain");
  echo_config(c, err, "");
  const auto index = analysis::EmbeddingIndex::load(a.index);
  const auto split = analysis::random_split(index.size(), a.test_fraction > 0.0 ? a.test_fraction : 0.2, c.seed);
  analysis::ProbeOptions o;
  o.seed = c.seed;
  o.shuffle_labels = a.shuffle;
  if (a.steps) o.steps = *a.steps;
  const auto r = analysis::probe(index, analysis::space_from_string(a.stream), a.target,
                                 analysis::probe_head_from_string(a.head), split, o);
  const bool cls = r.task == analysis::ProbeTask::classification;
  print_table(out, {"target", "stream", "head", "task", cls ? "accuracy" : "mae", "baseline", "detail"},
              {{a.target, a.stream, a.head, cls ? "classification" : "regression", fmt(r.metric), fmt(r.baseline),
                cls ? std::to_string(r.classes) + " classes, " + std::to_string(r.absent_classes.size()) +
                          " absent from train"
                    : "target std " + fmt(r.target_scale)}});
  return kOk;
}

int cmd_verify(const Args& a, std::ostream& out, std::ostream& err) {
  const RunConfig c = effective_config(a, "pretrain");
  echo_config(c, err, "");
  const auto report = theory::run_suite({c.seed, a.trials});
  std::vector<std::vector<std::string>> rows;
  for (const auto& ch : report.checks) {
    rows.push_back({ch.passed ? "PASS" : "FAIL", ch.name, fmt(ch.measured), ch.relation,
                    ch.relation == "report" ? "-" : fmt(ch.threshold)});
  }
  print_table(out, {"status", "check", "measured", "relation", "threshold"}, rows);
  if (!a.common.out.empty()) {
    std::ofstream f(a.common.out);
    f << report.to_json().dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + a.common.out);
  }
  return report.passed() ? kOk : kFailure;
}

int cmd_report(const Args& a, std::ostream& out, std::ostream&) {
  if (a.logs.empty()) throw ConfigError("report needs at least one CSV log");
  std::vector<std::vector<std::string>> rows;
  for (const auto& path : a.logs) {
    const auto log = CsvLog::read(path);
    double steps = 0.0;
    std::optional<double> loss, e, f;
    for (const auto& r : log) {
      if (auto it = r.find("step"); it != r.end()) steps = std::max(steps, it->second);
      if (auto it = r.find("total"); it != r.end()) loss = it->second;
      if (auto it = r.find("eval_energy_mae"); it != r.end()) e = it->second;
      if (auto it = r.find("eval_force_mae"); it != r.end()) f = it->second;
    }
    auto cell = [](const std::optional<double>& v, double scale) { return v ? fmt(*v * scale, 5) : "-"; };
    rows.push_back({fs::path(path).stem().string(), fmt(steps, 10), cell(loss, 1.0), cell(e, 1e3), cell(f, 1e3)});
  }
  std::ostringstream table;
  print_table(table, {"run", "steps", "final loss", "energy MAE (meV/atom)", "force MAE (meV/A)"}, rows);
  out << table.str();
  if (!a.common.out.empty()) {
    std::ofstream(a.common.out) << table.str();
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Three-stream interatomic potential toolkit", "tristream"};
  app.require_subcommand(1);
  app.fallthrough();
  Args a;
  app.add_option("--config", a.common.config, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", a.common.seed, "random seed (overrides TRISTREAM_SEED and the config)");
  app.add_flag("--deterministic", a.common.deterministic, "require bitwise reproducible execution");
  app.add_option("--workers", a.common.workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", a.common.out, "output path");
  app.add_option("--set", a.common.set, "override one configuration key (key=value), repeatable")
      ->allow_extra_args(false);

  auto* ingest = app.add_subcommand("ingest", "validate and summarize a dataset, optionally rewrite it");
  ingest->add_option("--data", a.data, "extended XYZ file or JSON manifest");
  ingest->add_option("--synthetic", a.synthetic, "generate a synthetic dataset instead")
      ->check(CLI::IsMember({"pairs", "retrieval"}));
  ingest->add_option("--count", a.count, "structures for --synthetic pairs")->check(CLI::PositiveNumber);
  ingest->add_option("--test-fraction", a.test_fraction, "assign a random test split")->check(CLI::Range(0.0, 0.99));

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  pre->add_option("--data", a.data, "dataset (train split is used)");
  pre->add_option("--init", a.init, "checkpoint to resume from");
  pre->add_option("--steps", a.steps, "total optimizer steps")->check(CLI::NonNegativeNumber);
  pre->add_option("--log", a.log, "CSV metric log");

  auto* fine = app.add_subcommand("finetune", "supervised energy and force training");
  fine->add_option("--data", a.data, "labeled dataset (train split is used)");
  fine->add_option("--init", a.init, "pretrained checkpoint");
  fine->add_option("--steps", a.steps, "total optimizer steps")->check(CLI::NonNegativeNumber);
  fine->add_option("--mode", a.mode, "force prediction")->check(CLI::IsMember({"conservative", "direct"}));
  fine->add_option("--eval", a.eval, "held-out dataset (default: the test split of --data)");
  fine->add_option("--log", a.log, "CSV metric log");

  auto* embed = app.add_subcommand("embed", "write frozen per-stream embeddings to an index");
  embed->add_option("--checkpoint", a.checkpoint, "model checkpoint");
  embed->add_option("--data", a.data, "structures to embed");

  auto* retrieve = app.add_subcommand("retrieve", "cosine nearest neighbours of one record");
  retrieve->add_option("--index", a.index, "embedding index");
  retrieve->add_option("--stream", a.stream, "comp, struct, int or joint")
      ->check(CLI::IsMember({"comp", "struct", "int", "joint"}));
  retrieve->add_option("--k", a.k, "neighbours")->check(CLI::PositiveNumber);
  retrieve->add_option("--query", a.query, "query record id");

  auto* probe = app.add_subcommand("probe", "train a probe on frozen embeddings");
  probe->add_option("--index", a.index, "embedding index");
  probe->add_option("--stream", a.stream, "comp, struct, int or joint")
      ->check(CLI::IsMember({"comp", "struct", "int", "joint"}));
  probe->add_option("--target", a.target, "label key");
  probe->add_option("--head", a.head, "linear or mlp")->check(CLI::IsMember({"linear", "mlp"}));
  probe->add_option("--test-fraction", a.test_fraction, "held-out fraction (default 0.2)")
      ->check(CLI::Range(0.01, 0.99));
  probe->add_option("--steps", a.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
  probe->add_flag("--shuffle", a.shuffle, "permute training labels (control)");

  auto* verify = app.add_subcommand("verify", "numerical checks of the energy/force coupling theory");
  verify->add_option("--suite", a.suite, "check suite")->check(CLI::IsMember({"theory"}));
  verify->add_option("--trials", a.trials, "random instances")->check(CLI::Range(1, 10000));

  auto* report = app.add_subcommand("report", "summarize CSV logs (MAE in meV/atom and meV/A)");
  report->add_option("logs", a.logs, "CSV logs")->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kUsage;
  }

  try {
    if (a.common.workers && *a.common.workers < 1) throw ConfigError("--workers must be positive");
    if (*ingest) return cmd_ingest(a, out, err);
    if (*pre) return cmd_pretrain(a, out, err);
    if (*fine) return cmd_finetune(a, out, err);
    if (*embed) return cmd_embed(a, out, err);
    if (*retrieve) return cmd_retrieve(a, out, err);
    if (*probe) return cmd_probe(a, out, err);
    if (*verify) return cmd_verify(a, out, err);
    if (*report) return cmd_report(a, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace tristream::cli
