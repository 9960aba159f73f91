#include "tristream/analysis.hpp"
#include "tristream/cli.hpp"
#include "tristream/config.hpp"
#include "tristream/io.hpp"
#include "tristream/synthetic.hpp"
#include "tristream/theory.hpp"
#include "tristream/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace tristream;

namespace {

// Python-side config values may be str, bool, int, float or a sequence of them.
std::string config_text(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
  if (py::isinstance<py::str>(v)) return v.cast<std::string>();
  if (py::isinstance<py::sequence>(v)) {
    std::string out;
    for (const auto& item : v.cast<py::sequence>()) out += (out.empty() ? "" : ",") + config_text(item);
    return out;
  }
  return py::str(v).cast<std::string>();
}

RunConfig run_config(const py::dict& overrides, std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  for (const auto& [k, v] : overrides) c.set(k.cast<std::string>(), config_text(v));
  return c;
}

ModelConfig model_config(const py::dict& overrides) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : overrides) {
    auto key = k.cast<std::string>();
    if (key.rfind("model.", 0) != 0) key = "model." + key;
    m[key] = config_text(v);
  }
  return model_config_from_map(m);
}

std::vector<const AtomicStructure*> pointers(const std::vector<AtomicStructure>& v) {
  std::vector<const AtomicStructure*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

py::object label_to_python(const LabelValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return py::float_(*d);
  if (const auto* s = std::get_if<std::string>(&v)) return py::str(*s);
  return py::cast(std::get<PerAtom>(v));
}

LabelValue label_from_python(const py::handle& v) {
  if (py::isinstance<py::str>(v)) return v.cast<std::string>();
  if (py::isinstance<py::float_>(v) || py::isinstance<py::int_>(v)) return v.cast<double>();
  return v.cast<PerAtom>();
}

py::list log_rows(const std::vector<LogRow>& rows) {
  py::list out;
  for (const auto& r : rows) out.append(py::cast(r));
  return out;
}

}  // namespace

PYBIND11_MODULE(_tristream, m) {
  m.doc() = "Three-stream interatomic potential: data, models, training, retrieval and checks";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);

  py::class_<AtomicStructure>(m, "Structure")
      .def(py::init([](std::vector<int> species, Positions positions, std::optional<Mat3> cell,
                       std::optional<bool> periodic) {
             AtomicStructure s;
             s.species = std::move(species);
             s.positions = std::move(positions);
             s.cell = cell;
             s.periodic = periodic.value_or(cell.has_value());
             s.validate();
             return s;
           }),
           py::arg("species"), py::arg("positions"), py::arg("cell") = py::none(), py::arg("periodic") = py::none())
      .def_readwrite("species", &AtomicStructure::species)
      .def_readwrite("positions", &AtomicStructure::positions)
      .def_readwrite("cell", &AtomicStructure::cell)
      .def_readwrite("periodic", &AtomicStructure::periodic)
      .def("__len__", &AtomicStructure::size)
      .def_property_readonly("energy", &AtomicStructure::energy)
      .def_property_readonly("forces", &AtomicStructure::forces)
      .def_property_readonly("labels",
                             [](const AtomicStructure& s) {
                               py::dict d;
                               for (const auto& [k, v] : s.labels) d[py::str(k)] = label_to_python(v);
                               return d;
                             })
      .def("set_label",
           [](AtomicStructure& s, const std::string& key, const py::handle& value) {
             s.labels[key] = label_from_python(value);
             s.validate();
           })
      .def("validate", &AtomicStructure::validate)
      .def("rotated", &rotated)
      .def("__repr__", [](const AtomicStructure& s) {
        std::ostringstream r;
        r << "<Structure " << s.size() << " atoms" << (s.periodic ? ", periodic" : "") << '>';
        return r.str();
      });

  m.def("read_xyz", py::overload_cast<const std::filesystem::path&>(&read_xyz), py::arg("path"));
  m.def("write_xyz", py::overload_cast<const std::filesystem::path&, const std::vector<AtomicStructure>&>(&write_xyz),
        py::arg("path"), py::arg("structures"));
  m.def(
      "load_dataset",
      [](const std::filesystem::path& path) {
        auto d = load_dataset(path);
        return py::make_tuple(std::move(d.structures), std::move(d.splits));
      },
      py::arg("path"), "Returns (structures, splits).");

  m.def(
      "pair_potential_dataset",
      [](std::uint64_t seed, int count) {
        Rng rng(seed);
        synthetic::PairDatasetOptions o;
        o.count = count;
        return synthetic::pair_potential_dataset(rng, o);
      },
      py::arg("seed"), py::arg("count") = 2000);
  m.def(
      "retrieval_corpus",
      [](std::uint64_t seed) {
        Rng rng(seed);
        return synthetic::retrieval_corpus(rng, {});
      },
      py::arg("seed"));

  m.def(
      "default_config", [] { return RunConfig{}.to_map(); }, "Every configuration key with its default value.");

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::dict& config, std::uint64_t seed) { return Model(model_config(config), seed); }),
           py::arg("config") = py::dict(), py::arg("seed") = 0)
      .def_static("load", &load_model, py::arg("checkpoint"))
      .def_property_readonly("seed", &Model::seed)
      .def_property_readonly("config", [](const Model& m) { return model_config_to_map(m.config()); })
      .def_property_readonly("parameter_count", [](const Model& m) { return m.params().scalar_count(); })
      .def(
          "predict",
          [](const Model& model, const std::vector<AtomicStructure>& structures, const std::string& mode) {
            const auto batch = Batch::assemble(pointers(structures), model.config().graph_cutoff,
                                               model.config().max_neighbors);
            const auto p = model.predict(batch, force_mode_from_string(mode));
            py::list forces;
            for (std::size_t s = 0; s < structures.size(); ++s) {
              forces.append(py::cast(PerAtom(p.forces.middleRows(batch.node_offset[s], batch.atom_counts[s]))));
            }
            return py::make_tuple(p.energy, forces);
          },
          py::arg("structures"), py::arg("mode") = "conservative", "Returns (energies, per-structure forces).")
      .def(
          "evaluate",
          [](const Model& model, const std::vector<AtomicStructure>& data, const std::string& mode) {
            const auto r = evaluate(model, data, force_mode_from_string(mode));
            return py::dict(py::arg("energy_mae") = r.energy_mae, py::arg("force_mae") = r.force_mae,
                            py::arg("structures") = r.structures, py::arg("atoms") = r.atoms);
          },
          py::arg("structures"), py::arg("mode") = "conservative")
      .def(
          "save",
          [](const Model& model, const std::filesystem::path& path) {
            save_checkpoint(path, TrainState(model.clone(), model.seed()));
          },
          py::arg("path"));

  m.def(
      "pretrain",
      [](const Model& model, const std::vector<AtomicStructure>& data, const py::dict& config, std::uint64_t seed) {
        const RunConfig c = run_config(config, seed);
        TrainState state(model.clone(), seed);
        CsvLog log;
        {
          py::gil_scoped_release release;
          pretrain(state, data, c.pretrain_config(), [&](const LogRow& r) { log.add(r); });
        }
        return py::make_tuple(std::move(state.model), log_rows(log.rows()));
      },
      py::arg("model"), py::arg("structures"), py::arg("config") = py::dict(), py::arg("seed") = 0,
      "Self-supervised pretraining from `model`; returns (trained model, log rows).");
  m.def(
      "finetune",
      [](const Model& model, const std::vector<AtomicStructure>& data, const py::dict& config, std::uint64_t seed) {
        const RunConfig c = run_config(config, seed);
        TrainState state(model.clone(), seed);
        CsvLog log;
        {
          py::gil_scoped_release release;
          finetune(state, data, c.finetune, [&](const LogRow& r) { log.add(r); });
        }
        return py::make_tuple(std::move(state.model), log_rows(log.rows()));
      },
      py::arg("model"), py::arg("structures"), py::arg("config") = py::dict(), py::arg("seed") = 0,
      "Supervised energy/force training from `model`; returns (trained model, log rows).");

  py::class_<analysis::EmbeddingIndex>(m, "EmbeddingIndex")
      .def_static("load", &analysis::EmbeddingIndex::load, py::arg("path"))
      .def("save", &analysis::EmbeddingIndex::save, py::arg("path"))
      .def("__len__", &analysis::EmbeddingIndex::size)
      .def(
          "vectors",
          [](const analysis::EmbeddingIndex& index, const std::string& space) {
            return analysis::Vectors(index.vectors(analysis::space_from_string(space)));
          },
          py::arg("space"))
      .def(
          "labels",
          [](const analysis::EmbeddingIndex& index, std::size_t id) { return index.labels(id); }, py::arg("id"))
      .def(
          "retrieve",
          [](const analysis::EmbeddingIndex& index, std::size_t query, const std::string& space, int k) {
            std::vector<std::pair<std::size_t, double>> out;
            for (const auto& h : analysis::knn_retrieve(index, query, analysis::space_from_string(space), k))
              out.emplace_back(h.id, h.score);
            return out;
          },
          py::arg("query"), py::arg("space"), py::arg("k") = 5, "[(id, cosine score)] best first.")
      .def(
          "recall_at_k",
          [](const analysis::EmbeddingIndex& index, const std::string& space, const std::string& target, int k) {
            return analysis::recall_at_k(index, analysis::space_from_string(space), target, k).recall;
          },
          py::arg("space"), py::arg("target"), py::arg("k") = 10);

  m.def("embed", py::overload_cast<const Model&, const std::vector<AtomicStructure>&, int>(&analysis::embed_dataset),
        py::arg("model"), py::arg("structures"), py::arg("batch_size") = 16);

  m.def(
      "_verify_theory_json",
      [](std::uint64_t seed, int trials) {
        py::gil_scoped_release release;
        return theory::run_suite({seed, trials}).to_json().dump();
      },
      py::arg("seed") = 0, py::arg("trials") = 20);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");
}
