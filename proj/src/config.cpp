#include "tristream/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace tristream {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string format(int v) { return std::to_string(v); }
std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!trim(item).empty()) out.push_back(parse_number<T>(key, item));
  }
  return out;
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format(v[i]);
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename Access>
Field number(Access access) {
  return {[access](const RunConfig& c) { return format(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, const std::string& v) {
            auto& ref = access(c);
            ref = parse_number<std::remove_reference_t<decltype(ref)>>(k, v);
          }};
}

template <typename Access>
Field boolean(Access access) {
  return {[access](const RunConfig& c) { return format(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); }};
}

template <typename Access>
Field list(Access access) {
  return {[access](const RunConfig& c) { return format_list(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, const std::string& v) {
            auto& ref = access(c);
            ref = parse_list<typename std::remove_reference_t<decltype(ref)>::value_type>(k, v);
          }};
}

template <typename Access>
Field text(Access access) {
  return {[access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); },
          [access](RunConfig& c, const std::string&, const std::string& v) { access(c) = trim(v); }};
}

Field optimizer_fields(const std::string& which, const std::string& leaf) {
  auto opt = [which](RunConfig& c) -> OptimizerConfig& { return which == "pretrain" ? c.pretrain : c.finetune.optimizer; };
  if (leaf == "lr") return number([opt](RunConfig& c) -> double& { return opt(c).lr; });
  if (leaf == "warmup") return number([opt](RunConfig& c) -> int& { return opt(c).warmup; });
  if (leaf == "steps") return number([opt](RunConfig& c) -> int& { return opt(c).steps; });
  if (leaf == "weight_decay") return number([opt](RunConfig& c) -> double& { return opt(c).weight_decay; });
  if (leaf == "clip") return number([opt](RunConfig& c) -> double& { return opt(c).clip; });
  if (leaf == "batch_size") return number([opt](RunConfig& c) -> int& { return opt(c).batch_size; });
  if (leaf == "beta1") return number([opt](RunConfig& c) -> double& { return opt(c).beta1; });
  if (leaf == "beta2") return number([opt](RunConfig& c) -> double& { return opt(c).beta2; });
  return number([opt](RunConfig& c) -> double& { return opt(c).eps; });
}

using Schema = std::vector<std::pair<std::string, Field>>;

const Schema& schema() {
  static const Schema s = [] {
    Schema f;
    auto add = [&f](const std::string& k, Field field) { f.emplace_back(k, std::move(field)); };
    // model.comp
    add("model.comp.d_model", number([](RunConfig& c) -> int& { return c.model.comp.d_model; }));
    add("model.comp.layers", number([](RunConfig& c) -> int& { return c.model.comp.layers; }));
    add("model.comp.heads", number([](RunConfig& c) -> int& { return c.model.comp.heads; }));
    add("model.comp.d_ff", number([](RunConfig& c) -> int& { return c.model.comp.d_ff; }));
    add("model.comp.dropout", number([](RunConfig& c) -> double& { return c.model.comp.dropout; }));
    add("model.comp.count_bias", boolean([](RunConfig& c) -> bool& { return c.model.comp.count_bias; }));
    add("model.comp.count_embedding", boolean([](RunConfig& c) -> bool& { return c.model.comp.count_embedding; }));
    // model.struct
    add("model.struct.d_model", number([](RunConfig& c) -> int& { return c.model.structure.d_model; }));
    add("model.struct.r_cut", number([](RunConfig& c) -> double& { return c.model.structure.r_cut; }));
    add("model.struct.radial_count", number([](RunConfig& c) -> int& { return c.model.structure.radial_count; }));
    add("model.struct.mixed_channels", number([](RunConfig& c) -> int& { return c.model.structure.mixed_channels; }));
    add("model.struct.lmax", number([](RunConfig& c) -> int& { return c.model.structure.lmax; }));
    add("model.struct.basis",
        {[](const RunConfig& c) { return std::string(to_string(c.model.structure.basis)); },
         [](RunConfig& c, const std::string& k, const std::string& v) {
           try {
             c.model.structure.basis = radial_kind_from_string(trim(v));
           } catch (const std::exception&) {
             throw ConfigError("config key '" + k + "': unknown radial basis '" + v + "'");
           }
         }});
    add("model.struct.mlp_layers", number([](RunConfig& c) -> int& { return c.model.structure.mlp_layers; }));
    add("model.struct.mp_layers", number([](RunConfig& c) -> int& { return c.model.structure.mp_layers; }));
    add("model.struct.scales", list([](RunConfig& c) -> std::vector<double>& { return c.model.structure.scales; }));
    add("model.struct.lattice", boolean([](RunConfig& c) -> bool& { return c.model.structure.lattice; }));
    add("model.struct.density_norm", number([](RunConfig& c) -> double& { return c.model.structure.density_norm; }));
    // model.inter
    add("model.inter.d_model", number([](RunConfig& c) -> int& { return c.model.interaction.d_model; }));
    add("model.inter.layers", number([](RunConfig& c) -> int& { return c.model.interaction.layers; }));
    add("model.inter.backbone", text([](RunConfig& c) -> std::string& { return c.model.interaction.backbone; }));
    // model.heads and switches
    add("model.heads.energy_hidden", list([](RunConfig& c) -> std::vector<int>& { return c.model.heads.energy_hidden; }));
    add("model.heads.pair_hidden", list([](RunConfig& c) -> std::vector<int>& { return c.model.heads.pair_hidden; }));
    add("model.heads.mask_hidden", list([](RunConfig& c) -> std::vector<int>& { return c.model.heads.mask_hidden; }));
    add("model.heads.additive", boolean([](RunConfig& c) -> bool& { return c.model.heads.additive; }));
    add("model.streams.comp", boolean([](RunConfig& c) -> bool& { return c.model.streams.comp; }));
    add("model.streams.struct", boolean([](RunConfig& c) -> bool& { return c.model.streams.structure; }));
    add("model.streams.inter", boolean([](RunConfig& c) -> bool& { return c.model.streams.interaction; }));
    add("model.graph_cutoff", number([](RunConfig& c) -> double& { return c.model.graph_cutoff; }));
    add("model.max_neighbors", number([](RunConfig& c) -> int& { return c.model.max_neighbors; }));
    // augment
    add("augment.noise_min", number([](RunConfig& c) -> double& { return c.augment.noise_min; }));
    add("augment.noise_max", number([](RunConfig& c) -> double& { return c.augment.noise_max; }));
    add("augment.mask_probability", number([](RunConfig& c) -> double& { return c.augment.mask_probability; }));
    add("augment.rotation_max_degrees", number([](RunConfig& c) -> double& { return c.augment.rotation_max_degrees; }));
    add("augment.cell_sigma_min", number([](RunConfig& c) -> double& { return c.augment.cell_sigma_min; }));
    add("augment.cell_sigma_max", number([](RunConfig& c) -> double& { return c.augment.cell_sigma_max; }));
    add("augment.radius_min", number([](RunConfig& c) -> double& { return c.augment.radius_min; }));
    add("augment.radius_max", number([](RunConfig& c) -> double& { return c.augment.radius_max; }));
    add("augment.neighbors_min", number([](RunConfig& c) -> int& { return c.augment.neighbors_min; }));
    add("augment.neighbors_max", number([](RunConfig& c) -> int& { return c.augment.neighbors_max; }));
    add("augment.max_augmentations", number([](RunConfig& c) -> int& { return c.augment.max_augmentations; }));
    add("augment.views", number([](RunConfig& c) -> int& { return c.augment.views; }));
    // ssl
    add("ssl.denoise", number([](RunConfig& c) -> double& { return c.ssl.denoise; }));
    add("ssl.mask", number([](RunConfig& c) -> double& { return c.ssl.mask; }));
    add("ssl.lejepa_node", number([](RunConfig& c) -> double& { return c.ssl.lejepa_node; }));
    add("ssl.lejepa_graph", number([](RunConfig& c) -> double& { return c.ssl.lejepa_graph; }));
    add("ssl.sigreg", number([](RunConfig& c) -> double& { return c.ssl.sigreg; }));
    add("ssl.slices", number([](RunConfig& c) -> int& { return c.ssl.slices; }));
    add("ssl.t_max", number([](RunConfig& c) -> double& { return c.ssl.t_max; }));
    add("ssl.quadrature", number([](RunConfig& c) -> int& { return c.ssl.quadrature; }));
    // optimizers
    for (const std::string which : {"pretrain", "finetune"}) {
      for (const std::string leaf :
           {"lr", "warmup", "steps", "weight_decay", "clip", "batch_size", "beta1", "beta2", "eps"}) {
        add(which + "." + leaf, optimizer_fields(which, leaf));
      }
    }
    add("finetune.energy_weight", number([](RunConfig& c) -> double& { return c.finetune.energy_weight; }));
    add("finetune.force_weight", number([](RunConfig& c) -> double& { return c.finetune.force_weight; }));
    add("finetune.loss", {[](const RunConfig& c) { return std::string(to_string(c.finetune.loss)); },
                          [](RunConfig& c, const std::string& k, const std::string& v) {
                            try {
                              c.finetune.loss = supervised_loss_from_string(trim(v));
                            } catch (const std::exception&) {
                              throw ConfigError("config key '" + k + "': unknown loss '" + v + "'");
                            }
                          }});
    add("finetune.mode", {[](const RunConfig& c) { return std::string(to_string(c.finetune.mode)); },
                          [](RunConfig& c, const std::string& k, const std::string& v) {
                            try {
                              c.finetune.mode = force_mode_from_string(trim(v));
                            } catch (const std::exception&) {
                              throw ConfigError("config key '" + k + "': unknown force mode '" + v + "'");
                            }
                          }});
    // run
    add("seed", number([](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    add("deterministic", boolean([](RunConfig& c) -> bool& { return c.deterministic; }));
    add("workers", number([](RunConfig& c) -> int& { return c.workers; }));
    return f;
  }();
  return s;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : schema())
    if (k == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, f] : schema()) out.push_back(key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : schema()) out[k] = f.get(*this);
  return out;
}

void RunConfig::merge_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ": line " + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": line " + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, f] : schema()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

std::map<std::string, std::string> model_config_to_map(const ModelConfig& config) {
  RunConfig r;
  r.model = config;
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : schema())
    if (k.rfind("model.", 0) == 0) out[k] = f.get(r);
  return out;
}

ModelConfig model_config_from_map(const std::map<std::string, std::string>& values) {
  RunConfig r;
  for (const auto& [k, v] : values) {
    if (k.rfind("model.", 0) != 0) throw ConfigError("not a model key: '" + k + "'");
    r.set(k, v);
  }
  return r.model;
}

std::uint64_t seed_from_environment(std::uint64_t fallback) {
  const char* env = std::getenv("TRISTREAM_SEED");
  if (!env || !*env) return fallback;
  return parse_number<std::uint64_t>("TRISTREAM_SEED", env);
}

}  // namespace tristream
