#include "tristream/io.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace tristream {

namespace {

const std::array<std::string, kMaxAtomicNumber + 1> kSymbols = {
    "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac",
    "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm"};

// Labels that must parse as numbers; everything else is kept as text.
bool is_numeric_label(const std::string& key) {
  return key == labels::kEnergy || key == labels::kFormationEnergy || key == labels::kCrystalSystem ||
         key == labels::kSpaceGroup;
}

std::string format_real(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

[[noreturn]] void fail(const std::string& source, std::size_t line, std::size_t record, const std::string& what) {
  std::ostringstream os;
  os << source << ": line " << line << " (record " << record << "): " << what;
  throw InputError(os.str());
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  const char* begin = text.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  return end == begin + text.size() && std::isfinite(out);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

// key=value pairs; values may be double-quoted and contain spaces.
std::vector<std::pair<std::string, std::string>> parse_comment(const std::string& line, bool& ok) {
  std::vector<std::pair<std::string, std::string>> out;
  ok = true;
  std::size_t i = 0;
  const std::size_t n = line.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= n) break;
    std::string key;
    while (i < n && line[i] != '=' && !std::isspace(static_cast<unsigned char>(line[i]))) key.push_back(line[i++]);
    if (i >= n || line[i] != '=') {
      out.emplace_back(key, "T");  // bare flag
      continue;
    }
    ++i;
    std::string value;
    if (i < n && line[i] == '"') {
      ++i;
      while (i < n && line[i] != '"') value.push_back(line[i++]);
      if (i >= n) {
        ok = false;
        return out;
      }
      ++i;
    } else {
      while (i < n && !std::isspace(static_cast<unsigned char>(line[i]))) value.push_back(line[i++]);
    }
    if (key.empty()) {
      ok = false;
      return out;
    }
    out.emplace_back(key, value);
  }
  return out;
}

struct Column {
  std::string name;
  char type;
  int width;
};

std::string quote_if_needed(const std::string& v) {
  bool needs = v.empty();
  for (char ch : v) {
    if (std::isspace(static_cast<unsigned char>(ch)) || ch == '=') needs = true;
  }
  return needs ? "\"" + v + "\"" : v;
}

}  // namespace

const std::string& element_symbol(int z) {
  if (z < 1 || z > kMaxAtomicNumber) throw InputError("atomic number out of range: " + std::to_string(z));
  return kSymbols[static_cast<std::size_t>(z)];
}

int atomic_number(const std::string& symbol) {
  static const std::unordered_map<std::string, int> table = [] {
    std::unordered_map<std::string, int> t;
    for (int z = 1; z <= kMaxAtomicNumber; ++z) t[kSymbols[static_cast<std::size_t>(z)]] = z;
    return t;
  }();
  auto it = table.find(symbol);
  if (it != table.end()) return it->second;
  if (!symbol.empty() && std::all_of(symbol.begin(), symbol.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    const int z = std::stoi(symbol);
    if (z >= 1 && z <= kMaxAtomicNumber) return z;
  }
  throw InputError("unknown element '" + symbol + "'");
}

std::vector<AtomicStructure> read_xyz(std::istream& in, const std::string& source) {
  std::vector<AtomicStructure> out;
  std::string line;
  std::size_t lineno = 0;
  while (true) {
    // Skip blank separator lines between frames.
    bool have = false;
    while (std::getline(in, line)) {
      ++lineno;
      if (!split_ws(line).empty()) {
        have = true;
        break;
      }
    }
    if (!have) break;
    const std::size_t record = out.size();
    long natoms = 0;
    {
      const auto toks = split_ws(line);
      double v = 0.0;
      if (toks.size() != 1 || !parse_double(toks[0], v) || v < 1 || std::floor(v) != v) {
        fail(source, lineno, record, "expected a positive atom count, got '" + line + "'");
      }
      natoms = static_cast<long>(v);
    }
    if (!std::getline(in, line)) fail(source, lineno + 1, record, "missing comment line");
    ++lineno;
    bool ok = true;
    const auto pairs = parse_comment(line, ok);
    if (!ok) fail(source, lineno, record, "unterminated quote in comment line");

    AtomicStructure s;
    std::vector<Column> columns{{"species", 'S', 1}, {"pos", 'R', 3}};
    bool saw_lattice = false;
    std::optional<bool> pbc;
    for (const auto& [key, value] : pairs) {
      if (key == "Lattice") {
        const auto toks = split_ws(value);
        if (toks.size() != 9) fail(source, lineno, record, "Lattice needs 9 numbers");
        Mat3 cell;
        for (int k = 0; k < 9; ++k) {
          double v;
          if (!parse_double(toks[static_cast<std::size_t>(k)], v)) fail(source, lineno, record, "bad Lattice entry");
          cell(k / 3, k % 3) = v;
        }
        s.cell = cell;
        saw_lattice = true;
      } else if (key == "Properties") {
        const auto parts = split_on(value, ':');
        if (parts.size() % 3 != 0) fail(source, lineno, record, "malformed Properties");
        columns.clear();
        for (std::size_t k = 0; k < parts.size(); k += 3) {
          double w;
          if (parts[k + 1].size() != 1 || !parse_double(parts[k + 2], w) || w < 1) {
            fail(source, lineno, record, "malformed Properties entry '" + parts[k] + "'");
          }
          columns.push_back({parts[k], parts[k + 1][0], static_cast<int>(w)});
        }
      } else if (key == "pbc") {
        const auto toks = split_ws(value);
        int t = 0;
        for (const auto& tok : toks) {
          if (tok == "T" || tok == "True" || tok == "1") ++t;
        }
        if (t != 0 && t != static_cast<int>(toks.size())) {
          fail(source, lineno, record, "mixed periodicity is not supported");
        }
        pbc = t > 0;
      } else if (is_numeric_label(key)) {
        double v;
        if (!parse_double(value, v)) fail(source, lineno, record, "label '" + key + "' is not a number");
        s.labels[key] = v;
      } else {
        s.labels[key] = value;
      }
    }
    s.periodic = pbc.value_or(saw_lattice);
    if (s.periodic && !saw_lattice) fail(source, lineno, record, "pbc set without Lattice");

    bool has_species = false, has_pos = false;
    for (const auto& c : columns) {
      if (c.name == "species") {
        if (c.type != 'S' || c.width != 1) fail(source, lineno, record, "species must be S:1");
        has_species = true;
      } else if (c.name == "pos") {
        if (c.type != 'R' || c.width != 3) fail(source, lineno, record, "pos must be R:3");
        has_pos = true;
      } else if (c.type != 'R' && c.type != 'I') {
        fail(source, lineno, record, "unsupported column type for '" + c.name + "'");
      }
    }
    if (!has_species || !has_pos) fail(source, lineno, record, "Properties must include species and pos");

    s.species.resize(static_cast<std::size_t>(natoms));
    s.positions.resize(natoms, 3);
    std::map<std::string, PerAtom> extra;
    for (const auto& c : columns) {
      if (c.name != "species" && c.name != "pos") extra[c.name] = PerAtom(natoms, c.width);
    }
    for (long a = 0; a < natoms; ++a) {
      if (!std::getline(in, line)) fail(source, lineno + 1, record, "unexpected end of file in atom block");
      ++lineno;
      const auto toks = split_ws(line);
      std::size_t at = 0;
      for (const auto& c : columns) {
        if (at + static_cast<std::size_t>(c.width) > toks.size()) fail(source, lineno, record, "too few columns");
        if (c.name == "species") {
          try {
            s.species[static_cast<std::size_t>(a)] = atomic_number(toks[at]);
          } catch (const InputError& e) {
            fail(source, lineno, record, e.what());
          }
        } else {
          for (int k = 0; k < c.width; ++k) {
            double v;
            if (!parse_double(toks[at + static_cast<std::size_t>(k)], v)) {
              fail(source, lineno, record, "bad number '" + toks[at + static_cast<std::size_t>(k)] + "'");
            }
            if (c.name == "pos") {
              s.positions(a, k) = v;
            } else {
              extra[c.name](a, k) = v;
            }
          }
        }
        at += static_cast<std::size_t>(c.width);
      }
      if (at != toks.size()) fail(source, lineno, record, "too many columns");
    }
    for (auto& [name, m] : extra) s.labels[name] = std::move(m);
    try {
      s.validate();
    } catch (const InputError& e) {
      fail(source, lineno, record, e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<AtomicStructure> read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return read_xyz(in, path.string());
}

void write_xyz(std::ostream& out, const std::vector<AtomicStructure>& structures) {
  for (const auto& s : structures) {
    s.validate();
    out << s.size() << '\n';
    std::vector<std::pair<std::string, const PerAtom*>> arrays;
    for (const auto& [key, value] : s.labels) {
      if (const auto* m = std::get_if<PerAtom>(&value)) arrays.emplace_back(key, m);
    }
    std::ostringstream comment;
    if (s.cell) {
      comment << "Lattice=\"";
      for (int k = 0; k < 9; ++k) comment << (k ? " " : "") << format_real((*s.cell)(k / 3, k % 3), 17);
      comment << "\" ";
    }
    comment << "Properties=species:S:1:pos:R:3";
    for (const auto& [key, m] : arrays) comment << ':' << key << ":R:" << m->cols();
    comment << " pbc=\"" << (s.periodic ? "T T T" : "F F F") << '"';
    for (const auto& [key, value] : s.labels) {
      if (const auto* d = std::get_if<double>(&value)) {
        comment << ' ' << key << '=' << format_real(*d, 17);
      } else if (const auto* t = std::get_if<std::string>(&value)) {
        comment << ' ' << key << '=' << quote_if_needed(*t);
      }
    }
    out << comment.str() << '\n';
    for (std::size_t a = 0; a < s.size(); ++a) {
      const auto i = static_cast<Eigen::Index>(a);
      out << element_symbol(s.species[a]);
      for (int k = 0; k < 3; ++k) out << ' ' << format_real(s.positions(i, k), 17);
      for (const auto& [key, m] : arrays) {
        for (Eigen::Index k = 0; k < m->cols(); ++k) out << ' ' << format_real((*m)(i, k), 17);
      }
      out << '\n';
    }
  }
}

void write_xyz(const std::filesystem::path& path, const std::vector<AtomicStructure>& structures) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  write_xyz(out, structures);
  if (!out) throw InputError("write failed for " + path.string());
}

std::vector<std::size_t> Dataset::indices_of(const std::string& split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) idx.push_back(i);
  }
  return idx;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset d;
  for (std::size_t i : indices) {
    d.structures.push_back(structures.at(i));
    d.splits.push_back(splits.at(i));
    d.sources.push_back(sources.at(i));
  }
  return d;
}

Dataset read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(manifest.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "tristream-manifest") throw InputError(manifest.string() + ": not a dataset manifest");
  if (doc.value("version", 0) != 1) throw InputError(manifest.string() + ": unsupported manifest version");
  Dataset d;
  const auto base = manifest.parent_path();
  std::size_t entry = 0;
  for (const auto& f : doc.at("files")) {
    std::filesystem::path p = f.at("path").get<std::string>();
    if (p.is_relative()) p = base / p;
    auto records = read_xyz(p);
    std::vector<std::string> per_record;
    if (f.contains("splits")) {
      per_record = f.at("splits").get<std::vector<std::string>>();
      if (per_record.size() != records.size()) {
        throw InputError(manifest.string() + ": file entry " + std::to_string(entry) +
                         " lists a split count different from its record count");
      }
    } else {
      per_record.assign(records.size(), f.value("split", "train"));
    }
    for (std::size_t r = 0; r < records.size(); ++r) {
      d.structures.push_back(std::move(records[r]));
      d.splits.push_back(per_record[r]);
      d.sources.push_back(p.string());
    }
    ++entry;
  }
  return d;
}

void write_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& files,
                    const std::vector<std::string>& splits) {
  if (files.size() != splits.size()) throw std::invalid_argument("one split per file is required");
  nlohmann::json doc;
  doc["format"] = "tristream-manifest";
  doc["version"] = 1;
  doc["files"] = nlohmann::json::array();
  for (std::size_t i = 0; i < files.size(); ++i) doc["files"].push_back({{"path", files[i]}, {"split", splits[i]}});
  std::ofstream out(manifest);
  if (!out) throw InputError("cannot write " + manifest.string());
  out << doc.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (path.extension() == ".json") return read_manifest(path);
  Dataset d;
  d.structures = read_xyz(path);
  d.splits.assign(d.structures.size(), "train");
  d.sources.assign(d.structures.size(), path.string());
  return d;
}

}  // namespace tristream
