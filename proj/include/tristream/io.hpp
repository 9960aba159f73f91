#pragma once

#include "tristream/structure.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace tristream {

// Extended XYZ. Lattice="ax ay az bx by bz cx cy cz", pbc="T T T",
// Properties=species:S:1:pos:R:3[:forces:R:3...]. Species may be symbols or
// atomic numbers. Reals are written with 12 significant digits, scalar labels
// with 17 so that numeric labels survive exactly.
std::vector<AtomicStructure> read_xyz(std::istream& in, const std::string& source = "<stream>");
std::vector<AtomicStructure> read_xyz(const std::filesystem::path& path);
void write_xyz(std::ostream& out, const std::vector<AtomicStructure>& structures);
void write_xyz(const std::filesystem::path& path, const std::vector<AtomicStructure>& structures);

const std::string& element_symbol(int z);
int atomic_number(const std::string& symbol);  // accepts symbols or decimal numbers

struct Dataset {
  std::vector<AtomicStructure> structures;
  std::vector<std::string> splits;  // one entry per structure, e.g. "train"
  std::vector<std::string> sources;  // originating file per structure

  std::size_t size() const { return structures.size(); }
  std::vector<std::size_t> indices_of(const std::string& split) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

// Manifest: {"format": "tristream-manifest", "version": 1,
//            "files": [{"path": "a.xyz", "split": "train"}, ...]}
// Relative paths resolve against the manifest's directory. A file entry may carry
// "splits": ["train", "test", ...] with one split per record instead of "split".
Dataset read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& files,
                    const std::vector<std::string>& splits);

// Loads either a manifest (.json) or a single extended-XYZ file (all "train").
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace tristream
