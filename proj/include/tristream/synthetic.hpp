#pragma once

#include "tristream/params.hpp"
#include "tristream/structure.hpp"

#include <map>
#include <vector>

namespace tristream::synthetic {

// Lennard-Jones pair energy with per-species well depth and size, Lorentz-
// Berthelot mixing, and a cosine switch from r_on to r_cut:
//   E = sum_{i<j} 4 eps_ij ((s_ij/r)^12 - (s_ij/r)^6) S(r) + sum_i e0_{z_i}
struct PairPotential {
  struct Species {
    double epsilon;    // eV
    double sigma;      // A
    double reference;  // eV per atom
  };
  std::map<int, Species> species;
  double r_on = 4.0;
  double r_cut = 5.0;

  double energy(const AtomicStructure& s) const;
  PerAtom forces(const AtomicStructure& s) const;
  // Pair energy at separation r for the pair (a, b), including the switch.
  double pair(int a, int b, double r) const;
};

// Species 1..k with well depths spread over [0.02, 0.4] eV, sizes over
// [2.0, 2.6] A and reference energies over [-3, -1] eV, drawn from rng.
PairPotential random_pair_potential(Rng& rng, const std::vector<int>& elements);

struct PairDatasetOptions {
  int count = 2000;
  int min_atoms = 4;
  int max_atoms = 10;
  std::vector<int> elements{1, 3, 6, 8, 11, 14, 26, 29};
  int max_species_per_structure = 3;
  double periodic_fraction = 0.25;
};

// Random clusters and small cells labeled with energy and forces. The
// potential used is returned alongside.
std::vector<AtomicStructure> pair_potential_dataset(Rng& rng, const PairDatasetOptions& options,
                                                    PairPotential* potential = nullptr);

struct RetrievalCorpusOptions {
  int composition_families = 25;
  int geometry_families = 20;
  int atoms = 8;
  double jitter = 0.03;  // A
};

// Every (composition family, geometry family) cross once. Labels:
// "composition_family", "geometry_family", "element_set".
std::vector<AtomicStructure> retrieval_corpus(Rng& rng, const RetrievalCorpusOptions& options);

}  // namespace tristream::synthetic
