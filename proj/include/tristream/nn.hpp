#pragma once

#include "tristream/params.hpp"

#include <string>
#include <vector>

namespace tristream::nn {

struct Linear {
  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;
  bool has_bias = true;
  int in = 0;
  int out = 0;

  // Weights ~ N(0, gain^2 / in), biases zero.
  static Linear create(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                       bool bias = true, double gain = 1.0);
  ad::Var operator()(const ParameterStore& store, const ad::Var& x) const;
};

// Linear layers with SiLU between them and no activation after the last.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParameterStore& store, const std::string& name, int in, const std::vector<int>& hidden,
                    int out, Rng& rng);
  ad::Var operator()(const ParameterStore& store, const ad::Var& x) const;
  int in() const { return layers.front().in; }
  int out() const { return layers.back().out; }
};

struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  double eps = 1e-5;

  static LayerNorm create(ParameterStore& store, const std::string& name, int width);
  ad::Var operator()(const ParameterStore& store, const ad::Var& x) const;
};

// Inverted dropout; identity when p == 0 or rng is null.
ad::Var dropout(const ad::Var& x, double p, Rng* rng);

}  // namespace tristream::nn
