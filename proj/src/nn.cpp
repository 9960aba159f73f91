#include "tristream/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tristream::nn {

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool bias,
                      double gain) {
  if (in < 1 || out < 1) throw std::invalid_argument("linear layer '" + name + "' needs positive widths");
  std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(in)));
  ad::Matrix w(in, out);
  for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", std::move(w));
  l.has_bias = bias;
  if (bias) l.bias = store.add(name + ".bias", ad::Matrix::Zero(1, out));
  return l;
}

ad::Var Linear::operator()(const ParameterStore& store, const ad::Var& x) const {
  ad::Var y = ad::matmul(x, store.var(weight));
  if (has_bias) y = ad::add(y, store.var(bias));
  return y;
}

Mlp Mlp::create(ParameterStore& store, const std::string& name, int in, const std::vector<int>& hidden, int out,
                Rng& rng) {
  Mlp m;
  int prev = in;
  for (std::size_t k = 0; k < hidden.size(); ++k) {
    m.layers.push_back(Linear::create(store, name + "." + std::to_string(k), prev, hidden[k], rng));
    prev = hidden[k];
  }
  m.layers.push_back(Linear::create(store, name + "." + std::to_string(hidden.size()), prev, out, rng));
  return m;
}

ad::Var Mlp::operator()(const ParameterStore& store, const ad::Var& x) const {
  ad::Var h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = layers[k](store, h);
    if (k + 1 < layers.size()) h = ad::silu(h);
  }
  return h;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int width) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", ad::Matrix::Ones(1, width));
  ln.beta = store.add(name + ".beta", ad::Matrix::Zero(1, width));
  return ln;
}

ad::Var LayerNorm::operator()(const ParameterStore& store, const ad::Var& x) const {
  const double inv = 1.0 / static_cast<double>(x.cols());
  const ad::Var mu = ad::scale(ad::sum_cols(x), inv);
  const ad::Var centered = ad::sub(x, mu);
  const ad::Var var = ad::scale(ad::sum_cols(ad::square(centered)), inv);
  const ad::Var normed = ad::div(centered, ad::sqrt(ad::add_scalar(var, eps)));
  return ad::add(ad::mul(normed, store.var(gamma)), store.var(beta));
}

ad::Var dropout(const ad::Var& x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  ad::Matrix mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (ad::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : 0.0;
  return ad::mul(x, ad::constant(std::move(mask)));
}

}  // namespace tristream::nn
