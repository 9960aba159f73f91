#include "tristream/comp_stream.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tristream {

void CompStreamConfig::validate() const {
  if (d_model < 1 || layers < 0 || heads < 1 || d_ff < 1) throw std::invalid_argument("invalid composition stream widths");
  if (d_model % heads != 0) throw std::invalid_argument("comp d_model must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("comp dropout must lie in [0, 1)");
  if (vocab < 1) throw std::invalid_argument("comp vocab must be positive");
}

CompTokens CompTokens::from(const Composition& c) {
  CompTokens t;
  t.append(c, 0);
  return t;
}

void CompTokens::append(const Composition& c, int segment_id) {
  for (const auto& tok : c.tokens) {
    types.push_back(tok.z);
    counts.push_back(tok.count);
    segment.push_back(segment_id);
  }
}

ad::Matrix count_weighted_attention(const ad::Matrix& logits, const std::vector<int>& counts) {
  if (logits.rows() != logits.cols() || static_cast<std::size_t>(logits.cols()) != counts.size()) {
    throw std::invalid_argument("count_weighted_attention: logits must be T x T with T counts");
  }
  ad::Matrix biased = logits;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    if (counts[s] < 1) throw DomainError("count_weighted_attention: counts must be >= 1");
    biased.col(static_cast<ad::Index>(s)).array() += std::log(static_cast<double>(counts[s]));
  }
  return ad::softmax_rows(ad::constant(std::move(biased))).value();
}

CompStream CompStream::create(ParameterStore& store, const CompStreamConfig& config, Rng& rng) {
  config.validate();
  CompStream c;
  c.config_ = config;
  const int d = config.d_model;
  std::normal_distribution<double> n(0.0, 1.0);
  ad::Matrix table(config.vocab + 1, d);
  for (ad::Index i = 0; i < table.size(); ++i) table.data()[i] = n(rng);
  c.table_ = store.add("comp.embed", std::move(table));
  if (config.count_embedding) {
    ad::Matrix w(1, d);
    for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.5 * n(rng);
    c.count_weight_ = store.add("comp.count_embed", std::move(w));
  }
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "comp.block" + std::to_string(l);
    Block b;
    b.ln_attn = nn::LayerNorm::create(store, p + ".ln_attn", d);
    b.q = nn::Linear::create(store, p + ".q", d, d, rng);
    b.k = nn::Linear::create(store, p + ".k", d, d, rng);
    b.v = nn::Linear::create(store, p + ".v", d, d, rng);
    b.o = nn::Linear::create(store, p + ".o", d, d, rng);
    b.ln_ff = nn::LayerNorm::create(store, p + ".ln_ff", d);
    b.ff_in = nn::Linear::create(store, p + ".ff_in", d, config.d_ff, rng);
    b.ff_out = nn::Linear::create(store, p + ".ff_out", config.d_ff, d, rng);
    c.blocks_.push_back(b);
  }
  c.final_ln_ = nn::LayerNorm::create(store, "comp.ln_final", d);
  return c;
}

ad::Var CompStream::embed(const ParameterStore& store, const CompTokens& tokens) const {
  if (tokens.size() == 0) throw std::invalid_argument("composition stream needs at least one token");
  for (int z : tokens.types) {
    if (z < 0 || z > config_.vocab) throw DomainError("unknown element " + std::to_string(z));
  }
  ad::Var u = ad::gather_rows(store.var(table_), ad::make_index(tokens.types));
  if (config_.count_embedding) {
    ad::Matrix lc(static_cast<ad::Index>(tokens.size()), 1);
    for (std::size_t t = 0; t < tokens.size(); ++t) lc(static_cast<ad::Index>(t), 0) = std::log(double(tokens.counts[t]));
    u = ad::add(u, ad::mul(ad::constant(std::move(lc)), store.var(count_weight_)));
  }
  return u;
}

ad::Var CompStream::attention(const ParameterStore& store, const Block& b, const ad::Var& x, const ad::Var& bias,
                              AttentionProbe* probe) const {
  const int h = config_.heads;
  const int dh = config_.d_model / h;
  const ad::Var q = b.q(store, x);
  const ad::Var k = b.k(store, x);
  const ad::Var v = b.v(store, x);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> heads;
  heads.reserve(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i) {
    const ad::Var qh = ad::slice_cols(q, i * dh, dh);
    const ad::Var kh = ad::slice_cols(k, i * dh, dh);
    const ad::Var vh = ad::slice_cols(v, i * dh, dh);
    const ad::Var logits = ad::add(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv), bias);
    const ad::Var w = ad::softmax_rows(logits);
    heads.push_back(ad::matmul(w, vh));
    if (probe) {
      probe->weights.push_back(w.value());
      probe->outputs.push_back(heads.back().value());
    }
  }
  return b.o(store, ad::concat_cols(heads));
}

ad::Var CompStream::forward(const ParameterStore& store, const CompTokens& tokens, bool training, Rng* rng) const {
  const auto t = static_cast<ad::Index>(tokens.size());
  ad::Var u = embed(store, tokens);
  ad::Matrix bias(t, t);
  const double blocked = -std::numeric_limits<double>::infinity();
  for (ad::Index i = 0; i < t; ++i) {
    for (ad::Index j = 0; j < t; ++j) {
      const auto si = static_cast<std::size_t>(i), sj = static_cast<std::size_t>(j);
      if (tokens.segment[si] != tokens.segment[sj]) {
        bias(i, j) = blocked;
      } else {
        bias(i, j) = config_.count_bias ? std::log(static_cast<double>(tokens.counts[sj])) : 0.0;
      }
    }
  }
  const ad::Var bias_v = ad::constant(std::move(bias));
  const double p = training ? config_.dropout : 0.0;
  for (const auto& b : blocks_) {
    u = ad::add(u, nn::dropout(attention(store, b, b.ln_attn(store, u), bias_v, nullptr), p, rng));
    const ad::Var ff = b.ff_out(store, ad::silu(b.ff_in(store, b.ln_ff(store, u))));
    u = ad::add(u, nn::dropout(ff, p, rng));
  }
  return final_ln_(store, u);
}

CompStream::AttentionProbe CompStream::probe_attention(const ParameterStore& store, const ad::Matrix& inputs,
                                                       const std::vector<double>& key_bias, int layer) const {
  if (layer < 0 || layer >= static_cast<int>(blocks_.size())) throw std::out_of_range("no such attention layer");
  if (static_cast<std::size_t>(inputs.rows()) != key_bias.size()) {
    throw std::invalid_argument("one key bias per input row is required");
  }
  ad::NoGradGuard ng;
  const auto& b = blocks_[static_cast<std::size_t>(layer)];
  ad::Matrix bias(inputs.rows(), inputs.rows());
  for (ad::Index j = 0; j < inputs.rows(); ++j) bias.col(j).setConstant(key_bias[static_cast<std::size_t>(j)]);
  AttentionProbe probe;
  attention(store, b, b.ln_attn(store, ad::constant(inputs)), ad::constant(std::move(bias)), &probe);
  return probe;
}

}  // namespace tristream
