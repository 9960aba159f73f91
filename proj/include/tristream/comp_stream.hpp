#pragma once

#include "tristream/nn.hpp"
#include "tristream/structure.hpp"

#include <vector>

namespace tristream {

struct CompStreamConfig {
  int d_model = 256;
  int layers = 4;
  int heads = 8;
  int d_ff = 1024;
  double dropout = 0.1;
  int vocab = kMaxAtomicNumber;
  // ln(c_s) added to every attention logit toward token s.
  bool count_bias = true;
  // ln(c_t) * w added to the token embedding. Without it the stream only sees
  // relative counts, because the logit bias is unchanged when all counts scale.
  bool count_embedding = true;

  void validate() const;
};

// Tokens of one or more compositions laid out back to back. Attention never
// crosses segments.
struct CompTokens {
  std::vector<int> types;    // 0 for the mask token, else z
  std::vector<int> counts;   // >= 1
  std::vector<int> segment;  // owning composition per token

  static CompTokens from(const Composition& c);
  void append(const Composition& c, int segment_id);
  std::size_t size() const { return types.size(); }
};

// softmax_s(logits(t, s) + ln counts[s]) row by row.
ad::Matrix count_weighted_attention(const ad::Matrix& logits, const std::vector<int>& counts);

class CompStream {
 public:
  static CompStream create(ParameterStore& store, const CompStreamConfig& config, Rng& rng);

  const CompStreamConfig& config() const { return config_; }

  // T x d_model token outputs after the final normalization.
  ad::Var forward(const ParameterStore& store, const CompTokens& tokens, bool training = false,
                  Rng* rng = nullptr) const;

  // Layer inputs before any transformer block.
  ad::Var embed(const ParameterStore& store, const CompTokens& tokens) const;

  // Attention weights and per-head outputs of one block for explicit layer
  // inputs and an explicit per-key logit bias (no segment masking).
  struct AttentionProbe {
    std::vector<ad::Matrix> weights;  // per head, T x T
    std::vector<ad::Matrix> outputs;  // per head, T x d_head
  };
  AttentionProbe probe_attention(const ParameterStore& store, const ad::Matrix& inputs,
                                 const std::vector<double>& key_bias, int layer) const;

 private:
  struct Block {
    nn::LayerNorm ln_attn, ln_ff;
    nn::Linear q, k, v, o, ff_in, ff_out;
  };

  ad::Var attention(const ParameterStore& store, const Block& b, const ad::Var& x, const ad::Var& bias,
                    AttentionProbe* probe) const;

  CompStreamConfig config_;
  std::size_t table_ = 0;  // (vocab + 1) x d_model, row 0 is the mask token
  std::size_t count_weight_ = 0;
  std::vector<Block> blocks_;
  nn::LayerNorm final_ln_;
};

}  // namespace tristream
