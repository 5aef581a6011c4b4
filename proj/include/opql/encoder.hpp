#pragma once

#include <functional>
#include <string>
#include <vector>

#include "opql/autograd.hpp"
#include "opql/rng.hpp"
#include "opql/types.hpp"

namespace opql {

struct EncoderConfig {
  int token_vocab_size = 0;
  int entity_vocab_size = 0;
  int model_dim = 64;     // d
  int entity_dim = 64;    // d_e
  int relation_dim = 64;  // d_r
  int key_dim = 64;       // d_k
  int layers = 2;
  int heads = 2;
  int max_seq_len = 128;
  int ffn_mult = 4;
  int max_hops = 3;
  double layer_norm_eps = 1e-6;

  void validate() const;  // throws ConfigError
  bool operator==(const EncoderConfig&) const = default;
};

struct LayerParams {
  Mat wq, bq, wk, bk, wv, bv, wo, bo;      // attention projections, d x d / 1 x d
  Mat ln1_gain, ln1_bias;                  // post-attention layer norm
  Mat ffn_w1, ffn_b1, ffn_w2, ffn_b2;      // position-wise feed-forward
  Mat ln2_gain, ln2_bias;                  // post-ffn layer norm
};

// All trainable tensors. Row-major; a linear head y = W^T x is stored as the
// matrix W with shape (in, out) and applied as x_row * W.
struct ModelParams {
  EncoderConfig config;
  Mat token_embedding;     // vocab x d
  Mat position_embedding;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Mat entity_table;        // |E| x d_e
  Mat w_r;                 // 2d x d_r
  Mat w_e;                 // d x d_e
  Mat w_k;                 // (d_e + d_r) x d_k
  Mat w_q;                 // (d_e + d_r) x d_k
  std::vector<Mat> w_t;    // per hop, d_r x d_r
  Mat r_null;              // 1 x d_r

  void for_each_tensor(const std::function<void(const std::string&, Mat&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Mat&)>& fn) const;
};

ModelParams init_params(const EncoderConfig& config, Rng& rng);

// --- tape bindings --------------------------------------------------------

struct LayerVars {
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Var ln1_gain, ln1_bias;
  ad::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  ad::Var ln2_gain, ln2_bias;
};

struct ParamVars {
  const EncoderConfig* config = nullptr;
  ad::Var token_embedding, position_embedding;
  std::vector<LayerVars> layers;
  ad::Var entity_table, w_r, w_e, w_k, w_q, r_null;
  std::vector<ad::Var> w_t;
};

// One tape node per tensor; the optimizer walks `bindings` after backward().
struct ParamBinding {
  std::string name;
  ad::Var var;
  Mat* tensor = nullptr;
  bool trainable = false;
};

struct BoundParams {
  ParamVars vars;
  std::vector<ParamBinding> bindings;
};

// `trainable` decides per tensor name; pass {} to train everything.
BoundParams bind_params(ad::Tape& tape, ModelParams& params,
                        const std::function<bool(const std::string&)>& trainable = {});

// Read-only binding for inference passes.
ParamVars bind_constant(ad::Tape& tape, const ModelParams& params);

// --- forward passes ---------------------------------------------------------

// Token + position embeddings through `layers` post-norm transformer blocks.
ad::Var encode_tokens(ad::Tape& tape, const ParamVars& params, const std::vector<TokenId>& tokens);

// r = W_r^T [h_s; h_t] with s at [R1] and t at [R2].
ad::Var relation_embedding(ad::Tape& tape, const ParamVars& params, const ad::Var& ctx, int s, int t);

// m = W_e^T h_i at the mention start index.
ad::Var mention_embedding(ad::Tape& tape, const ParamVars& params, const ad::Var& ctx, int i);

ad::Var entity_lookup(ad::Tape& tape, const ParamVars& params, EntityId entity);

// Inference conveniences that own a local tape and return plain values.
Mat encode_infer(const ModelParams& params, const std::vector<TokenId>& tokens);
Mat relation_embedding_infer(const ModelParams& params, const PreprocessedExample& example);
Mat mention_embedding_infer(const ModelParams& params, const std::vector<TokenId>& tokens, int start);

}  // namespace opql
