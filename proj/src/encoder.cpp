#include "opql/encoder.hpp"

#include <cmath>
#include <numeric>

#include "opql/errors.hpp"

namespace opql {

void EncoderConfig::validate() const {
  if (token_vocab_size < 1) throw ConfigError("token_vocab_size must be positive");
  if (entity_vocab_size < 1) throw ConfigError("entity_vocab_size must be positive");
  if (model_dim < 1 || entity_dim < 1 || relation_dim < 1 || key_dim < 1)
    throw ConfigError("all dimensions must be positive");
  if (layers < 1) throw ConfigError("layers must be positive");
  if (heads < 1 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive");
  if (ffn_mult < 1) throw ConfigError("ffn_mult must be positive");
  if (max_hops < 1) throw ConfigError("max_hops must be positive");
  if (layer_norm_eps <= 0.0) throw ConfigError("layer_norm_eps must be positive");
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, Mat&)>& fn) {
  fn("token_embedding", token_embedding);
  fn("position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lay = layers[l];
    fn(p + "wq", lay.wq);
    fn(p + "bq", lay.bq);
    fn(p + "wk", lay.wk);
    fn(p + "bk", lay.bk);
    fn(p + "wv", lay.wv);
    fn(p + "bv", lay.bv);
    fn(p + "wo", lay.wo);
    fn(p + "bo", lay.bo);
    fn(p + "ln1_gain", lay.ln1_gain);
    fn(p + "ln1_bias", lay.ln1_bias);
    fn(p + "ffn_w1", lay.ffn_w1);
    fn(p + "ffn_b1", lay.ffn_b1);
    fn(p + "ffn_w2", lay.ffn_w2);
    fn(p + "ffn_b2", lay.ffn_b2);
    fn(p + "ln2_gain", lay.ln2_gain);
    fn(p + "ln2_bias", lay.ln2_bias);
  }
  fn("entity_table", entity_table);
  fn("w_r", w_r);
  fn("w_e", w_e);
  fn("w_k", w_k);
  fn("w_q", w_q);
  for (std::size_t h = 0; h < w_t.size(); ++h) fn("w_t" + std::to_string(h), w_t[h]);
  fn("r_null", r_null);
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, const Mat&)>& fn) const {
  const_cast<ModelParams*>(this)->for_each_tensor(
      [&fn](const std::string& name, Mat& tensor) { fn(name, tensor); });
}

ModelParams init_params(const EncoderConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int d = config.model_dim;

  auto gaussian = [&rng](int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = stddev * rng.normal();
    return m;
  };

  p.token_embedding = gaussian(config.token_vocab_size, d, 0.02);
  p.position_embedding = gaussian(config.max_seq_len, d, 0.02);
  p.layers.resize(static_cast<std::size_t>(config.layers));
  for (LayerParams& lay : p.layers) {
    lay.wq = gaussian(d, d, 0.02);
    lay.bq = Mat::Zero(1, d);
    lay.wk = gaussian(d, d, 0.02);
    lay.bk = Mat::Zero(1, d);
    lay.wv = gaussian(d, d, 0.02);
    lay.bv = Mat::Zero(1, d);
    lay.wo = gaussian(d, d, 0.02);
    lay.bo = Mat::Zero(1, d);
    lay.ln1_gain = Mat::Ones(1, d);
    lay.ln1_bias = Mat::Zero(1, d);
    lay.ffn_w1 = gaussian(d, d * config.ffn_mult, 0.02);
    lay.ffn_b1 = Mat::Zero(1, d * config.ffn_mult);
    lay.ffn_w2 = gaussian(d * config.ffn_mult, d, 0.02);
    lay.ffn_b2 = Mat::Zero(1, d);
    lay.ln2_gain = Mat::Ones(1, d);
    lay.ln2_bias = Mat::Zero(1, d);
  }
  p.entity_table = gaussian(config.entity_vocab_size, config.entity_dim, 0.02);
  p.w_r = gaussian(2 * d, config.relation_dim, 0.02);
  p.w_e = gaussian(d, config.entity_dim, 0.02);
  p.w_k = gaussian(config.entity_dim + config.relation_dim, config.key_dim, 0.02);
  p.w_q = gaussian(config.entity_dim + config.relation_dim, config.key_dim, 0.02);
  p.w_t.reserve(static_cast<std::size_t>(config.max_hops));
  for (int h = 0; h < config.max_hops; ++h) {
    Mat wt = gaussian(config.relation_dim, config.relation_dim, 0.01);
    wt += Mat::Identity(config.relation_dim, config.relation_dim);
    p.w_t.push_back(std::move(wt));
  }
  p.r_null = gaussian(1, config.relation_dim, 0.02);
  return p;
}

BoundParams bind_params(ad::Tape& tape, ModelParams& params,
                        const std::function<bool(const std::string&)>& trainable) {
  BoundParams bound;
  bound.vars.config = &params.config;
  bound.vars.layers.resize(params.layers.size());
  bound.vars.w_t.resize(params.w_t.size());

  auto slot = [&](const std::string& name) -> ad::Var* {
    if (name == "token_embedding") return &bound.vars.token_embedding;
    if (name == "position_embedding") return &bound.vars.position_embedding;
    if (name == "entity_table") return &bound.vars.entity_table;
    if (name == "w_r") return &bound.vars.w_r;
    if (name == "w_e") return &bound.vars.w_e;
    if (name == "w_k") return &bound.vars.w_k;
    if (name == "w_q") return &bound.vars.w_q;
    if (name == "r_null") return &bound.vars.r_null;
    if (name.rfind("w_t", 0) == 0) return &bound.vars.w_t[std::stoul(name.substr(3))];
    // layerN.<field>
    const auto dot = name.find('.');
    const std::size_t l = std::stoul(name.substr(5, dot - 5));
    const std::string field = name.substr(dot + 1);
    LayerVars& lay = bound.vars.layers[l];
    if (field == "wq") return &lay.wq;
    if (field == "bq") return &lay.bq;
    if (field == "wk") return &lay.wk;
    if (field == "bk") return &lay.bk;
    if (field == "wv") return &lay.wv;
    if (field == "bv") return &lay.bv;
    if (field == "wo") return &lay.wo;
    if (field == "bo") return &lay.bo;
    if (field == "ln1_gain") return &lay.ln1_gain;
    if (field == "ln1_bias") return &lay.ln1_bias;
    if (field == "ffn_w1") return &lay.ffn_w1;
    if (field == "ffn_b1") return &lay.ffn_b1;
    if (field == "ffn_w2") return &lay.ffn_w2;
    if (field == "ffn_b2") return &lay.ffn_b2;
    if (field == "ln2_gain") return &lay.ln2_gain;
    if (field == "ln2_bias") return &lay.ln2_bias;
    throw IndexOutOfRangeError("unknown parameter tensor: " + name);
  };

  params.for_each_tensor([&](const std::string& name, Mat& tensor) {
    const bool train = trainable ? trainable(name) : true;
    ad::Var var = tape.leaf(tensor, train);
    *slot(name) = var;
    bound.bindings.push_back(ParamBinding{name, var, &tensor, train});
  });
  return bound;
}

ParamVars bind_constant(ad::Tape& tape, const ModelParams& params) {
  // Safe: a no-trainable binding never writes through the tensor pointers.
  BoundParams bound = bind_params(tape, const_cast<ModelParams&>(params),
                                  [](const std::string&) { return false; });
  return bound.vars;
}

ad::Var encode_tokens(ad::Tape&, const ParamVars& params, const std::vector<TokenId>& tokens) {
  const EncoderConfig& cfg = *params.config;
  const int n = static_cast<int>(tokens.size());
  if (n == 0) throw EmptySetError("cannot encode an empty token sequence");
  if (n > cfg.max_seq_len)
    throw SequenceTooLongError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                               std::to_string(cfg.max_seq_len));
  for (TokenId t : tokens)
    if (t < 0 || t >= cfg.token_vocab_size)
      throw IndexOutOfRangeError("token id " + std::to_string(t) + " outside the vocabulary");

  std::vector<int> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  ad::Var x = ad::add(ad::gather_rows(params.token_embedding, std::vector<int>(tokens.begin(), tokens.end())),
                      ad::gather_rows(params.position_embedding, positions));

  const int head_dim = cfg.model_dim / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  for (const LayerVars& lay : params.layers) {
    const ad::Var q = ad::add_rowvec(ad::matmul(x, lay.wq), lay.bq);
    const ad::Var k = ad::add_rowvec(ad::matmul(x, lay.wk), lay.bk);
    const ad::Var v = ad::add_rowvec(ad::matmul(x, lay.wv), lay.bv);

    std::vector<ad::Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      std::vector<int> cols(static_cast<std::size_t>(head_dim));
      std::iota(cols.begin(), cols.end(), h * head_dim);
      const ad::Var qh = ad::gather_cols(q, cols);
      const ad::Var kh = ad::gather_cols(k, cols);
      const ad::Var vh = ad::gather_cols(v, cols);
      const ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(ad::matmul(attn, vh));
    }
    const ad::Var ctx = cfg.heads == 1 ? heads[0] : ad::concat_cols(heads);
    const ad::Var attn_out = ad::add_rowvec(ad::matmul(ctx, lay.wo), lay.bo);
    x = ad::layer_norm_rows(ad::add(x, attn_out), lay.ln1_gain, lay.ln1_bias, cfg.layer_norm_eps);

    const ad::Var h1 = ad::gelu(ad::add_rowvec(ad::matmul(x, lay.ffn_w1), lay.ffn_b1));
    const ad::Var h2 = ad::add_rowvec(ad::matmul(h1, lay.ffn_w2), lay.ffn_b2);
    x = ad::layer_norm_rows(ad::add(x, h2), lay.ln2_gain, lay.ln2_bias, cfg.layer_norm_eps);
  }
  return x;
}

ad::Var relation_embedding(ad::Tape& tape, const ParamVars& params, const ad::Var& ctx, int s, int t) {
  (void)tape;
  const int n = static_cast<int>(ctx.rows());
  if (s < 0 || s >= n || t < 0 || t >= n)
    throw IndexOutOfRangeError("marker position out of range: s=" + std::to_string(s) +
                               " t=" + std::to_string(t) + " n=" + std::to_string(n));
  const ad::Var hs = ad::gather_rows(ctx, {s});
  const ad::Var ht = ad::gather_rows(ctx, {t});
  return ad::matmul(ad::concat_cols({hs, ht}), params.w_r);
}

ad::Var mention_embedding(ad::Tape& tape, const ParamVars& params, const ad::Var& ctx, int i) {
  (void)tape;
  if (i < 0 || i >= static_cast<int>(ctx.rows()))
    throw IndexOutOfRangeError("mention start " + std::to_string(i) + " out of range");
  return ad::matmul(ad::gather_rows(ctx, {i}), params.w_e);
}

ad::Var entity_lookup(ad::Tape& tape, const ParamVars& params, EntityId entity) {
  (void)tape;
  if (entity < 0 || entity >= static_cast<int>(params.entity_table.rows()))
    throw UnknownEntityError("entity id " + std::to_string(entity) + " outside the entity table");
  return ad::gather_rows(params.entity_table, {static_cast<int>(entity)});
}

Mat encode_infer(const ModelParams& params, const std::vector<TokenId>& tokens) {
  ad::Tape tape;
  const ParamVars vars = bind_constant(tape, params);
  return encode_tokens(tape, vars, tokens).value();
}

Mat relation_embedding_infer(const ModelParams& params, const PreprocessedExample& example) {
  ad::Tape tape;
  const ParamVars vars = bind_constant(tape, params);
  const ad::Var ctx = encode_tokens(tape, vars, example.tokens);
  return relation_embedding(tape, vars, ctx, example.r1_pos, example.r2_pos).value();
}

Mat mention_embedding_infer(const ModelParams& params, const std::vector<TokenId>& tokens, int start) {
  ad::Tape tape;
  const ParamVars vars = bind_constant(tape, params);
  const ad::Var ctx = encode_tokens(tape, vars, tokens);
  return mention_embedding(tape, vars, ctx, start).value();
}

}  // namespace opql
