#pragma once

// Post-layer-norm transformer encoder. Dropout sits at exactly three kinds of
// site: after the embedding sum, on every attention-probability matrix, and on
// every feed-forward output.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmlmcse/errors.hpp"
#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/textdata.hpp"

namespace cmlmcse {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 256;
  double dropout_p = 0.1;

  void validate() const {
    if (vocab_size <= kReservedTokens) throw ConfigError("encoder.vocab_size must exceed the reserved tokens");
    if (max_seq_len < 2) throw ConfigError("encoder.max_seq_len must be >= 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) throw ConfigError("encoder.d_model must be a positive multiple of n_heads");
    if (n_layers == 0) throw ConfigError("encoder.n_layers must be >= 1");
    if (d_ff == 0) throw ConfigError("encoder.d_ff must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("encoder.dropout must be in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class DropoutMode { train, eval };

// Source of dropout masks for one forward pass. Eval mode is the identity.
struct DropoutDraw {
  DropoutMode mode = DropoutMode::eval;
  Rng* rng = nullptr;

  static DropoutDraw eval() { return {}; }
  static DropoutDraw train(Rng& stream) { return {DropoutMode::train, &stream}; }

  bool active(double p) const { return mode == DropoutMode::train && p > 0.0; }
  template <class T>
  Tensor<T> mask(const Shape& shape, double p) const {
    if (!rng) throw StateError("train-mode dropout draw without an rng stream");
    return sample_dropout_mask<T>(shape, p, *rng);
  }
};

template <class T>
struct BlockParams {
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> attn_ln_gain, attn_ln_bias;
  Parameter<T> ff_w1, ff_b1, ff_w2, ff_b2;
  Parameter<T> ff_ln_gain, ff_ln_bias;

  template <class F>
  void for_each_parameter(F&& f) {
    for (Parameter<T>* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &attn_ln_gain, &attn_ln_bias, &ff_w1, &ff_b1,
                            &ff_w2, &ff_b2, &ff_ln_gain, &ff_ln_bias})
      f(*p);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    const_cast<BlockParams*>(this)->for_each_parameter([&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }
};

template <class T>
struct EmbeddingParams {
  Parameter<T> token, position, ln_gain, ln_bias;

  template <class F>
  void for_each_parameter(F&& f) {
    for (Parameter<T>* p : {&token, &position, &ln_gain, &ln_bias}) f(*p);
  }
};

// Vocabulary projection d_model -> V, untied from the token embeddings.
template <class T>
struct MlmHead {
  Parameter<T> weight, bias;

  template <class F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
};

template <class T>
struct EncoderParams {
  EncoderConfig config;
  EmbeddingParams<T> embeddings;
  std::vector<BlockParams<T>> blocks;
  std::optional<MlmHead<T>> head;

  template <class F>
  void for_each_parameter(F&& f) {
    embeddings.for_each_parameter(f);
    for (auto& b : blocks) b.for_each_parameter(f);
    if (head) head->for_each_parameter(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  void set_frozen(bool frozen) {
    for_each_parameter([&](Parameter<T>& p) { p.frozen = frozen; });
  }
};

namespace detail {

template <class T>
Parameter<T> init_weight(const std::string& name, Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(truncated_normal(rng, stddev));
  return Parameter<T>(name, std::move(t));
}

template <class T>
Parameter<T> init_const(const std::string& name, Shape shape, T value) {
  return Parameter<T>(name, Tensor<T>(std::move(shape), value));
}

}  // namespace detail

template <class T>
BlockParams<T> init_block(const std::string& prefix, std::size_t d_model, std::size_t d_ff, Rng& rng) {
  using detail::init_const;
  using detail::init_weight;
  const std::size_t d = d_model;
  BlockParams<T> b;
  b.wq = init_weight<T>(prefix + ".wq", {d, d}, rng);
  b.bq = init_const<T>(prefix + ".bq", {d}, T(0));
  b.wk = init_weight<T>(prefix + ".wk", {d, d}, rng);
  b.bk = init_const<T>(prefix + ".bk", {d}, T(0));
  b.wv = init_weight<T>(prefix + ".wv", {d, d}, rng);
  b.bv = init_const<T>(prefix + ".bv", {d}, T(0));
  b.wo = init_weight<T>(prefix + ".wo", {d, d}, rng);
  b.bo = init_const<T>(prefix + ".bo", {d}, T(0));
  b.attn_ln_gain = init_const<T>(prefix + ".attn_ln_gain", {d}, T(1));
  b.attn_ln_bias = init_const<T>(prefix + ".attn_ln_bias", {d}, T(0));
  b.ff_w1 = init_weight<T>(prefix + ".ff_w1", {d, d_ff}, rng);
  b.ff_b1 = init_const<T>(prefix + ".ff_b1", {d_ff}, T(0));
  b.ff_w2 = init_weight<T>(prefix + ".ff_w2", {d_ff, d}, rng);
  b.ff_b2 = init_const<T>(prefix + ".ff_b2", {d}, T(0));
  b.ff_ln_gain = init_const<T>(prefix + ".ff_ln_gain", {d}, T(1));
  b.ff_ln_bias = init_const<T>(prefix + ".ff_ln_bias", {d}, T(0));
  return b;
}

template <class T>
MlmHead<T> init_mlm_head(const std::string& prefix, std::size_t d_model, std::size_t vocab, Rng& rng) {
  return {detail::init_weight<T>(prefix + ".weight", {d_model, vocab}, rng),
          detail::init_const<T>(prefix + ".bias", {vocab}, T(0))};
}

// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
template <class T>
EncoderParams<T> init_params(const EncoderConfig& config, Rng& rng, const std::string& prefix = "encoder", bool with_head = true) {
  config.validate();
  EncoderParams<T> p;
  p.config = config;
  const std::size_t d = config.d_model;
  p.embeddings.token = detail::init_weight<T>(prefix + ".token_embedding", {config.vocab_size, d}, rng);
  p.embeddings.position = detail::init_weight<T>(prefix + ".position_embedding", {config.max_seq_len, d}, rng);
  p.embeddings.ln_gain = detail::init_const<T>(prefix + ".embedding_ln_gain", {d}, T(1));
  p.embeddings.ln_bias = detail::init_const<T>(prefix + ".embedding_ln_bias", {d}, T(0));
  for (std::size_t l = 0; l < config.n_layers; ++l)
    p.blocks.push_back(init_block<T>(prefix + ".block" + std::to_string(l), d, config.d_ff, rng));
  if (with_head) p.head = init_mlm_head<T>(prefix + ".mlm_head", d, config.vocab_size, rng);
  return p;
}

// Total scalar count of init_params(config) with the MLM head.
inline std::size_t encoder_parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.d_model, v = c.vocab_size;
  const std::size_t embeddings = v * d + c.max_seq_len * d + 2 * d;
  const std::size_t block = 4 * (d * d + d) + 2 * d + (d * c.d_ff + c.d_ff) + (c.d_ff * d + d) + 2 * d;
  const std::size_t head = d * v + v;
  return embeddings + c.n_layers * block + head;
}

// Per-forward inspection hooks; all optional.
template <class T>
struct ForwardTrace {
  std::vector<Tensor<T>> attention_probs;  // one [N, H, p, p] tensor per block
};

template <class T>
Var<T> run_block(Graph<T>& g, BlockParams<T>& b, Var<T> x, AttentionShape dims, const std::vector<char>& key_valid,
                 double dropout_p, const DropoutDraw& draw, ForwardTrace<T>* trace) {
  Var<T> q = linear(x, g.param(b.wq), g.param(b.bq));
  Var<T> k = linear(x, g.param(b.wk), g.param(b.bk));
  Var<T> v = linear(x, g.param(b.wv), g.param(b.bv));
  Tensor<T> prob_mask;
  if (draw.active(dropout_p)) prob_mask = draw.mask<T>({dims.n_seq, dims.n_heads, dims.seq_len, dims.seq_len}, dropout_p);
  Tensor<T> probs;
  Var<T> ctx = attention(q, k, v, dims, key_valid, std::move(prob_mask), trace ? &probs : nullptr);
  if (trace) trace->attention_probs.push_back(std::move(probs));
  Var<T> attn = linear(ctx, g.param(b.wo), g.param(b.bo));
  Var<T> x1 = layer_norm(add(x, attn), g.param(b.attn_ln_gain), g.param(b.attn_ln_bias));
  Var<T> ff = linear(gelu(linear(x1, g.param(b.ff_w1), g.param(b.ff_b1))), g.param(b.ff_w2), g.param(b.ff_b2));
  if (draw.active(dropout_p)) ff = dropout(ff, draw.mask<T>(ff.shape(), dropout_p));
  return layer_norm(add(x1, ff), g.param(b.ff_ln_gain), g.param(b.ff_ln_bias));
}

template <class T>
Var<T> run_blocks(Graph<T>& g, std::span<BlockParams<T>> blocks, Var<T> x, AttentionShape dims,
                  const std::vector<char>& key_valid, double dropout_p, const DropoutDraw& draw,
                  ForwardTrace<T>* trace = nullptr) {
  for (auto& b : blocks) x = run_block(g, b, x, dims, key_valid, dropout_p, draw, trace);
  return x;
}

// Flattened ids and non-PAD key mask for a batch of length-p sequences.
template <class Seq>
void flatten_batch(std::span<const Seq> batch, std::size_t seq_len, std::vector<int>& ids, std::vector<char>& key_valid,
                   std::vector<int>& positions) {
  ids.clear();
  key_valid.clear();
  positions.clear();
  for (const Seq& s : batch) {
    if (s.ids.size() != seq_len)
      throw ShapeError("sequence of length " + std::to_string(s.ids.size()) + " where the encoder expects " + std::to_string(seq_len));
    for (std::size_t j = 0; j < seq_len; ++j) {
      ids.push_back(s.ids[j]);
      key_valid.push_back(s.ids[j] != kPadId ? 1 : 0);
      positions.push_back(static_cast<int>(j));
    }
  }
}

template <class Seq>
std::vector<char> key_mask_of(std::span<const Seq> batch) {
  std::vector<char> out;
  for (const Seq& s : batch)
    for (int id : s.ids) out.push_back(id != kPadId ? 1 : 0);
  return out;
}

// Hidden states [N * p, d_model] (row n * p + j is sentence n, position j).
template <class T, class Seq>
Var<T> encode_batch(Graph<T>& g, EncoderParams<T>& params, std::span<const Seq> batch, const DropoutDraw& draw,
                    ForwardTrace<T>* trace = nullptr) {
  const EncoderConfig& c = params.config;
  if (batch.empty()) throw ShapeError("encode_batch: empty batch");
  std::vector<int> ids, positions;
  std::vector<char> key_valid;
  flatten_batch(batch, c.max_seq_len, ids, key_valid, positions);
  Var<T> tok = embedding(g.param(params.embeddings.token), std::move(ids));
  Var<T> pos = embedding(g.param(params.embeddings.position), std::move(positions));
  Var<T> x = layer_norm(add(tok, pos), g.param(params.embeddings.ln_gain), g.param(params.embeddings.ln_bias));
  if (draw.active(c.dropout_p)) x = dropout(x, draw.mask<T>(x.shape(), c.dropout_p));
  const AttentionShape dims{batch.size(), c.max_seq_len, c.n_heads};
  return run_blocks(g, std::span<BlockParams<T>>(params.blocks), x, dims, key_valid, c.dropout_p, draw, trace);
}

template <class T, class Seq>
Var<T> encode_batch(Graph<T>& g, EncoderParams<T>& params, const std::vector<Seq>& batch, const DropoutDraw& draw,
                    ForwardTrace<T>* trace = nullptr) {
  return encode_batch<T, Seq>(g, params, std::span<const Seq>(batch), draw, trace);
}

// Position-0 hidden state of every sentence: [N, d_model].
template <class T>
Var<T> pool_cls(Var<T> hidden, std::size_t n_seq, std::size_t seq_len) {
  if (hidden.value().rows() != n_seq * seq_len) throw ShapeError("pool_cls: hidden rows do not match N * p");
  std::vector<std::size_t> rows(n_seq);
  for (std::size_t i = 0; i < n_seq; ++i) rows[i] = i * seq_len;
  return gather_rows(hidden, std::move(rows));
}

// Embeddings plus the first k blocks of base, renamed and frozen.
template <class T>
EncoderParams<T> split_extractor(const EncoderParams<T>& base, std::size_t k, const std::string& prefix = "extractor") {
  if (k < 1 || k > base.blocks.size())
    throw ConfigError("extractor layer count " + std::to_string(k) + " outside [1, " + std::to_string(base.blocks.size()) + "]");
  EncoderParams<T> out;
  out.config = base.config;
  out.config.n_layers = k;
  out.embeddings = base.embeddings;
  out.blocks.assign(base.blocks.begin(), base.blocks.begin() + static_cast<std::ptrdiff_t>(k));
  const std::string from = base.embeddings.token.name.substr(0, base.embeddings.token.name.find('.'));
  out.for_each_parameter([&](Parameter<T>& p) {
    if (p.name.rfind(from + ".", 0) == 0) p.name = prefix + p.name.substr(from.size());
    p.frozen = true;
    p.zero_grad();
  });
  return out;
}

// Copy of base without the MLM head, renamed.
template <class T>
EncoderParams<T> copy_encoder(const EncoderParams<T>& base, const std::string& prefix) {
  EncoderParams<T> out = base;
  out.head.reset();
  const std::string from = base.embeddings.token.name.substr(0, base.embeddings.token.name.find('.'));
  out.for_each_parameter([&](Parameter<T>& p) {
    if (p.name.rfind(from + ".", 0) == 0) p.name = prefix + p.name.substr(from.size());
    p.zero_grad();
  });
  return out;
}

template <class T, class U>
EncoderParams<U> cast_encoder(const EncoderParams<T>& src) {
  EncoderParams<U> out;
  out.config = src.config;
  auto& s = const_cast<EncoderParams<T>&>(src);
  std::vector<Parameter<T>*> from = s.parameters();
  out.embeddings = {from[0]->template cast<U>(), from[1]->template cast<U>(), from[2]->template cast<U>(), from[3]->template cast<U>()};
  std::size_t at = 4;
  for (std::size_t l = 0; l < src.blocks.size(); ++l) {
    BlockParams<U> b;
    b.for_each_parameter([&](Parameter<U>& p) { p = from[at++]->template cast<U>(); });
    out.blocks.push_back(std::move(b));
  }
  if (src.head) out.head = MlmHead<U>{from[at]->template cast<U>(), from[at + 1]->template cast<U>()};
  return out;
}

}  // namespace cmlmcse
