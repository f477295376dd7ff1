#pragma once

// Training: warm-up masked-LM pretraining of the base encoder, the combined
// contrastive + conditional-MLM objective, Adam updates on the non-frozen
// parameters, and bit-exact checkpoints.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "cmlmcse/auxnet.hpp"
#include "cmlmcse/contrastive.hpp"
#include "cmlmcse/encoder.hpp"
#include "cmlmcse/errors.hpp"
#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/strings.hpp"
#include "cmlmcse/textdata.hpp"

namespace cmlmcse {

enum class LossMode { full, no_mlm, no_contrastive };
enum class Augmentation { none, word_repetition, drop_one_word };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::full: return "full";
    case LossMode::no_mlm: return "no_mlm";
    case LossMode::no_contrastive: return "no_contrastive";
  }
  return "?";
}

inline std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::word_repetition: return "word_repetition";
    case Augmentation::drop_one_word: return "drop_one_word";
  }
  return "?";
}

inline std::optional<LossMode> parse_loss_mode(std::string_view s) {
  if (s == "full") return LossMode::full;
  if (s == "no_mlm") return LossMode::no_mlm;
  if (s == "no_contrastive") return LossMode::no_contrastive;
  return std::nullopt;
}

inline std::optional<Augmentation> parse_augmentation(std::string_view s) {
  if (s == "none") return Augmentation::none;
  if (s == "word_repetition") return Augmentation::word_repetition;
  if (s == "drop_one_word") return Augmentation::drop_one_word;
  return std::nullopt;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  double lambda = 0.005;
  AdamConfig adam;
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 500;
  std::uint64_t seed = 1;
  std::size_t extractor_layers = 3;
  std::size_t fusioner_layers = 2;
  bool freeze_extractor = true;
  LossMode loss = LossMode::full;
  Augmentation augmentation = Augmentation::none;
  double repeat_fraction = 0.32;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train.lambda must be a finite value >= 0");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      throw ConfigError("train.beta1/beta2 must be in [0, 1)");
    if (!(adam.epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (loss != LossMode::no_contrastive && batch_size < 2) throw ConfigError("contrastive training needs train.batch_size >= 2");
    if (extractor_layers < 1) throw ConfigError("train.extractor_layers must be >= 1");
    if (fusioner_layers < 1) throw ConfigError("train.fusioner_layers must be >= 1");
    if (!(repeat_fraction >= 0.0 && repeat_fraction <= 1.0)) throw ConfigError("train.repeat_fraction must be in [0, 1]");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct ModelConfig {
  DataConfig data;
  EncoderConfig encoder;
  ContrastiveConfig contrastive;
  TrainConfig train;

  // encoder.max_seq_len follows data.seq_len.
  void sync() { encoder.max_seq_len = data.seq_len; }

  void validate() const {
    data.validate();
    // vocab_size is known only once a vocabulary exists.
    EncoderConfig e = encoder;
    if (e.vocab_size == 0) e.vocab_size = kReservedTokens + 1;
    e.validate();
    contrastive.validate();
    train.validate();
    if (train.extractor_layers > encoder.n_layers)
      throw ConfigError("train.extractor_layers (" + std::to_string(train.extractor_layers) + ") exceeds encoder.n_layers (" +
                        std::to_string(encoder.n_layers) + ")");
  }
};

// Ordered key=value pairs covering every ModelConfig field.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  auto d = [](double v) { return format_double(v); };
  return {
      {"data.seq_len", u(c.data.seq_len)},
      {"data.mask_rate", d(c.data.mask_rate)},
      {"data.max_vocab", u(c.data.max_vocab)},
      {"encoder.vocab_size", u(c.encoder.vocab_size)},
      {"encoder.d_model", u(c.encoder.d_model)},
      {"encoder.n_heads", u(c.encoder.n_heads)},
      {"encoder.n_layers", u(c.encoder.n_layers)},
      {"encoder.d_ff", u(c.encoder.d_ff)},
      {"encoder.dropout", d(c.encoder.dropout_p)},
      {"contrastive.temperature", d(c.contrastive.temperature)},
      {"train.lambda", d(c.train.lambda)},
      {"train.learning_rate", d(c.train.adam.learning_rate)},
      {"train.beta1", d(c.train.adam.beta1)},
      {"train.beta2", d(c.train.adam.beta2)},
      {"train.epsilon", d(c.train.adam.epsilon)},
      {"train.steps", u(c.train.steps)},
      {"train.batch_size", u(c.train.batch_size)},
      {"train.warmup_steps", u(c.train.warmup_steps)},
      {"train.seed", u(c.train.seed)},
      {"train.extractor_layers", u(c.train.extractor_layers)},
      {"train.fusioner_layers", u(c.train.fusioner_layers)},
      {"train.freeze_extractor", c.train.freeze_extractor ? "true" : "false"},
      {"train.loss", to_string(c.train.loss)},
      {"train.augmentation", to_string(c.train.augmentation)},
      {"train.repeat_fraction", d(c.train.repeat_fraction)},
  };
}

// Sets one "section.key" field from text. Returns false for unknown keys;
// throws ConfigError for malformed values.
inline bool apply_config_entry(ModelConfig& c, const std::string& key, std::string_view value) {
  auto as_uint = [&](std::size_t& dst) {
    auto v = parse_uint(value);
    if (!v) throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(value) + "'");
    dst = static_cast<std::size_t>(*v);
  };
  auto as_u64 = [&](std::uint64_t& dst) {
    auto v = parse_uint(value);
    if (!v) throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(value) + "'");
    dst = *v;
  };
  auto as_double = [&](double& dst) {
    auto v = parse_double(value);
    if (!v) throw ConfigError(key + ": expected a number, got '" + std::string(value) + "'");
    dst = *v;
  };
  if (key == "data.seq_len") as_uint(c.data.seq_len);
  else if (key == "data.mask_rate") as_double(c.data.mask_rate);
  else if (key == "data.max_vocab") as_uint(c.data.max_vocab);
  else if (key == "encoder.vocab_size") as_uint(c.encoder.vocab_size);
  else if (key == "encoder.d_model") as_uint(c.encoder.d_model);
  else if (key == "encoder.n_heads") as_uint(c.encoder.n_heads);
  else if (key == "encoder.n_layers") as_uint(c.encoder.n_layers);
  else if (key == "encoder.d_ff") as_uint(c.encoder.d_ff);
  else if (key == "encoder.dropout") as_double(c.encoder.dropout_p);
  else if (key == "contrastive.temperature") as_double(c.contrastive.temperature);
  else if (key == "train.lambda") as_double(c.train.lambda);
  else if (key == "train.learning_rate") as_double(c.train.adam.learning_rate);
  else if (key == "train.beta1") as_double(c.train.adam.beta1);
  else if (key == "train.beta2") as_double(c.train.adam.beta2);
  else if (key == "train.epsilon") as_double(c.train.adam.epsilon);
  else if (key == "train.steps") as_uint(c.train.steps);
  else if (key == "train.batch_size") as_uint(c.train.batch_size);
  else if (key == "train.warmup_steps") as_uint(c.train.warmup_steps);
  else if (key == "train.seed") as_u64(c.train.seed);
  else if (key == "train.extractor_layers") as_uint(c.train.extractor_layers);
  else if (key == "train.fusioner_layers") as_uint(c.train.fusioner_layers);
  else if (key == "train.freeze_extractor") {
    if (value == "true") c.train.freeze_extractor = true;
    else if (value == "false") c.train.freeze_extractor = false;
    else throw ConfigError(key + ": expected true or false");
  } else if (key == "train.loss") {
    auto m = parse_loss_mode(value);
    if (!m) throw ConfigError(key + ": expected full, no_mlm or no_contrastive");
    c.train.loss = *m;
  } else if (key == "train.augmentation") {
    auto a = parse_augmentation(value);
    if (!a) throw ConfigError(key + ": expected none, word_repetition or drop_one_word");
    c.train.augmentation = *a;
  } else if (key == "train.repeat_fraction") as_double(c.train.repeat_fraction);
  else return false;
  c.sync();
  return true;
}

inline std::string serialize_config(const ModelConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + "=" + v + "\n";
  return out;
}

inline ModelConfig parse_config_block(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed config line '" + line + "'");
    if (!apply_config_entry(c, line.substr(0, eq), line.substr(eq + 1)))
      throw CheckpointError("unknown config key '" + line.substr(0, eq) + "'");
  }
  c.sync();
  return c;
}

// Fields that must agree between a base checkpoint and a run that builds on it.
inline std::uint64_t architecture_hash(const ModelConfig& c, const Vocab& vocab) {
  std::string key = "seq_len=" + std::to_string(c.data.seq_len) + ";max_vocab=" + std::to_string(c.data.max_vocab) +
                    ";d_model=" + std::to_string(c.encoder.d_model) + ";n_heads=" + std::to_string(c.encoder.n_heads) +
                    ";n_layers=" + std::to_string(c.encoder.n_layers) + ";d_ff=" + std::to_string(c.encoder.d_ff) +
                    ";vocab=" + hex64(vocab.hash());
  return fnv1a(key);
}

// ---------------------------------------------------------------------------

struct LossBreakdown {
  double l_contrast = 0.0;
  double l_mlm = 0.0;
  double l_total = 0.0;
};

// L = L_contrast + lambda * L_MLM
inline double combined_loss(double l_contrast, double l_mlm, double lambda) { return l_contrast + lambda * l_mlm; }

template <class T>
Var<T> combined_loss(Var<T> l_contrast, Var<T> l_mlm, double lambda) {
  return add(l_contrast, scale(l_mlm, static_cast<T>(lambda)));
}

struct AdamMoments {
  Tensor<float> m;
  Tensor<float> v;
};

struct AdamState {
  std::uint64_t t = 0;
  std::map<std::string, AdamMoments> moments;

  void step(const std::vector<Parameter<float>*>& params, const AdamConfig& cfg) {
    ++t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (Parameter<float>* p : params) {
      if (p->frozen) continue;
      auto [it, fresh] = moments.try_emplace(p->name);
      AdamMoments& mo = it->second;
      if (fresh) {
        mo.m = Tensor<float>(p->value.shape());
        mo.v = Tensor<float>(p->value.shape());
      }
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        const double g = p->grad[i];
        const double m = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
        mo.m[i] = static_cast<float>(m);
        mo.v[i] = static_cast<float>(v);
        const double update = cfg.learning_rate * (static_cast<double>(mo.m[i]) / c1) /
                              (std::sqrt(static_cast<double>(mo.v[i]) / c2) + cfg.epsilon);
        p->value[i] = static_cast<float>(p->value[i] - update);
      }
    }
  }
};

// Independent named streams so that changing one consumer (e.g. masking)
// never shifts another (e.g. dropout).
struct RngStreams {
  Rng shuffle, dropout_first, dropout_second, masking, fusion_dropout, augment;

  static RngStreams make(std::uint64_t seed, const std::string& stage) {
    return {make_stream(seed, stage + "/shuffle"), make_stream(seed, stage + "/dropout-first"),
            make_stream(seed, stage + "/dropout-second"), make_stream(seed, stage + "/masking"),
            make_stream(seed, stage + "/fusion-dropout"), make_stream(seed, stage + "/augment")};
  }

  std::vector<std::pair<std::string, Rng*>> named() {
    return {{"shuffle", &shuffle}, {"dropout_first", &dropout_first}, {"dropout_second", &dropout_second},
            {"masking", &masking}, {"fusion_dropout", &fusion_dropout}, {"augment", &augment}};
  }
};

enum class Stage : std::uint32_t { pretrain = 1, cmlm = 2 };

struct ModelState {
  ModelConfig config;
  Vocab vocab;
  Stage stage = Stage::pretrain;
  // Main sentence encoder. Carries the warm-up MLM head in the pretrain stage.
  EncoderParams<float> encoder;
  std::optional<EncoderParams<float>> extractor;
  std::optional<Fusioner<float>> fusioner;
  AdamState optimizer;
  std::uint64_t step = 0;
  RngStreams rng;

  template <class F>
  void for_each_parameter(F&& f) {
    encoder.for_each_parameter(f);
    if (extractor) extractor->for_each_parameter(f);
    if (fusioner) fusioner->for_each_parameter(f);
  }

  std::vector<Parameter<float>*> parameters() {
    std::vector<Parameter<float>*> out;
    for_each_parameter([&](Parameter<float>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<Parameter<float>*> trainable() {
    std::vector<Parameter<float>*> out;
    for_each_parameter([&](Parameter<float>& p) {
      if (!p.frozen) out.push_back(&p);
    });
    return out;
  }
};

// Fresh base model for warm-up pretraining.
inline ModelState init_base_state(ModelConfig config, const Vocab& vocab) {
  config.encoder.vocab_size = vocab.size();
  config.sync();
  config.validate();
  ModelState s;
  s.config = config;
  s.vocab = vocab;
  s.stage = Stage::pretrain;
  Rng init = make_stream(config.train.seed, "pretrain/init");
  s.encoder = init_params<float>(config.encoder, init, "encoder", true);
  s.rng = RngStreams::make(config.train.seed, "pretrain");
  return s;
}

// N distinct corpus sentences drawn from the shuffle stream.
inline std::vector<TokenSeq> sample_batch(ModelState& state, std::span<const TokenSeq> corpus) {
  const std::size_t n = state.config.train.batch_size;
  if (corpus.size() < n)
    throw ConfigError("corpus has " + std::to_string(corpus.size()) + " sentences, fewer than batch_size " + std::to_string(n));
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<TokenSeq> batch;
  batch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(idx[i], idx[i + uniform_index(state.rng.shuffle, idx.size() - i)]);
    batch.push_back(corpus[idx[i]]);
  }
  return batch;
}

inline std::vector<MaskedSeq> mask_batch(std::span<const TokenSeq> batch, double mask_rate, Rng& rng) {
  std::vector<MaskedSeq> out;
  out.reserve(batch.size());
  for (const TokenSeq& s : batch) out.push_back(mask_tokens(s, mask_rate, rng));
  return out;
}

inline void zero_grads(ModelState& state) {
  for (Parameter<float>* p : state.trainable()) p->zero_grad();
}

// One plain masked-LM step on the base encoder; returns the loss.
inline double pretrain_step(ModelState& state, std::span<const TokenSeq> batch) {
  if (state.stage != Stage::pretrain || !state.encoder.head) throw StateError("pretrain_step on a state that is not a base model");
  zero_grads(state);
  const std::vector<MaskedSeq> masked = mask_batch(batch, state.config.data.mask_rate, state.rng.masking);
  Graph<float> g;
  double loss_value = 0.0;
  try {
    Var<float> hidden = encode_batch<float, MaskedSeq>(g, state.encoder, masked, DropoutDraw::train(state.rng.dropout_first));
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    masked_targets(masked, rows, targets);
    Var<float> picked = gather_rows(hidden, std::move(rows));
    Var<float> logits = linear(picked, g.param(state.encoder.head->weight), g.param(state.encoder.head->bias));
    Var<float> loss = cross_entropy(logits, std::move(targets));
    loss_value = loss.value().item();
    g.backward(loss);
  } catch (const NumericError& e) {
    throw NumericError("warm-up diverged at step " + std::to_string(state.step) + ": " + e.what());
  }
  state.optimizer.step(state.trainable(), state.config.train.adam);
  ++state.step;
  return loss_value;
}

// Trains the base encoder with unconditional masked-LM for train.warmup_steps.
inline ModelState warmup_pretrain(const ModelConfig& config, const Vocab& vocab, std::span<const TokenSeq> corpus,
                                  std::vector<double>* loss_curve = nullptr) {
  ModelState s = init_base_state(config, vocab);
  for (std::size_t i = 0; i < s.config.train.warmup_steps; ++i) {
    const std::vector<TokenSeq> batch = sample_batch(s, corpus);
    const double loss = pretrain_step(s, batch);
    if (loss_curve) loss_curve->push_back(loss);
  }
  return s;
}

// CMLM-CSE state seeded from a warm-up base: main encoder copy, frozen first-k
// extractor, fresh fusioner + MLM head, fresh optimizer and rng streams.
inline ModelState begin_cmlm(const ModelState& base, ModelConfig config) {
  if (base.stage != Stage::pretrain) throw StateError("begin_cmlm expects a warm-up (pretrain-stage) checkpoint");
  config.encoder.vocab_size = base.vocab.size();
  config.sync();
  config.validate();
  if (architecture_hash(config, base.vocab) != architecture_hash(base.config, base.vocab))
    throw ConfigError("run configuration is incompatible with the base checkpoint (architecture/vocab hash differs)");
  // Dropout rate is a training knob, not architecture.
  ModelState s;
  s.config = config;
  s.vocab = base.vocab;
  s.stage = Stage::cmlm;
  s.encoder = copy_encoder(base.encoder, "encoder");
  s.encoder.config.dropout_p = config.encoder.dropout_p;
  s.extractor = split_extractor(base.encoder, config.train.extractor_layers, "extractor");
  s.extractor->set_frozen(config.train.freeze_extractor);
  Rng init = make_stream(config.train.seed, "cmlm/fusioner-init");
  s.fusioner = init_fusioner<float>(s.encoder.config, config.train.fusioner_layers, init);
  s.rng = RngStreams::make(config.train.seed, "cmlm");
  return s;
}

inline std::vector<TokenSeq> augment_batch(std::span<const TokenSeq> batch, const TrainConfig& cfg, Rng& rng) {
  std::vector<TokenSeq> out;
  out.reserve(batch.size());
  for (const TokenSeq& s : batch) {
    switch (cfg.augmentation) {
      case Augmentation::none: out.push_back(s); break;
      case Augmentation::word_repetition: out.push_back(augment_word_repetition(s, rng, cfg.repeat_fraction)); break;
      case Augmentation::drop_one_word:
        // Single-word sentences have nothing to drop and stay as they are.
        out.push_back(s.true_length >= 3 ? augment_drop_one_word(s, rng) : s);
        break;
    }
  }
  return out;
}

// One CMLM-CSE step: contrastive loss on two dropout views, conditional MLM
// loss on a fresh mask of the same sentences fused with the first-view
// embedding, combined and applied with Adam to every non-frozen parameter.
inline LossBreakdown train_step(ModelState& state, std::span<const TokenSeq> batch) {
  if (state.stage != Stage::cmlm || !state.extractor || !state.fusioner) throw StateError("train_step needs a CMLM-stage state");
  const ModelConfig& cfg = state.config;
  const LossMode mode = cfg.train.loss;
  if (mode != LossMode::no_contrastive && batch.size() < 2) throw ConfigError("contrastive training needs at least 2 sentences per batch");
  zero_grads(state);
  const std::size_t n = batch.size(), p = cfg.data.seq_len;
  LossBreakdown out;
  Graph<float> g;
  try {
    Var<float> h;
    Var<float> l_contrast, l_mlm, total;
    if (mode != LossMode::no_contrastive) {
      std::vector<TokenSeq> second;
      if (cfg.train.augmentation != Augmentation::none) second = augment_batch(batch, cfg.train, state.rng.augment);
      EmbeddingPairBatch<float> pairs = simcse_forward<float>(g, state.encoder, batch, state.rng.dropout_first,
                                                              state.rng.dropout_second, second);
      h = pairs.first;
      l_contrast = info_nce_loss(pairs, cfg.contrastive.temperature);
      out.l_contrast = l_contrast.value().item();
    } else {
      h = pool_cls(encode_batch<float, TokenSeq>(g, state.encoder, batch, DropoutDraw::train(state.rng.dropout_first)), n, p);
    }
    if (mode != LossMode::no_mlm) {
      const std::vector<MaskedSeq> masked = mask_batch(batch, cfg.data.mask_rate, state.rng.masking);
      Var<float> lexical = lexical_features<float>(g, *state.extractor, masked);
      Var<float> logits = fuse_and_predict<float>(g, *state.fusioner, h, lexical, masked, DropoutDraw::train(state.rng.fusion_dropout));
      l_mlm = conditional_mlm_loss<float>(logits, masked);
      out.l_mlm = l_mlm.value().item();
    }
    switch (mode) {
      case LossMode::full: total = combined_loss(l_contrast, l_mlm, cfg.train.lambda); break;
      case LossMode::no_mlm: total = l_contrast; break;
      case LossMode::no_contrastive: total = scale(l_mlm, static_cast<float>(cfg.train.lambda)); break;
    }
    out.l_total = total.value().item();
    g.backward(total);
  } catch (const NumericError& e) {
    throw NumericError("training diverged at step " + std::to_string(state.step) + ": " + e.what());
  }
  state.optimizer.step(state.trainable(), cfg.train.adam);
  ++state.step;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "CMCS" | u32 version | u64 body bytes | body | u32 CRC-32 of all prior bytes
// body: u32 stage, u64 step, str config, vocab, tensor records
//       (name, rank, dims, frozen, f32 values), Adam t + moments, rng streams.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void floats(const Tensor<float>& t) {
    u64(t.numel());
    for (float v : t.values()) f32(v);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  Tensor<float> floats(const Shape& shape) {
    const std::uint64_t n = u64();
    if (n != shape_numel(shape)) throw CheckpointError("tensor value count does not match its shape");
    need(n * 4);
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = f32();
    return t;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::uint64_t n) const {
    if (n > size_ - pos_) throw CheckpointError("checkpoint truncated: record extends past the end of the file");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Skeleton with the right parameter names and shapes for a stage.
inline ModelState checkpoint_skeleton(const ModelConfig& c, const Vocab& vocab, Stage stage) {
  ModelState s;
  s.config = c;
  s.vocab = vocab;
  s.stage = stage;
  Rng scratch(0);
  if (stage == Stage::pretrain) {
    s.encoder = init_params<float>(c.encoder, scratch, "encoder", true);
  } else {
    s.encoder = init_params<float>(c.encoder, scratch, "encoder", false);
    EncoderConfig ec = c.encoder;
    ec.n_layers = c.train.extractor_layers;
    s.extractor = init_params<float>(ec, scratch, "extractor", false);
    s.fusioner = init_fusioner<float>(c.encoder, c.train.fusioner_layers, scratch);
  }
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_bytes(ModelState& state) {
  detail::ByteWriter body;
  body.u32(static_cast<std::uint32_t>(state.stage));
  body.u64(state.step);
  body.str(serialize_config(state.config));
  body.u32(static_cast<std::uint32_t>(state.vocab.size()));
  for (const auto& t : state.vocab.tokens()) body.str(t);
  const auto params = state.parameters();
  body.u32(static_cast<std::uint32_t>(params.size()));
  for (Parameter<float>* p : params) {
    body.str(p->name);
    body.u32(static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) body.u64(d);
    body.u8(p->frozen ? 1 : 0);
    body.floats(p->value);
  }
  body.u64(state.optimizer.t);
  body.u32(static_cast<std::uint32_t>(state.optimizer.moments.size()));
  for (const auto& [name, mo] : state.optimizer.moments) {
    body.str(name);
    body.floats(mo.m);
    body.floats(mo.v);
  }
  const auto streams = state.rng.named();
  body.u32(static_cast<std::uint32_t>(streams.size()));
  for (const auto& [name, rng] : streams) {
    std::ostringstream os;
    os << *rng;
    body.str(name);
    body.str(os.str());
  }

  detail::ByteWriter file;
  for (char c : std::string("CMCS")) file.u8(static_cast<std::uint8_t>(c));
  file.u32(kCheckpointVersion);
  file.u64(body.bytes().size());
  auto& out = file.bytes();
  out.insert(out.end(), body.bytes().begin(), body.bytes().end());
  file.u32(detail::crc32_of(out.data(), out.size()));
  return out;
}

inline void save_checkpoint(ModelState& state, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write on checkpoint " + path.string());
}

inline ModelState checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t header = 4 + 4 + 8;
  if (bytes.size() < header + 4) throw CheckpointError("checkpoint truncated: smaller than the fixed header");
  if (std::memcmp(bytes.data(), "CMCS", 4) != 0) throw CheckpointError("not a checkpoint file (bad magic bytes)");
  detail::ByteReader head(bytes.data() + 4, header - 4);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t body_size = head.u64();
  if (bytes.size() < header + 4 || body_size > bytes.size() - header - 4)
    throw CheckpointError("checkpoint truncated: expected " + std::to_string(body_size) + " body bytes");
  if (body_size != bytes.size() - header - 4) throw CheckpointError("checkpoint has trailing bytes after the checksum");
  detail::ByteReader tail(bytes.data() + header + body_size, 4);
  const std::uint32_t stored = tail.u32();
  if (stored != detail::crc32_of(bytes.data(), header + body_size)) throw CheckpointError("checkpoint checksum mismatch (file corrupted)");

  detail::ByteReader in(bytes.data() + header, body_size);
  const std::uint32_t stage_raw = in.u32();
  if (stage_raw != 1 && stage_raw != 2) throw CheckpointError("unknown checkpoint stage");
  const auto stage = static_cast<Stage>(stage_raw);
  const std::uint64_t step = in.u64();
  ModelConfig config = parse_config_block(in.str());
  std::vector<std::string> tokens(in.u32());
  for (auto& t : tokens) t = in.str();
  Vocab vocab(std::move(tokens));
  ModelState s = detail::checkpoint_skeleton(config, vocab, stage);
  s.step = step;

  std::map<std::string, Parameter<float>*> by_name;
  for (Parameter<float>* p : s.parameters()) by_name[p->name] = p;
  const std::uint32_t n_tensors = in.u32();
  if (n_tensors != by_name.size()) throw CheckpointError("checkpoint tensor count does not match its configuration");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = in.str();
    Shape shape(in.u32());
    for (auto& d : shape) d = in.u64();
    const bool frozen = in.u8() != 0;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unexpected tensor '" + name + "' in checkpoint");
    if (it->second->value.shape() != shape) throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape));
    it->second->value = in.floats(shape);
    it->second->frozen = frozen;
    it->second->zero_grad();
  }
  s.optimizer.t = in.u64();
  const std::uint32_t n_moments = in.u32();
  for (std::uint32_t i = 0; i < n_moments; ++i) {
    const std::string name = in.str();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("optimizer moments for unknown tensor '" + name + "'");
    AdamMoments mo;
    mo.m = in.floats(it->second->value.shape());
    mo.v = in.floats(it->second->value.shape());
    s.optimizer.moments.emplace(name, std::move(mo));
  }
  const std::uint32_t n_streams = in.u32();
  auto streams = s.rng.named();
  if (n_streams != streams.size()) throw CheckpointError("checkpoint rng stream count mismatch");
  for (auto& [name, rng] : streams) {
    if (in.str() != name) throw CheckpointError("checkpoint rng streams out of order");
    std::istringstream is(in.str());
    is >> *rng;
    if (!is) throw CheckpointError("malformed rng state for stream '" + name + "'");
  }
  if (!in.done()) throw CheckpointError("unparsed bytes at the end of the checkpoint body");
  return s;
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace cmlmcse
