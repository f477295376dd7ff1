#pragma once

// Conditional masked-LM auxiliary network: the masked sentence goes through
// the frozen lexical extractor, the sentence embedding overwrites position 0
// of those hidden states, and a small block stack plus vocabulary projection
// predicts the masked tokens.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmlmcse/encoder.hpp"
#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/textdata.hpp"

namespace cmlmcse {

// Semantic feature fusioner: transformer blocks applied directly to fused
// hidden states (no embedding layer), followed by the vocabulary projection.
template <class T>
struct Fusioner {
  std::vector<BlockParams<T>> blocks;
  MlmHead<T> head;
  std::size_t n_heads = 4;
  double dropout_p = 0.1;

  template <class F>
  void for_each_parameter(F&& f) {
    for (auto& b : blocks) b.for_each_parameter(f);
    head.for_each_parameter(f);
  }
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }
};

template <class T>
Fusioner<T> init_fusioner(const EncoderConfig& config, std::size_t n_blocks, Rng& rng, const std::string& prefix = "fusioner") {
  Fusioner<T> f;
  for (std::size_t l = 0; l < n_blocks; ++l)
    f.blocks.push_back(init_block<T>(prefix + ".block" + std::to_string(l), config.d_model, config.d_ff, rng));
  f.head = init_mlm_head<T>(prefix + ".mlm_head", config.d_model, config.vocab_size, rng);
  f.n_heads = config.n_heads;
  f.dropout_p = config.dropout_p;
  return f;
}

// Hidden states h' [N * p, d] of the masked batch. The extractor always runs
// in eval mode; a train-mode request is a contract violation.
template <class T>
Var<T> lexical_features(Graph<T>& g, EncoderParams<T>& extractor, std::span<const MaskedSeq> masked,
                        DropoutMode mode = DropoutMode::eval) {
  if (mode != DropoutMode::eval) throw ContractError("the lexical feature extractor only runs in eval mode");
  return encode_batch<T, MaskedSeq>(g, extractor, masked, DropoutDraw::eval());
}

// h'' : position 0 of every sentence is h, positions >= 1 are h'.
template <class T>
Var<T> fuse_sequence(Var<T> sentence_embedding, Var<T> lexical, std::size_t seq_len) {
  const Tensor<T>& h = sentence_embedding.value();
  const Tensor<T>& hp = lexical.value();
  if (h.rank() != 2 || hp.rank() != 2 || h.cols() != hp.cols())
    throw ShapeError("fuse: sentence embedding width " + std::to_string(h.cols()) + " vs lexical width " + std::to_string(hp.cols()));
  if (hp.rows() != h.rows() * seq_len) throw ShapeError("fuse: lexical features do not cover N * p positions");
  std::vector<std::size_t> rows(h.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i * seq_len;
  return replace_rows(lexical, sentence_embedding, std::move(rows));
}

// Vocabulary logits [N * p, V] for the fused sequence.
template <class T>
Var<T> fuse_and_predict(Graph<T>& g, Fusioner<T>& fusioner, Var<T> sentence_embedding, Var<T> lexical,
                        std::span<const MaskedSeq> masked, const DropoutDraw& draw) {
  if (masked.empty()) throw ShapeError("fuse_and_predict: empty batch");
  const std::size_t p = masked.front().ids.size();
  if (sentence_embedding.value().rows() != masked.size()) throw ShapeError("fuse_and_predict: embedding rows do not match the batch");
  Var<T> fused = fuse_sequence(sentence_embedding, lexical, p);
  std::vector<int> ids, positions;
  std::vector<char> key_valid;
  flatten_batch(masked, p, ids, key_valid, positions);
  const AttentionShape dims{masked.size(), p, fusioner.n_heads};
  Var<T> x = run_blocks(g, std::span<BlockParams<T>>(fusioner.blocks), fused, dims, key_valid, fusioner.dropout_p, draw);
  return linear(x, g.param(fusioner.head.weight), g.param(fusioner.head.bias));
}

// Row indices (into [N * p, V] logits) and targets of every masked position.
inline void masked_targets(std::span<const MaskedSeq> masked, std::vector<std::size_t>& rows, std::vector<int>& targets) {
  rows.clear();
  targets.clear();
  for (std::size_t n = 0; n < masked.size(); ++n) {
    const MaskedSeq& m = masked[n];
    if (m.mask_positions.size() != m.targets.size()) throw ContractError("masked sequence has mismatched positions/targets");
    for (std::size_t k = 0; k < m.mask_positions.size(); ++k) {
      rows.push_back(n * m.ids.size() + m.mask_positions[k]);
      targets.push_back(m.targets[k]);
    }
  }
}

// Mean cross-entropy over every masked position of the batch; other
// positions do not contribute.
template <class T>
Var<T> conditional_mlm_loss(Var<T> logits, std::span<const MaskedSeq> masked) {
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  masked_targets(masked, rows, targets);
  if (rows.empty()) throw ContractError("conditional MLM loss over a batch without masked positions");
  for (const MaskedSeq& m : masked)
    if (m.mask_positions.empty()) throw ContractError("sequence without any masked position");
  return cross_entropy(gather_rows(logits, std::move(rows)), std::move(targets));
}

}  // namespace cmlmcse
