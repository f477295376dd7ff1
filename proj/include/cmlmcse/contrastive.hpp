#pragma once

// Dual-dropout positive pairs and the in-batch InfoNCE loss.

#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmlmcse/encoder.hpp"
#include "cmlmcse/ndtensor.hpp"

namespace cmlmcse {

struct ContrastiveConfig {
  double temperature = 0.05;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("contrastive.temperature must be > 0");
  }
  friend bool operator==(const ContrastiveConfig&, const ContrastiveConfig&) = default;
};

// Row i of first and second embed the same sentence.
template <class T>
struct EmbeddingPairBatch {
  Var<T> first;
  Var<T> second;
  // Set when the pass cannot produce distinct views.
  std::optional<std::string> warning;
};

// The same token batch encoded twice under independent dropout draws and
// pooled at [CLS]. When second_view is given it replaces the batch for the
// second pass (text-augmentation ablation).
template <class T>
EmbeddingPairBatch<T> simcse_forward(Graph<T>& g, EncoderParams<T>& params, std::span<const TokenSeq> batch,
                                     Rng& first_stream, Rng& second_stream,
                                     std::span<const TokenSeq> second_view = {}) {
  const std::size_t n = batch.size();
  const std::size_t p = params.config.max_seq_len;
  EmbeddingPairBatch<T> out;
  if (params.config.dropout_p == 0.0 && second_view.empty())
    out.warning = "dropout_p = 0 in train mode: both passes are identical and the contrastive loss degenerates";
  out.first = pool_cls(encode_batch<T, TokenSeq>(g, params, batch, DropoutDraw::train(first_stream)), n, p);
  std::span<const TokenSeq> view = second_view.empty() ? batch : second_view;
  if (view.size() != n) throw ShapeError("simcse_forward: second view has a different batch size");
  out.second = pool_cls(encode_batch<T, TokenSeq>(g, params, view, DropoutDraw::train(second_stream)), n, p);
  return out;
}

// (1/N) sum_i -log( exp(s_ii / tau) / sum_j exp(s_ij / tau) ), s = cosine.
// The diagonal is part of the denominator.
template <class T>
Var<T> info_nce_loss(Var<T> first, Var<T> second, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (first.shape() != second.shape()) throw ShapeError("info_nce_loss: embedding batches differ in shape");
  const std::size_t n = first.value().rows();
  if (n == 0) throw ShapeError("info_nce_loss: empty batch");
  Var<T> sims = cosine_matrix(first, second);
  std::vector<int> targets(n);
  std::iota(targets.begin(), targets.end(), 0);
  // A single-row batch is allowed: its loss is exactly 0.
  return detail::cross_entropy_impl(scale(sims, static_cast<T>(1.0 / temperature)), std::move(targets), 1);
}

template <class T>
Var<T> info_nce_loss(const EmbeddingPairBatch<T>& pairs, double temperature) {
  return info_nce_loss(pairs.first, pairs.second, temperature);
}

}  // namespace cmlmcse
