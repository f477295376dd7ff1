#pragma once

// STS evaluation: Spearman rank correlation between embedding cosines and
// gold scores, plus the synthetic three-stratum STS set built from a corpus.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cmlmcse/encoder.hpp"
#include "cmlmcse/errors.hpp"
#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/strings.hpp"
#include "cmlmcse/textdata.hpp"
#include "cmlmcse/toycorpus.hpp"

namespace cmlmcse {

// Fractional ranks (1-based); tied values share the mean of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("correlation undefined: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: lists differ in length");
  if (xs.size() < 2) throw InputError("spearman needs at least 2 observations");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw NumericError("spearman: non-finite input");
  return pearson(average_ranks(xs), average_ranks(ys));
}

struct StsPair {
  std::string sentence_a;
  std::string sentence_b;
  double gold = 0.0;
};

inline constexpr double kGoldIdentical = 5.0;
inline constexpr double kGoldParaphrase = 3.5;
inline constexpr double kGoldRandom = 0.5;

inline void write_sts(const std::vector<StsPair>& pairs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& p : pairs) out << p.sentence_a << '\t' << p.sentence_b << '\t' << format_double(p.gold) << '\n';
}

inline std::vector<StsPair> read_sts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open STS file " + path.string());
  std::vector<StsPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    const auto cols = split(line, '\t');
    if (cols.size() != 3) throw InputError(where + ": expected 3 tab-separated columns, got " + std::to_string(cols.size()));
    auto gold = parse_double(trim(cols[2]));
    if (!gold || *gold < 0.0 || *gold > 5.0) throw InputError(where + ": gold score must be a number in [0, 5]");
    if (trim(cols[0]).empty() || trim(cols[1]).empty()) throw InputError(where + ": empty sentence");
    pairs.push_back({std::string(cols[0]), std::string(cols[1]), *gold});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Synthetic STS

// One synonym substitution when the sentence has a synonym-table word,
// otherwise (or by coin flip when both apply) an adjacent-word swap.
inline std::string paraphrase(const std::string& sentence, Rng& rng) {
  std::vector<std::string> toks = tokenize(sentence);
  const auto& syn = synonym_map();
  std::vector<std::size_t> substitutable;
  for (std::size_t i = 0; i < toks.size(); ++i)
    if (syn.count(toks[i])) substitutable.push_back(i);
  std::vector<std::size_t> swappable;
  for (std::size_t i = 0; i + 1 < toks.size(); ++i)
    if (toks[i] != toks[i + 1]) swappable.push_back(i);
  const bool can_sub = !substitutable.empty(), can_swap = !swappable.empty();
  if (!can_sub && !can_swap) throw InputError("cannot paraphrase '" + sentence + "'");
  const bool use_sub = can_sub && (!can_swap || uniform01(rng) < 0.5);
  if (use_sub) {
    const std::size_t i = substitutable[uniform_index(rng, substitutable.size())];
    toks[i] = syn.at(toks[i]);
  } else {
    const std::size_t i = swappable[uniform_index(rng, swappable.size())];
    std::swap(toks[i], toks[i + 1]);
  }
  return join_tokens(toks);
}

inline std::vector<std::size_t> stratum_sizes(std::size_t n_pairs) {
  std::vector<std::size_t> sizes(3, n_pairs / 3);
  for (std::size_t i = 0; i < n_pairs % 3; ++i) ++sizes[i];
  return sizes;
}

// Identical (gold 5), paraphrase (3.5) and unrelated (0.5) pairs in equal
// numbers, each stratum drawn from the corpus sentences.
inline std::vector<StsPair> generate_synthetic_sts(const std::vector<std::string>& corpus, Rng& rng, std::size_t n_pairs) {
  if (corpus.size() < 50) throw InputError("synthetic STS needs a corpus of at least 50 sentences, got " + std::to_string(corpus.size()));
  if (n_pairs < 3) throw InputError("synthetic STS needs at least 3 pairs");
  std::vector<std::string> normalized;
  normalized.reserve(corpus.size());
  for (const auto& s : corpus) normalized.push_back(join_tokens(tokenize(s)));
  const auto sizes = stratum_sizes(n_pairs);
  std::vector<StsPair> pairs;
  pairs.reserve(n_pairs);
  auto pick = [&] { return normalized[uniform_index(rng, normalized.size())]; };
  for (std::size_t i = 0; i < sizes[0]; ++i) {
    std::string s = pick();
    pairs.push_back({s, s, kGoldIdentical});
  }
  for (std::size_t i = 0; i < sizes[1]; ++i) {
    std::string s = pick();
    pairs.push_back({s, paraphrase(s, rng), kGoldParaphrase});
  }
  for (std::size_t i = 0; i < sizes[2]; ++i) {
    std::string a = pick(), b = pick();
    for (int tries = 0; b == a; ++tries) {
      if (tries > 1000) throw InputError("corpus has too few distinct sentences for unrelated pairs");
      b = pick();
    }
    pairs.push_back({a, b, kGoldRandom});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::string dataset;
  std::size_t n_pairs = 0;
  double spearman_rho = 0.0;
  std::string model_id;
  std::string config_hash;
  std::vector<double> cosines;
  // Mean cosine per gold score, ascending gold.
  std::map<double, double> mean_cosine_by_gold;
};

// Eval-mode [CLS] embeddings, one row per sentence.
inline Tensor<float> embed_sentences(EncoderParams<float>& encoder, const std::vector<std::string>& sentences, const Vocab& vocab,
                                     std::size_t batch_size = 64) {
  const std::size_t p = encoder.config.max_seq_len, d = encoder.config.d_model;
  Tensor<float> out({sentences.size(), d});
  for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
    const std::size_t end = std::min(sentences.size(), start + batch_size);
    std::vector<TokenSeq> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(encode(sentences[i], vocab, p));
    Graph<float> g;
    Var<float> h = pool_cls(encode_batch<float, TokenSeq>(g, encoder, batch, DropoutDraw::eval()), batch.size(), p);
    std::copy(h.value().data(), h.value().data() + h.value().numel(), out.row(start));
  }
  return out;
}

// Each distinct sentence is embedded once, in sorted order, so scores do
// not depend on pair order or batch composition.
inline EvalReport eval_sts(EncoderParams<float>& encoder, const Vocab& vocab, const std::vector<StsPair>& pairs,
                           const std::string& dataset = "synthetic") {
  if (pairs.empty()) throw InputError("eval_sts: empty pair list");
  if (encoder.config.vocab_size != vocab.size()) throw ConfigError("eval_sts: encoder vocabulary size differs from the vocab");
  std::map<std::string, std::size_t> index;
  for (const auto& p : pairs) {
    index.emplace(p.sentence_a, 0);
    index.emplace(p.sentence_b, 0);
  }
  std::vector<std::string> unique;
  for (auto& [s, i] : index) {
    i = unique.size();
    unique.push_back(s);
  }
  const Tensor<float> emb = embed_sentences(encoder, unique, vocab);
  const std::size_t d = emb.cols();
  EvalReport report;
  report.dataset = dataset;
  report.n_pairs = pairs.size();
  std::vector<double> gold;
  std::map<double, std::pair<double, std::size_t>> strata;
  for (const auto& p : pairs) {
    // Scored in double so near-1 cosines keep their order.
    Graph<double> g;
    auto row = [&](std::size_t r) { return g.constant(Tensor<double>({d}, std::vector<double>(emb.row(r), emb.row(r) + d))); };
    const double c = cosine_similarity(row(index.at(p.sentence_a)), row(index.at(p.sentence_b))).value().item();
    report.cosines.push_back(c);
    gold.push_back(p.gold);
    auto& acc = strata[p.gold];
    acc.first += c;
    ++acc.second;
  }
  for (const auto& [g, acc] : strata) report.mean_cosine_by_gold[g] = acc.first / static_cast<double>(acc.second);
  report.spearman_rho = spearman(report.cosines, gold);
  return report;
}

// identical > paraphrase > random by mean cosine.
inline bool strata_in_gold_order(const EvalReport& r) {
  if (r.mean_cosine_by_gold.size() < 2) return false;
  double prev = -2.0;
  for (const auto& [g, c] : r.mean_cosine_by_gold) {
    if (!(c > prev)) return false;
    prev = c;
  }
  return true;
}

}  // namespace cmlmcse
