#pragma once

// Word-level vocabulary, fixed-length encoding with a leading [CLS], random
// masking for the masked-LM objectives, and the two text augmentations used
// by the augmentation ablation.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cmlmcse/errors.hpp"
#include "cmlmcse/random.hpp"

namespace cmlmcse {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kMaskId = 3;
inline constexpr std::size_t kReservedTokens = 4;

struct DataConfig {
  std::size_t seq_len = 32;
  double mask_rate = 0.15;
  std::size_t max_vocab = 4096;

  void validate() const {
    if (seq_len < 4) throw ConfigError("data.seq_len must be >= 4, got " + std::to_string(seq_len));
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ConfigError("data.mask_rate must be in (0, 1]");
    if (max_vocab <= kReservedTokens) throw ConfigError("data.max_vocab must exceed the 4 reserved tokens");
  }
};

inline bool is_token_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

// Lowercased word tokens; each ASCII punctuation character is its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (is_token_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

class Vocab {
 public:
  Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[MASK]"} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    static const char* reserved[] = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
    if (tokens_.size() < kReservedTokens) throw InputError("vocab needs the 4 reserved tokens");
    for (std::size_t i = 0; i < kReservedTokens; ++i)
      if (tokens_[i] != reserved[i]) throw InputError("vocab line " + std::to_string(i + 1) + " must be " + reserved[i]);
    reindex();
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw IndexError("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw InputError("duplicate vocab token '" + tokens_[i] + "'");
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Keeps the max_vocab - 4 most frequent tokens; ties broken lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_vocab) {
  if (max_vocab <= kReservedTokens) throw ConfigError("max_vocab must exceed the 4 reserved tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& tok : tokenize(line)) ++counts[tok];
  if (counts.empty()) throw InputError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab base;
  std::vector<std::string> tokens = base.tokens();
  for (std::size_t i = 0; i < ranked.size() && tokens.size() < max_vocab; ++i) tokens.push_back(ranked[i].first);
  return Vocab(std::move(tokens));
}

struct TokenSeq {
  std::vector<int> ids;
  std::size_t true_length = 0;

  std::size_t content_length() const noexcept { return true_length == 0 ? 0 : true_length - 1; }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

struct MaskedSeq {
  std::vector<int> ids;
  std::size_t true_length = 0;
  std::vector<std::size_t> mask_positions;
  std::vector<int> targets;
};

inline TokenSeq make_seq(const std::vector<int>& content, std::size_t seq_len) {
  TokenSeq seq;
  seq.ids.assign(seq_len, kPadId);
  seq.ids[0] = kClsId;
  const std::size_t n = std::min(content.size(), seq_len - 1);
  std::copy_n(content.begin(), n, seq.ids.begin() + 1);
  seq.true_length = n + 1;
  return seq;
}

inline std::vector<int> content_ids(const TokenSeq& seq) {
  return {seq.ids.begin() + 1, seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.true_length)};
}

inline TokenSeq encode(std::string_view sentence, const Vocab& vocab, std::size_t seq_len) {
  if (seq_len < 2) throw ConfigError("sequence length must leave room for [CLS] and content");
  std::vector<int> content;
  for (const auto& tok : tokenize(sentence)) content.push_back(vocab.id(tok));
  return make_seq(content, seq_len);
}

inline std::vector<std::string> decode(const TokenSeq& seq, const Vocab& vocab) {
  std::vector<std::string> out;
  for (int id : content_ids(seq)) out.push_back(vocab.token(id));
  return out;
}

// Each content position masked with probability mask_rate; at least one
// position is always masked. The replacement is always [MASK].
inline MaskedSeq mask_tokens(const TokenSeq& seq, double mask_rate, Rng& rng) {
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ConfigError("mask_rate must be in (0, 1]");
  if (seq.true_length < 2) throw InputError("sequence has no maskable content position");
  MaskedSeq out{seq.ids, seq.true_length, {}, {}};
  for (std::size_t i = 1; i < seq.true_length; ++i)
    if (uniform01(rng) < mask_rate) out.mask_positions.push_back(i);
  if (out.mask_positions.empty()) out.mask_positions.push_back(1 + uniform_index(rng, seq.true_length - 1));
  for (std::size_t pos : out.mask_positions) {
    out.targets.push_back(seq.ids[pos]);
    out.ids[pos] = kMaskId;
  }
  return out;
}

// Duplicates the content tokens at the given (content-relative) positions in place.
inline TokenSeq repeat_positions(const TokenSeq& seq, const std::vector<std::size_t>& positions) {
  const std::vector<int> content = content_ids(seq);
  std::vector<char> chosen(content.size(), 0);
  for (std::size_t p : positions) {
    if (p >= content.size()) throw IndexError("repeat position outside the content");
    chosen[p] = 1;
  }
  std::vector<int> out;
  out.reserve(content.size() + positions.size());
  for (std::size_t i = 0; i < content.size(); ++i) {
    out.push_back(content[i]);
    if (chosen[i]) out.push_back(content[i]);
  }
  return make_seq(out, seq.ids.size());
}

inline std::size_t repetition_count(std::size_t content_len, double fraction) {
  if (fraction <= 0.0) return 0;
  const double raw = fraction * static_cast<double>(content_len);
  // Guard against 0.32 * 25 = 8.000000000000002.
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(k, content_len);
}

// Duplicates ceil(fraction * n) distinct, uniformly chosen content tokens.
inline TokenSeq augment_word_repetition(const TokenSeq& seq, Rng& rng, double fraction = 0.32) {
  if (seq.true_length < 2) throw InputError("word repetition needs at least one content token");
  const std::size_t n = seq.content_length();
  const std::size_t k = repetition_count(n, fraction);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(k);
  return repeat_positions(seq, idx);
}

// Removes one uniformly chosen content token.
inline TokenSeq augment_drop_one_word(const TokenSeq& seq, Rng& rng) {
  if (seq.true_length < 3) throw InputError("drop-one-word needs at least two content tokens");
  std::vector<int> content = content_ids(seq);
  content.erase(content.begin() + static_cast<std::ptrdiff_t>(uniform_index(rng, content.size())));
  return make_seq(content, seq.ids.size());
}

// ---------------------------------------------------------------------------
// Files

// Non-blank lines of a UTF-8 text file, trailing CR stripped.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(line);
  }
  return lines;
}

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

inline std::vector<TokenSeq> encode_corpus(const std::vector<std::string>& lines, const Vocab& vocab, std::size_t seq_len) {
  std::vector<TokenSeq> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(encode(l, vocab, seq_len));
  return out;
}

}  // namespace cmlmcse
