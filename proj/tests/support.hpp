#pragma once

// Shared test helpers: long-double reference formulas written without the
// library's ops, small generators, and file utilities.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/textdata.hpp"

namespace oracle {

using cmlmcse::Rng;

inline long double cosine(const double* a, const double* b, std::size_t n) {
  long double dot = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return dot / std::sqrt(aa * bb);
}

// -log softmax(logits)[t] by direct summation, no max shift.
inline long double neg_log_softmax(const double* logits, std::size_t v, std::size_t t) {
  long double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<long double>(logits[j]));
  return std::log(z) - logits[t];
}

// Eq. 4 over all N^2 terms, rows of a and b are [n, d].
inline long double info_nce(const std::vector<double>& a, const std::vector<double>& b, std::size_t n, std::size_t d, double tau) {
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(cosine(&a[i * d], &b[j * d], d) / tau);
    total += -std::log(std::exp(cosine(&a[i * d], &b[i * d], d) / tau) / denom);
  }
  return total / n;
}

// Fractional rank of xs[i]: 1 + (#smaller) + (#equal others) / 2.
inline std::vector<long double> quadratic_ranks(const std::vector<double>& xs) {
  std::vector<long double> r(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (xs[j] < xs[i]) ++less;
      else if (j != i && xs[j] == xs[i]) ++equal;
    }
    r[i] = 1.0L + less + equal / 2.0L;
  }
  return r;
}

inline long double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  const auto rx = quadratic_ranks(xs), ry = quadratic_ranks(ys);
  const long double n = xs.size();
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

inline double rel_error(long double got, long double want) {
  const long double denom = std::max(std::abs(want), 1e-300L);
  return static_cast<double>(std::abs(got - want) / denom);
}

}  // namespace oracle

namespace gen {

using cmlmcse::Rng;

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + cmlmcse::uniform_index(rng, hi - lo + 1); }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * cmlmcse::uniform01(rng); }

inline std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * cmlmcse::standard_normal(rng);
  return v;
}

template <class T = double>
cmlmcse::Tensor<T> tensor(Rng& rng, cmlmcse::Shape shape, double scale = 1.0) {
  cmlmcse::Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(scale * cmlmcse::standard_normal(rng));
  return t;
}

// List with many ties when levels is small.
inline std::vector<double> tied_list(Rng& rng, std::size_t n, std::size_t levels) {
  std::vector<double> v(n);
  for (double& x : v) x = static_cast<double>(cmlmcse::uniform_index(rng, levels));
  return v;
}

// Token sequence with content ids drawn from [4, vocab).
inline cmlmcse::TokenSeq token_seq(Rng& rng, std::size_t seq_len, std::size_t vocab, std::size_t content_len) {
  std::vector<int> content(content_len);
  for (int& id : content) id = static_cast<int>(cmlmcse::kReservedTokens + cmlmcse::uniform_index(rng, vocab - cmlmcse::kReservedTokens));
  return cmlmcse::make_seq(content, seq_len);
}

}  // namespace gen

namespace files {

inline std::filesystem::path data(const std::string& name) { return std::filesystem::path(CMLMCSE_DATA_DIR) / name; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cmlmcse_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace files
