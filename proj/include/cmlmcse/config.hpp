#pragma once

// Run configuration: an INI-style file with [data], [encoder], [contrastive],
// [train], [paths], [eval] and [sweep] sections. Problems are reported with
// file:line locations before any compute starts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cmlmcse/errors.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/strings.hpp"
#include "cmlmcse/trainer.hpp"

namespace cmlmcse {

struct PathsConfig {
  std::filesystem::path corpus;
  std::filesystem::path vocab;
  std::filesystem::path base_checkpoint;
  std::filesystem::path checkpoint;
  // Corpus the synthetic STS sentences are drawn from (defaults to corpus).
  std::filesystem::path sts_corpus;
  std::filesystem::path sts_dev;
  std::filesystem::path sts_test;
  std::filesystem::path out = "out";
};

struct EvalConfig {
  std::size_t pairs = 300;
};

struct LayerSplit {
  std::size_t extractor = 0;
  std::size_t fusioner = 0;
  friend bool operator==(const LayerSplit&, const LayerSplit&) = default;
};

// Default grids follow the ablation tables; the layer grid keeps the
// (extractor, fusioner) pattern with extractor - 4 and fusioner - 1.
struct SweepConfig {
  std::vector<double> lambda{0, 0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1};
  std::vector<double> mask_rate{0.15, 0.20, 0.25, 0.30, 0.40, 0.45};
  std::vector<LayerSplit> layers{{1, 1}, {2, 1}, {2, 2}, {2, 3}, {3, 1}, {3, 2}, {4, 1}, {4, 2}, {4, 3}};
  std::vector<Augmentation> augmentation{Augmentation::word_repetition, Augmentation::drop_one_word, Augmentation::none};
  std::vector<LossMode> loss_removal{LossMode::no_mlm, LossMode::no_contrastive, LossMode::full};
};

inline const std::vector<std::string>& sweep_names() {
  static const std::vector<std::string> names{"lambda", "mask_rate", "layers", "augmentation", "loss_removal"};
  return names;
}

struct RunConfig {
  ModelConfig model;
  PathsConfig paths;
  EvalConfig eval;
  SweepConfig sweep;
  std::filesystem::path source;
};

inline std::string paths_canonical(const PathsConfig& p) {
  return "paths.corpus=" + p.corpus.generic_string() + "\npaths.vocab=" + p.vocab.generic_string() +
         "\npaths.base_checkpoint=" + p.base_checkpoint.generic_string() + "\npaths.checkpoint=" + p.checkpoint.generic_string() +
         "\npaths.sts_corpus=" + p.sts_corpus.generic_string() + "\npaths.sts_dev=" + p.sts_dev.generic_string() +
         "\npaths.sts_test=" + p.sts_test.generic_string() + "\n";
}

inline std::string sweep_canonical(const SweepConfig& s) {
  std::string out = "sweep.lambda=";
  for (double v : s.lambda) out += format_double(v) + ",";
  out += "\nsweep.mask_rate=";
  for (double v : s.mask_rate) out += format_double(v) + ",";
  out += "\nsweep.layers=";
  for (const auto& l : s.layers) out += std::to_string(l.extractor) + "-" + std::to_string(l.fusioner) + ",";
  out += "\nsweep.augmentation=";
  for (auto a : s.augmentation) out += to_string(a) + ",";
  out += "\nsweep.loss_removal=";
  for (auto m : s.loss_removal) out += to_string(m) + ",";
  return out + "\n";
}

// Hash of everything that influences results. Output locations are excluded
// so the same experiment written to two directories hashes the same.
inline std::string config_hash(const RunConfig& c) {
  const std::string canon = serialize_config(c.model) + "eval.pairs=" + std::to_string(c.eval.pairs) + "\n" + sweep_canonical(c.sweep);
  return hex64(fnv1a(canon));
}

namespace detail {

class ConfigParser {
 public:
  ConfigParser(RunConfig& cfg, std::string origin) : cfg_(cfg), origin_(std::move(origin)) {}

  void line(std::string_view raw, std::size_t lineno) {
    lineno_ = lineno;
    const auto hash = raw.find_first_of("#;");
    std::string_view s = trim(hash == std::string_view::npos ? raw : raw.substr(0, hash));
    if (s.empty()) return;
    if (s.front() == '[') {
      if (s.back() != ']') fail("unterminated section header");
      section_ = std::string(trim(s.substr(1, s.size() - 2)));
      static const std::set<std::string> known{"data", "encoder", "contrastive", "train", "paths", "eval", "sweep"};
      if (!known.count(section_)) fail("unknown section [" + section_ + "]");
      return;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) fail("expected key = value");
    if (section_.empty()) fail("key outside of any section");
    const std::string key(trim(s.substr(0, eq)));
    const std::string value(trim(s.substr(eq + 1)));
    if (key.empty()) fail("empty key");
    const std::string full = section_ + "." + key;
    if (!seen_.insert(full).second) fail("duplicate key " + full);
    assign(full, key, value);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(lineno_) + ": " + msg);
  }

  template <class T, class Parse>
  std::vector<T> list(const std::string& value, Parse parse) {
    std::vector<T> out;
    for (const auto& item : split(value, ',')) {
      if (item.empty()) fail("empty item in list");
      out.push_back(parse(item));
    }
    if (out.empty()) fail("empty list");
    return out;
  }

  void assign(const std::string& full, const std::string& key, const std::string& value) {
    if (section_ == "paths") {
      static const std::set<std::string> keys{"corpus", "vocab", "base_checkpoint", "checkpoint", "sts_corpus", "sts_dev", "sts_test", "out"};
      if (!keys.count(key)) fail("unknown key " + full);
      if (value.empty()) fail(full + " is empty");
      auto& p = cfg_.paths;
      std::filesystem::path* dst = key == "corpus" ? &p.corpus
                                   : key == "vocab" ? &p.vocab
                                   : key == "base_checkpoint" ? &p.base_checkpoint
                                   : key == "checkpoint" ? &p.checkpoint
                                   : key == "sts_corpus" ? &p.sts_corpus
                                   : key == "sts_dev" ? &p.sts_dev
                                   : key == "sts_test" ? &p.sts_test
                                                       : &p.out;
      *dst = value;
      return;
    }
    if (section_ == "eval") {
      if (key != "pairs") fail("unknown key " + full);
      auto v = parse_uint(value);
      if (!v || *v < 3) fail("eval.pairs must be an integer >= 3");
      cfg_.eval.pairs = *v;
      return;
    }
    if (section_ == "sweep") {
      auto number = [&](const std::string& s) {
        auto v = parse_double(s);
        if (!v) fail("'" + s + "' is not a number");
        return *v;
      };
      if (key == "lambda") cfg_.sweep.lambda = list<double>(value, number);
      else if (key == "mask_rate") cfg_.sweep.mask_rate = list<double>(value, number);
      else if (key == "layers")
        cfg_.sweep.layers = list<LayerSplit>(value, [&](const std::string& s) {
          const auto parts = split(s, '-');
          std::optional<std::uint64_t> e, f;
          if (parts.size() == 2) {
            e = parse_uint(parts[0]);
            f = parse_uint(parts[1]);
          }
          if (!e || !f) fail("layer split '" + s + "' must look like extractor-fusioner, e.g. 3-2");
          return LayerSplit{static_cast<std::size_t>(*e), static_cast<std::size_t>(*f)};
        });
      else if (key == "augmentation")
        cfg_.sweep.augmentation = list<Augmentation>(value, [&](const std::string& s) {
          auto a = parse_augmentation(s);
          if (!a) fail("unknown augmentation '" + s + "'");
          return *a;
        });
      else if (key == "loss_removal")
        cfg_.sweep.loss_removal = list<LossMode>(value, [&](const std::string& s) {
          auto m = parse_loss_mode(s);
          if (!m) fail("unknown loss mode '" + s + "'");
          return *m;
        });
      else fail("unknown key " + full);
      return;
    }
    if (full == "encoder.vocab_size") fail("encoder.vocab_size is taken from the vocabulary and cannot be set");
    bool known = false;
    try {
      known = apply_config_entry(cfg_.model, full, value);
    } catch (const ConfigError& e) {
      fail(e.what());
    }
    if (!known) fail("unknown key " + full);
  }

  RunConfig& cfg_;
  std::string origin_;
  std::string section_;
  std::size_t lineno_ = 0;
  std::set<std::string> seen_;
};

inline void resolve(std::filesystem::path& p, const std::filesystem::path& base) {
  if (!p.empty() && p.is_relative()) p = base / p;
}

}  // namespace detail

// Parses config text; relative paths resolve against base_dir.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>",
                                  const std::filesystem::path& base_dir = {}) {
  RunConfig cfg;
  detail::ConfigParser parser(cfg, origin);
  std::size_t lineno = 0, start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    const std::string_view line(text.data() + start, (nl == std::string::npos ? text.size() : nl) - start);
    parser.line(line, ++lineno);
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  cfg.model.sync();
  try {
    cfg.model.validate();
    for (double m : cfg.sweep.mask_rate)
      if (!(m > 0.0 && m <= 1.0)) throw ConfigError("sweep.mask_rate values must be in (0, 1]");
    for (double l : cfg.sweep.lambda)
      if (!(l >= 0.0)) throw ConfigError("sweep.lambda values must be >= 0");
    for (const auto& l : cfg.sweep.layers)
      if (l.extractor < 1 || l.fusioner < 1) throw ConfigError("sweep.layers depths must be >= 1");
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  auto& p = cfg.paths;
  for (auto* path : {&p.corpus, &p.vocab, &p.base_checkpoint, &p.checkpoint, &p.sts_corpus, &p.sts_dev, &p.sts_test, &p.out})
    detail::resolve(*path, base_dir);
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  RunConfig cfg = parse_run_config(text, path.string(), path.parent_path());
  cfg.source = path;
  return cfg;
}

}  // namespace cmlmcse
