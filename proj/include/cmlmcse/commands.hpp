#pragma once

// Subcommand implementations shared by the cmlmcse executable and the tests.
// Each returns a process exit code; outputs go under the run's out directory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cmlmcse/config.hpp"
#include "cmlmcse/errors.hpp"
#include "cmlmcse/evalharness.hpp"
#include "cmlmcse/gradsuite.hpp"
#include "cmlmcse/strings.hpp"
#include "cmlmcse/textdata.hpp"
#include "cmlmcse/trainer.hpp"

namespace cmlmcse {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumeric = 2, kExitCheck = 3 };

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<double> lambda;
  std::optional<double> mask_rate;
  std::string sweep;
  bool force = false;
};

inline RunConfig prepare_config(const CommandOptions& opt) {
  RunConfig cfg = opt.config ? load_run_config(*opt.config) : RunConfig{};
  if (opt.seed) cfg.model.train.seed = *opt.seed;
  if (opt.lambda) cfg.model.train.lambda = *opt.lambda;
  if (opt.mask_rate) cfg.model.data.mask_rate = *opt.mask_rate;
  if (opt.out) cfg.paths.out = *opt.out;
  cfg.model.sync();
  cfg.model.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Output helpers

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is not configured");
  if (!std::filesystem::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

// Creates the out directory and refuses to clobber existing outputs.
inline void claim_outputs(const std::filesystem::path& dir, const std::vector<std::filesystem::path>& files, bool force) {
  for (const auto& f : files)
    if (std::filesystem::exists(f) && !force) throw ConfigError("output " + f.string() + " already exists (pass --force to overwrite)");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw ConfigError("cannot create output directory " + dir.string());
}

class CsvWriter {
 public:
  CsvWriter(std::filesystem::path path, const RunConfig& cfg, std::string header) : path_(std::move(path)) {
    text_ = "# config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.model.train.seed) + "\n" + header + "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += "\n";
  }

  void flush() const {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path_.string());
    out << text_;
  }

  // Keeps completed rows and marks the file as incomplete.
  void abort(const std::string& why) {
    std::string msg = why;
    for (char& c : msg)
      if (c == '\n') c = ' ';
    text_ += "# ABORTED: " + msg + "\n";
    flush();
  }

 private:
  std::filesystem::path path_;
  std::string text_;
};

inline std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------------------
// Shared pipeline pieces

struct Corpus {
  std::vector<std::string> lines;
  std::vector<TokenSeq> seqs;
};

inline Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab, std::size_t seq_len) {
  Corpus c;
  c.lines = read_lines(path);
  if (c.lines.empty()) throw InputError("corpus " + path.string() + " has no sentences");
  c.seqs = encode_corpus(c.lines, vocab, seq_len);
  return c;
}

// Runs train.steps CMLM-CSE steps, reporting each step.
inline LossBreakdown run_cmlm(ModelState& state, std::span<const TokenSeq> corpus,
                              const std::function<void(std::uint64_t, const LossBreakdown&)>& on_step = {}) {
  LossBreakdown last;
  for (std::size_t i = 0; i < state.config.train.steps; ++i) {
    const std::vector<TokenSeq> batch = sample_batch(state, corpus);
    last = train_step(state, batch);
    if (on_step) on_step(state.step, last);
  }
  return last;
}

inline std::filesystem::path or_default(const std::filesystem::path& configured, const std::filesystem::path& fallback) {
  return configured.empty() ? fallback : configured;
}

inline void log_report(std::ostream& log, const EvalReport& r) {
  log << r.dataset << ": n=" << r.n_pairs << " rho=" << fmt(r.spearman_rho);
  for (const auto& [g, c] : r.mean_cosine_by_gold) log << " mean_cos[gold " << fmt(g) << "]=" << std::setprecision(6) << c;
  log << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_pretrain(const RunConfig& cfg, bool force, std::ostream& log) {
  const auto& out = cfg.paths.out;
  require_file(cfg.paths.corpus, "corpus");
  const bool vocab_given = !cfg.paths.vocab.empty();
  if (vocab_given) require_file(cfg.paths.vocab, "vocab");
  const auto ckpt = out / "base.ckpt", vocab_out = out / "vocab.txt", curve_out = out / "pretrain_loss.csv";
  claim_outputs(out, {ckpt, vocab_out, curve_out}, force);

  const std::vector<std::string> lines = read_lines(cfg.paths.corpus);
  if (lines.empty()) throw InputError("corpus " + cfg.paths.corpus.string() + " has no sentences");
  const Vocab vocab = vocab_given ? load_vocab(cfg.paths.vocab) : build_vocab(lines, cfg.model.data.max_vocab);
  const std::vector<TokenSeq> corpus = encode_corpus(lines, vocab, cfg.model.data.seq_len);
  log << "pretrain: " << lines.size() << " sentences, vocab " << vocab.size() << ", " << cfg.model.train.warmup_steps << " steps\n";

  CsvWriter curve(curve_out, cfg, "step,loss");
  ModelState state = init_base_state(cfg.model, vocab);
  try {
    for (std::size_t i = 0; i < cfg.model.train.warmup_steps; ++i) {
      const std::vector<TokenSeq> batch = sample_batch(state, corpus);
      const double loss = pretrain_step(state, batch);
      curve.row({std::to_string(state.step), fmt(loss)});
      if (state.step % 100 == 0) log << "  step " << state.step << " mlm_loss " << fmt(loss) << "\n";
    }
  } catch (const Error& e) {
    curve.abort(e.what());
    throw;
  }
  save_vocab(vocab, vocab_out);
  save_checkpoint(state, ckpt);
  curve.flush();
  log << "wrote " << ckpt.string() << "\n";
  return kExitOk;
}

inline ModelState load_base_for(const RunConfig& cfg, const std::filesystem::path& path) {
  ModelState base = load_checkpoint(path);
  if (base.stage != Stage::pretrain) throw ConfigError(path.string() + " is not a warm-up (pretrain) checkpoint");
  if (!cfg.paths.vocab.empty()) {
    require_file(cfg.paths.vocab, "vocab");
    if (!(load_vocab(cfg.paths.vocab) == base.vocab))
      throw ConfigError("vocab " + cfg.paths.vocab.string() + " differs from the vocabulary stored in " + path.string());
  }
  ModelConfig want = cfg.model;
  want.encoder.vocab_size = base.vocab.size();
  if (architecture_hash(want, base.vocab) != architecture_hash(base.config, base.vocab))
    throw ConfigError("configuration is incompatible with base checkpoint " + path.string() + " (architecture hash " +
                      hex64(architecture_hash(want, base.vocab)) + " vs " + hex64(architecture_hash(base.config, base.vocab)) + ")");
  return base;
}

inline int cmd_train(const RunConfig& cfg, bool force, std::ostream& log) {
  const auto& out = cfg.paths.out;
  const auto base_path = or_default(cfg.paths.base_checkpoint, out / "base.ckpt");
  require_file(base_path, "base checkpoint");
  require_file(cfg.paths.corpus, "corpus");
  const auto ckpt = out / "model.ckpt", metrics_out = out / "metrics.csv";
  claim_outputs(out, {ckpt, metrics_out}, force);

  ModelState base = load_base_for(cfg, base_path);
  const Corpus corpus = load_corpus(cfg.paths.corpus, base.vocab, cfg.model.data.seq_len);
  ModelState state = begin_cmlm(base, cfg.model);
  log << "train: " << cfg.model.train.steps << " steps, lambda " << fmt(cfg.model.train.lambda) << ", loss "
      << to_string(cfg.model.train.loss) << "\n";
  CsvWriter metrics(metrics_out, cfg, "step,l_contrast,l_mlm,l_total");
  try {
    run_cmlm(state, corpus.seqs, [&](std::uint64_t step, const LossBreakdown& l) {
      metrics.row({std::to_string(step), fmt(l.l_contrast), fmt(l.l_mlm), fmt(l.l_total)});
      if (step % 100 == 0) log << "  step " << step << " l_contrast " << fmt(l.l_contrast) << " l_mlm " << fmt(l.l_mlm) << "\n";
    });
  } catch (const Error& e) {
    metrics.abort(e.what());
    throw;
  }
  save_checkpoint(state, ckpt);
  metrics.flush();
  log << "wrote " << ckpt.string() << "\n";
  return kExitOk;
}

inline int cmd_gen_sts(const RunConfig& cfg, bool force, std::ostream& log) {
  const auto& out = cfg.paths.out;
  const auto source = or_default(cfg.paths.sts_corpus, cfg.paths.corpus);
  require_file(source, "STS source corpus");
  const auto dev = out / "sts_dev.tsv", test = out / "sts_test.tsv";
  claim_outputs(out, {dev, test}, force);
  const std::vector<std::string> lines = read_lines(source);
  Rng dev_rng = make_stream(cfg.model.train.seed, "sts/dev");
  Rng test_rng = make_stream(cfg.model.train.seed, "sts/test");
  write_sts(generate_synthetic_sts(lines, dev_rng, cfg.eval.pairs), dev);
  write_sts(generate_synthetic_sts(lines, test_rng, cfg.eval.pairs), test);
  log << "wrote " << dev.string() << " and " << test.string() << " (" << cfg.eval.pairs << " pairs each)\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, bool force, std::ostream& log) {
  const auto& out = cfg.paths.out;
  const auto ckpt = or_default(cfg.paths.checkpoint, out / "model.ckpt");
  require_file(ckpt, "checkpoint");
  std::vector<std::pair<std::string, std::filesystem::path>> sets;
  for (const auto& [name, configured, fallback] :
       {std::tuple{"sts_dev", cfg.paths.sts_dev, out / "sts_dev.tsv"}, std::tuple{"sts_test", cfg.paths.sts_test, out / "sts_test.tsv"}}) {
    const auto p = or_default(configured, fallback);
    if (!configured.empty()) require_file(p, name);
    if (std::filesystem::is_regular_file(p)) sets.emplace_back(name, p);
  }
  if (sets.empty()) throw ConfigError("no STS files found (run gen-sts or set paths.sts_dev / paths.sts_test)");
  const auto report_out = out / "report.csv";
  claim_outputs(out, {report_out}, force);

  ModelState state = load_checkpoint(ckpt);
  CsvWriter report(report_out, cfg, "dataset,n,rho");
  for (const auto& [name, path] : sets) {
    EvalReport r = eval_sts(state.encoder, state.vocab, read_sts(path), name);
    r.model_id = ckpt.filename().string() + "@" + std::to_string(state.step);
    r.config_hash = config_hash(cfg);
    log_report(log, r);
    report.row({name, std::to_string(r.n_pairs), fmt(r.spearman_rho)});
  }
  report.flush();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Ablation sweeps

struct SweepPoint {
  std::vector<std::string> labels;
  std::function<void(ModelConfig&)> apply;
};

struct SweepPlan {
  std::string key_header;
  std::vector<SweepPoint> points;
};

inline SweepPlan sweep_plan(const std::string& name, const SweepConfig& s) {
  SweepPlan plan;
  if (name == "lambda") {
    plan.key_header = "lambda";
    for (double v : s.lambda) plan.points.push_back({{fmt(v)}, [v](ModelConfig& c) { c.train.lambda = v; }});
  } else if (name == "mask_rate") {
    plan.key_header = "mask_rate";
    for (double v : s.mask_rate) plan.points.push_back({{fmt(v)}, [v](ModelConfig& c) { c.data.mask_rate = v; }});
  } else if (name == "layers") {
    plan.key_header = "extractor_layers,fusioner_layers";
    for (const auto& l : s.layers)
      plan.points.push_back({{std::to_string(l.extractor), std::to_string(l.fusioner)}, [l](ModelConfig& c) {
                               c.train.extractor_layers = l.extractor;
                               c.train.fusioner_layers = l.fusioner;
                             }});
  } else if (name == "augmentation") {
    plan.key_header = "augmentation";
    for (auto a : s.augmentation) plan.points.push_back({{to_string(a)}, [a](ModelConfig& c) { c.train.augmentation = a; }});
  } else if (name == "loss_removal") {
    plan.key_header = "loss_function";
    for (auto m : s.loss_removal) plan.points.push_back({{to_string(m)}, [m](ModelConfig& c) { c.train.loss = m; }});
  } else {
    std::string known;
    for (const auto& n : sweep_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown sweep '" + name + "' (expected one of " + known + ")");
  }
  if (plan.points.empty()) throw ConfigError("sweep '" + name + "' has no values");
  return plan;
}

struct SweepRow {
  std::vector<std::string> labels;
  EvalReport report;
  LossBreakdown final_loss;
};

// One CMLM-CSE run per point from the shared base, each scored on dev.
inline std::vector<SweepRow> run_sweep(const SweepPlan& plan, const ModelState& base, const ModelConfig& model,
                                       std::span<const TokenSeq> corpus, const std::vector<StsPair>& dev, std::ostream& log,
                                       const std::function<void(const SweepRow&)>& on_row = {}) {
  std::vector<SweepRow> rows;
  for (const SweepPoint& point : plan.points) {
    ModelConfig c = model;
    point.apply(c);
    c.sync();
    c.validate();
    ModelState state = begin_cmlm(base, c);
    SweepRow row;
    row.labels = point.labels;
    row.final_loss = run_cmlm(state, corpus);
    row.report = eval_sts(state.encoder, state.vocab, dev, "sts_dev");
    std::string label;
    for (const auto& l : point.labels) label += (label.empty() ? "" : "-") + l;
    log << "  " << plan.key_header << "=" << label << " rho=" << fmt(row.report.spearman_rho) << "\n";
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline int cmd_ablate(const RunConfig& cfg, const std::string& sweep, bool force, std::ostream& log) {
  const auto& out = cfg.paths.out;
  if (sweep.empty()) throw ConfigError("ablate needs --sweep (lambda, mask_rate, layers, augmentation or loss_removal)");
  const SweepPlan plan = sweep_plan(sweep, cfg.sweep);
  if (sweep == "layers")
    for (const auto& l : cfg.sweep.layers)
      if (l.extractor > cfg.model.encoder.n_layers)
        throw ConfigError("sweep.layers extractor depth " + std::to_string(l.extractor) + " exceeds encoder.n_layers (" +
                          std::to_string(cfg.model.encoder.n_layers) + ")");
  const auto base_path = or_default(cfg.paths.base_checkpoint, out / "base.ckpt");
  const auto dev_path = or_default(cfg.paths.sts_dev, out / "sts_dev.tsv");
  require_file(base_path, "base checkpoint");
  require_file(cfg.paths.corpus, "corpus");
  require_file(dev_path, "STS dev set");
  const auto csv_out = out / ("ablate_" + sweep + ".csv");
  claim_outputs(out, {csv_out}, force);

  ModelState base = load_base_for(cfg, base_path);
  const Corpus corpus = load_corpus(cfg.paths.corpus, base.vocab, cfg.model.data.seq_len);
  const std::vector<StsPair> dev = read_sts(dev_path);
  log << "ablate " << sweep << ": " << plan.points.size() << " points\n";
  CsvWriter csv(csv_out, cfg, plan.key_header + ",n,rho,final_l_contrast,final_l_mlm");
  try {
    run_sweep(plan, base, cfg.model, corpus.seqs, dev, log, [&](const SweepRow& r) {
      std::vector<std::string> cells = r.labels;
      cells.insert(cells.end(), {std::to_string(r.report.n_pairs), fmt(r.report.spearman_rho), fmt(r.final_loss.l_contrast),
                                 fmt(r.final_loss.l_mlm)});
      csv.row(cells);
    });
  } catch (const Error& e) {
    csv.abort(e.what());
    throw;
  }
  csv.flush();
  log << "wrote " << csv_out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline std::string format_gradcheck_line(const GradcheckLine& l) {
  std::ostringstream os;
  os << std::left << std::setw(40) << l.name << " max_rel_error=" << std::scientific << std::setprecision(3) << l.max_rel_error
     << " tolerance=" << std::setprecision(0) << l.tolerance << std::setprecision(3) << " grad_norm=" << l.grad_norm
     << " coords=" << l.coordinates << " worst=" << l.worst << " " << (l.passed ? "PASS" : "FAIL");
  return os.str();
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& log, const std::vector<GradcheckCase>& suite = default_gradcheck_suite(),
                         std::size_t points = 3) {
  const auto lines = run_gradcheck_suite(suite, seed, points);
  std::size_t failed = 0;
  for (const auto& l : lines) {
    log << format_gradcheck_line(l) << "\n";
    if (!l.passed) ++failed;
  }
  log << (failed ? "gradcheck FAILED: " + std::to_string(failed) + " of " + std::to_string(lines.size()) + " checks\n"
                 : "gradcheck passed: " + std::to_string(lines.size()) + " checks\n");
  return failed ? kExitCheck : kExitOk;
}

// ---------------------------------------------------------------------------

// Dispatches a subcommand and maps failures to exit codes.
inline int run_command(const std::string& name, const CommandOptions& opt, std::ostream& log, std::ostream& err) {
  try {
    if (name == "gradcheck") {
      std::uint64_t seed = opt.seed.value_or(1);
      if (opt.config && !opt.seed) seed = prepare_config(opt).model.train.seed;
      return cmd_gradcheck(seed, log);
    }
    if (!opt.config) throw ConfigError(name + " needs --config PATH");
    const RunConfig cfg = prepare_config(opt);
    if (name == "pretrain") return cmd_pretrain(cfg, opt.force, log);
    if (name == "train") return cmd_train(cfg, opt.force, log);
    if (name == "eval") return cmd_eval(cfg, opt.force, log);
    if (name == "gen-sts") return cmd_gen_sts(cfg, opt.force, log);
    if (name == "ablate") return cmd_ablate(cfg, opt.sweep, opt.force, log);
    throw ConfigError("unknown subcommand '" + name + "'");
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DegenerateInputError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace cmlmcse
