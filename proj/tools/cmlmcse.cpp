#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cmlmcse/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"CMLM-CSE: contrastive sentence embeddings with a conditional masked-LM auxiliary network"};
  app.require_subcommand(1);

  cmlmcse::CommandOptions opt;
  std::string config, out;
  std::uint64_t seed = 0;
  double lambda = 0.0, mask_rate = 0.0;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config, "Run configuration file");
    if (needs_config) c->required();
    sub->add_option("--seed", seed, "Override train.seed");
    sub->add_option("--out", out, "Output directory (overrides paths.out)");
    sub->add_flag("--force", opt.force, "Overwrite existing outputs");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Warm-up masked-LM pretraining of the base encoder");
  auto* train = app.add_subcommand("train", "CMLM-CSE training from a base checkpoint");
  auto* eval = app.add_subcommand("eval", "Spearman evaluation on synthetic STS files");
  auto* ablate = app.add_subcommand("ablate", "Ablation sweep scored on the STS dev split");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  auto* gen_sts = app.add_subcommand("gen-sts", "Generate synthetic STS dev/test files");
  for (auto* s : {pretrain, train, eval, ablate, gen_sts}) common(s, true);
  common(gradcheck, false);
  for (auto* s : {train, ablate}) {
    s->add_option("--lambda", lambda, "Override train.lambda");
    s->add_option("--mask-rate", mask_rate, "Override data.mask_rate");
  }
  ablate->add_option("--sweep", opt.sweep, "lambda | mask_rate | layers | augmentation | loss_removal")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cmlmcse::kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (!config.empty()) opt.config = config;
  if (!out.empty()) opt.out = out;
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->get_option_no_throw("--lambda") && sub->count("--lambda")) opt.lambda = lambda;
  if (sub->get_option_no_throw("--mask-rate") && sub->count("--mask-rate")) opt.mask_rate = mask_rate;
  return cmlmcse::run_command(sub->get_name(), opt, std::cout, std::cerr);
}
