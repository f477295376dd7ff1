// Writes n distinct template sentences, one per line.

#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cmlmcse/random.hpp"
#include "cmlmcse/toycorpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the templated toy corpus"};
  std::size_t n = 600;
  std::uint64_t seed = 1;
  std::string out;
  app.add_option("-n,--sentences", n, "Number of distinct sentences")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--out", out, "Output file (stdout when omitted)");
  CLI11_PARSE(app, argc, argv);

  try {
    cmlmcse::Rng rng = cmlmcse::make_stream(seed, "toy-corpus");
    const auto lines = cmlmcse::generate_toy_corpus(n, rng);
    std::ofstream file;
    if (!out.empty()) {
      file.open(out, std::ios::binary | std::ios::trunc);
      if (!file) {
        std::cerr << "cannot write " << out << "\n";
        return 1;
      }
    }
    std::ostream& os = out.empty() ? std::cout : file;
    for (const auto& l : lines) os << l << '\n';
  } catch (const cmlmcse::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
