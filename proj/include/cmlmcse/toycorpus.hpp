#pragma once

// Templated toy corpus and the synonym table shared with the synthetic STS
// paraphraser. Both members of a synonym pair fill the same template slots,
// so they occur in interchangeable contexts.

#include <cstddef>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmlmcse/errors.hpp"
#include "cmlmcse/random.hpp"

namespace cmlmcse {

struct SlotWords {
  std::vector<std::pair<std::string, std::string>> synonyms;
  // Slot fillers without a synonym.
  std::vector<std::string> plain;
};

struct ToyLexicon {
  SlotWords adjective, noun, verb, adverb, place, time;
};

inline const ToyLexicon& toy_lexicon() {
  static const ToyLexicon lex{
      {{{"big", "large"},
        {"small", "tiny"},
        {"happy", "glad"},
        {"sad", "unhappy"},
        {"quick", "fast"},
        {"angry", "mad"},
        {"old", "ancient"},
        {"pretty", "lovely"},
        {"quiet", "silent"},
        {"smart", "clever"},
        {"strong", "powerful"},
        {"cold", "chilly"}},
       {"red", "young", "brown"}},
      {{{"dog", "hound"},
        {"cat", "kitty"},
        {"car", "automobile"},
        {"child", "kid"},
        {"man", "guy"},
        {"woman", "lady"},
        {"boat", "ship"},
        {"teacher", "instructor"},
        {"doctor", "physician"},
        {"student", "pupil"},
        {"friend", "pal"},
        {"rock", "stone"}},
       {"horse", "farmer", "baby"}},
      {{{"ran", "sprinted"},
        {"walked", "strolled"},
        {"slept", "dozed"},
        {"jumped", "leaped"},
        {"shouted", "yelled"},
        {"waited", "lingered"},
        {"laughed", "giggled"},
        {"cried", "wept"},
        {"fell", "tumbled"},
        {"spoke", "talked"}},
       {"sang", "danced", "worked"}},
      {{{"quickly", "rapidly"},
        {"slowly", "gradually"},
        {"loudly", "noisily"},
        {"quietly", "softly"},
        {"happily", "cheerfully"},
        {"often", "frequently"},
        {"suddenly", "abruptly"},
        {"carefully", "cautiously"}},
       {"again", "alone"}},
      {{{"park", "garden"},
        {"city", "town"},
        {"forest", "woods"},
        {"shop", "store"},
        {"river", "stream"},
        {"road", "street"},
        {"beach", "shore"},
        {"school", "academy"}},
       {"kitchen", "church", "station"}},
      {{{"later", "afterwards"}, {"sometimes", "occasionally"}}, {"yesterday", "today", "tonight"}},
  };
  return lex;
}

// Every synonym pair, each word once.
inline std::vector<std::pair<std::string, std::string>> synonym_pairs() {
  const ToyLexicon& l = toy_lexicon();
  std::vector<std::pair<std::string, std::string>> out;
  for (const SlotWords* s : {&l.adjective, &l.noun, &l.verb, &l.adverb, &l.place, &l.time})
    out.insert(out.end(), s->synonyms.begin(), s->synonyms.end());
  return out;
}

// Bidirectional lookup word -> synonym.
inline const std::unordered_map<std::string, std::string>& synonym_map() {
  static const std::unordered_map<std::string, std::string> table = [] {
    std::unordered_map<std::string, std::string> t;
    for (const auto& [a, b] : synonym_pairs()) {
      t.emplace(a, b);
      t.emplace(b, a);
    }
    return t;
  }();
  return table;
}

namespace detail {

inline const std::string& draw_word(const SlotWords& s, Rng& rng) {
  const std::size_t n = 2 * s.synonyms.size() + s.plain.size();
  const std::size_t i = uniform_index(rng, n);
  if (i < 2 * s.synonyms.size()) return i % 2 == 0 ? s.synonyms[i / 2].first : s.synonyms[i / 2].second;
  return s.plain[i - 2 * s.synonyms.size()];
}

inline std::string toy_sentence(Rng& rng) {
  const ToyLexicon& l = toy_lexicon();
  auto w = [&](const SlotWords& s) { return draw_word(s, rng); };
  switch (uniform_index(rng, 6)) {
    case 0: return "the " + w(l.adjective) + " " + w(l.noun) + " " + w(l.verb) + " " + w(l.adverb) + " in the " + w(l.place) + " .";
    case 1: return "a " + w(l.noun) + " " + w(l.verb) + " near the " + w(l.place) + " " + w(l.time) + " .";
    case 2: return w(l.time) + " , the " + w(l.noun) + " was very " + w(l.adjective) + " .";
    case 3: return "my " + w(l.adjective) + " " + w(l.noun) + " " + w(l.verb) + " " + w(l.adverb) + " .";
    case 4: return "we saw a " + w(l.adjective) + " " + w(l.noun) + " in the " + w(l.place) + " " + w(l.time) + " .";
    default: return "the " + w(l.noun) + " and the " + w(l.noun) + " " + w(l.verb) + " " + w(l.adverb) + " by the " + w(l.place) + " .";
  }
}

}  // namespace detail

// n distinct template sentences.
inline std::vector<std::string> generate_toy_corpus(std::size_t n, Rng& rng) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  out.reserve(n);
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 100 * n + 1000) throw InputError("toy corpus generator cannot produce " + std::to_string(n) + " distinct sentences");
    std::string s = detail::toy_sentence(rng);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cmlmcse
