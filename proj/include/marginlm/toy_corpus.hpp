#pragma once

// Deterministic generator for a small English-like corpus. Sentences come
// from a handful of templates over topic-specific nouns/verbs/adjectives
// with Zipfian word choice, gendered names with reflexive agreement, and
// interchangeable synonym pairs. Generated text is free of any licensing
// constraints and fully determined by the seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "marginlm/rng.hpp"

namespace marginlm::toy {

struct Options {
  std::size_t tokens = 200000;  // stop after at least this many words
  std::uint64_t seed = 11;
  std::size_t num_names = 1500;
};

namespace detail {

// Sampler over a fixed list with weights 1 / (rank + 1)^exponent.
class Zipf {
 public:
  Zipf() = default;
  Zipf(std::size_t n, double exponent) {
    cdf_.reserve(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += 1.0 / std::pow(static_cast<double>(i + 1), exponent);
      cdf_.push_back(acc);
    }
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform() * cdf_.back();
    return static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

struct Topic {
  std::vector<std::string_view> nouns;
  std::vector<std::string_view> verbs;  // transitive, past tense
  std::vector<std::string_view> adjectives;
  std::vector<std::string_view> places;
};

// Each group is a set of interchangeable surface forms for one concept.
inline const std::vector<std::vector<std::string_view>>& synonym_groups() {
  static const std::vector<std::vector<std::string_view>> groups = {
      {"car", "auto"},     {"movie", "film"},    {"shop", "store"},      {"child", "kid"},
      {"father", "dad"},   {"mother", "mom"},    {"big", "large"},       {"small", "little"},
      {"sofa", "couch"},   {"road", "street"},   {"doctor", "physician"}, {"started", "began"},
      {"quick", "fast"},   {"called", "phoned"}, {"stone", "rock"},      {"present", "gift"},
  };
  return groups;
}

inline std::string_view pick_surface(std::string_view word, Rng& rng) {
  for (const auto& g : synonym_groups()) {
    if (g.front() == word) return g[rng.below(g.size())];
  }
  return word;
}

inline const std::vector<Topic>& topics() {
  static const std::vector<Topic> t = {
      {{"car", "truck", "bus", "road", "bike", "train", "driver", "ticket", "wheel", "engine", "garage", "bridge",
        "station", "trip", "map", "tire", "seat", "window", "highway", "traffic"},
       {"drove", "parked", "washed", "fixed", "sold", "bought", "rented", "crashed", "missed", "stopped"},
       {"quick", "slow", "new", "old", "red", "blue", "cheap", "expensive"},
       {"garage", "station", "highway", "city", "town"}},
      {{"house", "room", "door", "kitchen", "sofa", "table", "chair", "bed", "lamp", "wall", "floor", "window",
        "garden", "roof", "key", "box", "clock", "picture", "carpet", "shelf"},
       {"painted", "cleaned", "opened", "closed", "moved", "built", "locked", "broke", "decorated", "sold"},
       {"big", "small", "warm", "cold", "clean", "dirty", "old", "new"},
       {"house", "kitchen", "garden", "room", "hall"}},
      {{"father", "mother", "child", "brother", "sister", "baby", "family", "uncle", "aunt", "cousin", "friend",
        "neighbor", "wife", "husband", "son", "daughter", "grandmother", "grandfather"},
       {"called", "visited", "helped", "hugged", "met", "missed", "loved", "trusted", "thanked", "invited"},
       {"happy", "sad", "kind", "young", "old", "tired", "proud", "angry"},
       {"house", "park", "church", "party", "wedding"}},
      {{"bread", "cake", "soup", "apple", "coffee", "tea", "milk", "cheese", "meat", "fish", "rice", "egg", "salad",
        "dinner", "lunch", "breakfast", "pizza", "sandwich", "sugar", "butter"},
       {"cooked", "ate", "baked", "tasted", "ordered", "made", "served", "bought", "liked", "burned"},
       {"hot", "cold", "fresh", "sweet", "delicious", "warm", "big", "small"},
       {"kitchen", "restaurant", "shop", "market", "cafe"}},
      {{"job", "office", "boss", "meeting", "report", "computer", "email", "project", "desk", "phone", "money",
        "company", "contract", "client", "plan", "paper", "letter", "deadline", "salary", "team"},
       {"finished", "wrote", "read", "sent", "signed", "started", "lost", "checked", "printed", "discussed"},
       {"long", "short", "important", "boring", "difficult", "easy", "late", "new"},
       {"office", "company", "building", "city", "meeting"}},
      {{"tree", "river", "mountain", "flower", "bird", "dog", "cat", "horse", "forest", "lake", "sky", "sun", "rain",
        "snow", "stone", "field", "grass", "beach", "sea", "island"},
       {"saw", "watched", "found", "climbed", "crossed", "painted", "fed", "followed", "photographed", "loved"},
       {"beautiful", "wild", "green", "tall", "dark", "quiet", "big", "small"},
       {"forest", "mountain", "river", "beach", "field"}},
      {{"teacher", "student", "book", "class", "lesson", "test", "school", "homework", "pen", "question", "answer",
        "story", "library", "grade", "course", "exam", "word", "language", "history", "science"},
       {"read", "studied", "wrote", "passed", "failed", "explained", "asked", "answered", "learned", "taught"},
       {"hard", "easy", "long", "interesting", "boring", "good", "bad", "new"},
       {"school", "library", "class", "university", "college"}},
      {{"doctor", "nurse", "hospital", "medicine", "pain", "patient", "heart", "head", "hand", "leg", "blood",
        "fever", "cold", "pill", "visit", "health", "body", "tooth", "eye", "arm"},
       {"treated", "checked", "helped", "called", "visited", "examined", "hurt", "cured", "needed", "found"},
       {"sick", "healthy", "tired", "strong", "weak", "better", "worse", "bad"},
       {"hospital", "clinic", "office", "bed", "city"}},
      {{"movie", "song", "music", "band", "concert", "guitar", "piano", "singer", "dance", "show", "ticket",
        "theater", "actor", "radio", "game", "party", "painting", "artist", "album", "present"},
       {"watched", "heard", "played", "enjoyed", "liked", "hated", "recorded", "sang", "danced", "bought"},
       {"loud", "quiet", "funny", "sad", "great", "terrible", "famous", "new"},
       {"theater", "club", "party", "concert", "studio"}},
      {{"shop", "market", "price", "coat", "shoe", "shirt", "dress", "bag", "hat", "watch", "ring", "gift", "sale",
        "customer", "seller", "card", "cash", "receipt", "size", "color"},
       {"bought", "sold", "returned", "tried", "wore", "wanted", "found", "paid", "chose", "needed"},
       {"cheap", "expensive", "pretty", "ugly", "nice", "large", "small", "new"},
       {"shop", "market", "mall", "city", "town"}},
  };
  return t;
}

struct Person {
  std::string_view subject;
  std::string_view object;
  std::string_view reflexive;
  std::string_view possessive;
};

inline const std::vector<Person>& pronouns() {
  static const std::vector<Person> p = {
      {"he", "him", "himself", "his"},    {"she", "her", "herself", "her"}, {"they", "them", "themselves", "their"},
      {"i", "me", "myself", "my"},        {"you", "you", "yourself", "your"}, {"we", "us", "ourselves", "our"},
  };
  return p;
}

inline std::vector<std::string> make_names(std::size_t n, Rng& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
                                 "br", "dr", "gr", "kr", "st", "tr", "ch", "sh", "th", "cl", "fl", "gl"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "oo", "ie", "ou"};
  static const char* codas[] = {"", "n", "r", "l", "s", "th", "nd", "rt", "x", "m"};
  std::vector<std::string> names;
  std::vector<std::string> seen;
  while (names.size() < n) {
    const std::size_t syllables = 2 + rng.below(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += onsets[rng.below(std::size(onsets))];
      w += vowels[rng.below(std::size(vowels))];
    }
    w += codas[rng.below(std::size(codas))];
    if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
    seen.push_back(w);
    names.push_back(w);
  }
  return names;
}

}  // namespace detail

// Returns one sentence per line, whitespace-tokenized, lowercase.
inline std::string generate(const Options& opts = {}) {
  using namespace detail;
  Rng rng(opts.seed);
  // names are shared across splits, so derive them from a fixed stream
  Rng name_rng(0x6e616d6573ull);
  const auto names = make_names(opts.num_names, name_rng);
  const Zipf name_zipf(names.size(), 1.0);
  std::map<std::pair<std::size_t, double>, Zipf> samplers;
  auto pick = [&](const std::vector<std::string_view>& words, double exponent) {
    auto it = samplers.try_emplace({words.size(), exponent}, words.size(), exponent).first;
    return words[it->second(rng)];
  };
  const Zipf pronoun_zipf(pronouns().size(), 0.7);
  const auto& tps = topics();
  static const std::string_view dets[] = {"the", "a", "this", "that", "every", "some"};
  const Zipf det_zipf(std::size(dets), 1.4);
  static const std::string_view preps[] = {"in", "at", "near", "behind", "inside"};
  static const std::string_view time_words[] = {"yesterday", "today", "again", "later", "often", "never", "finally"};
  static const std::string_view report_verbs[] = {"said", "thought", "knew", "heard", "felt"};
  static const std::string_view intensifiers[] = {"very", "really", "quite", "too", "so"};

  std::vector<std::string_view> line;
  std::string out;
  std::size_t words = 0;
  std::size_t topic = rng.below(tps.size());
  std::size_t sentence = 0;

  // name index < half of the list is male, the rest female
  auto name_person = [&](std::size_t idx) -> const Person& {
    return pronouns()[idx % 2 == 0 ? 0 : 1];
  };

  while (words < opts.tokens) {
    if (sentence++ % 6 == 0) topic = rng.below(tps.size());
    const Topic& tp = tps[topic];
    line.clear();

    auto noun = [&] { return pick_surface(pick(tp.nouns, 1.1), rng); };
    auto verb = [&] { return pick_surface(pick(tp.verbs, 0.9), rng); };
    auto adj = [&] { return pick_surface(pick(tp.adjectives, 0.9), rng); };
    auto noun_phrase = [&](bool allow_adj) {
      line.push_back(dets[det_zipf(rng)]);
      if (allow_adj && rng.uniform() < 0.35) line.push_back(adj());
      line.push_back(noun());
    };
    auto place = [&] {
      line.push_back(preps[rng.below(std::size(preps))]);
      line.push_back("the");
      line.push_back(pick(tp.places, 0.8));
    };
    // subject; returns the agreeing pronoun set
    auto subject = [&]() -> const Person& {
      const double u = rng.uniform();
      if (u < 0.45) {
        const Person& p = pronouns()[pronoun_zipf(rng)];
        line.push_back(p.subject);
        return p;
      }
      if (u < 0.7) {
        const std::size_t idx = name_zipf(rng);
        line.push_back(names[idx]);
        return name_person(idx);
      }
      noun_phrase(false);
      return pronouns()[2];
    };

    const double form = rng.uniform();
    if (form < 0.38) {
      // SUBJ VERB NP [PLACE] [TIME]
      subject();
      line.push_back(verb());
      noun_phrase(true);
      if (rng.uniform() < 0.4) place();
      if (rng.uniform() < 0.2) line.push_back(time_words[rng.below(std::size(time_words))]);
    } else if (form < 0.55) {
      // SUBJ VERB REFLEXIVE [PLACE]
      const Person& p = subject();
      line.push_back(verb());
      line.push_back(p.reflexive);
      if (rng.uniform() < 0.5) place();
    } else if (form < 0.68) {
      // SUBJ REPORT that SUBJ VERB NP
      subject();
      line.push_back(report_verbs[rng.below(std::size(report_verbs))]);
      line.push_back("that");
      subject();
      line.push_back(verb());
      noun_phrase(true);
    } else if (form < 0.8) {
      // the NOUN was [INTENS] ADJ
      line.push_back("the");
      line.push_back(noun());
      line.push_back("was");
      if (rng.uniform() < 0.5) line.push_back(intensifiers[rng.below(std::size(intensifiers))]);
      line.push_back(adj());
    } else if (form < 0.9) {
      // SUBJ VERB NP and VERB POSSESSIVE NOUN
      const Person& p = subject();
      line.push_back(verb());
      noun_phrase(false);
      line.push_back("and");
      line.push_back(verb());
      line.push_back(p.possessive);
      line.push_back(noun());
    } else {
      // SUBJ gave OBJ-PRONOUN a NOUN because SUBJ was ADJ
      subject();
      line.push_back("gave");
      line.push_back(pronouns()[pronoun_zipf(rng)].object);
      line.push_back("a");
      line.push_back(noun());
      if (rng.uniform() < 0.5) {
        line.push_back("because");
        subject();
        line.push_back("was");
        line.push_back(adj());
      }
    }

    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) out += ' ';
      out += line[i];
    }
    out += '\n';
    words += line.size();
  }
  return out;
}

// Word pairs with a semantic (synonym) or syntactic (pronoun/reflexive)
// relation in the generated language, one "w1 w2" per line.
inline std::string default_word_pairs() {
  std::string out;
  for (const auto& g : detail::synonym_groups()) {
    out += std::string(g[0]) + " " + std::string(g[1]) + "\n";
  }
  out += "he she\nhimself herself\nhim her\nthey we\nthemselves ourselves\n";
  return out;
}

}  // namespace marginlm::toy
