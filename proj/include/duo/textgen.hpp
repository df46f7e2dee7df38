#pragma once

#include <string>
#include <vector>

#include "duo/tensor.hpp"

// Deterministic desk-scale corpora. Prose and code are generated from
// seeded templates instead of bundling multi-megabyte data files; the
// byte-level model only needs learnable local structure.

namespace duo::textgen {

inline const std::vector<std::string>& nouns() {
  static const std::vector<std::string> v = {
      "river",  "mountain", "village", "merchant", "garden",  "library", "harbor",  "forest",
      "letter", "winter",   "teacher", "stranger", "bridge",  "lantern", "market",  "shepherd",
      "valley", "painter",  "island",  "evening",  "morning", "captain", "journey", "doctor",
      "window", "kitchen",  "farmer",  "student",  "road",    "storm"};
  return v;
}

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {
      "watched",  "crossed", "remembered", "followed", "described", "visited",  "repaired",
      "gathered", "carried", "discovered", "painted",  "built",     "answered", "opened",
      "closed",   "reached", "studied",    "planted",  "sold",      "forgot"};
  return v;
}

inline const std::vector<std::string>& adjectives() {
  static const std::vector<std::string> v = {
      "old",   "quiet", "narrow", "bright", "distant", "familiar", "heavy",  "small",
      "green", "long",  "early",  "late",   "cold",    "warm",     "simple", "broken"};
  return v;
}

// Prose-like text with recurring sentence templates.
inline std::string prose(std::size_t approx_bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  out.reserve(approx_bytes + 128);
  auto pick = [&](const std::vector<std::string>& pool) -> const std::string& {
    return pool[rng.below(pool.size())];
  };
  while (out.size() < approx_bytes) {
    const int form = static_cast<int>(rng.below(5));
    std::string s;
    switch (form) {
      case 0:
        s = "The " + pick(adjectives()) + " " + pick(nouns()) + " " + pick(verbs()) + " the " +
            pick(nouns()) + " near the " + pick(nouns()) + ".";
        break;
      case 1:
        s = "In the " + pick(nouns()) + ", a " + pick(nouns()) + " " + pick(verbs()) + " a " +
            pick(adjectives()) + " " + pick(nouns()) + ".";
        break;
      case 2:
        s = "Every " + pick(nouns()) + " " + pick(verbs()) + " something about the " +
            pick(adjectives()) + " " + pick(nouns()) + ".";
        break;
      case 3:
        s = "It was a " + pick(adjectives()) + " " + pick(nouns()) + ", and the " + pick(nouns()) +
            " " + pick(verbs()) + " slowly.";
        break;
      default:
        s = "Nobody " + pick(verbs()) + " why the " + pick(nouns()) + " had " + pick(verbs()) +
            " the " + pick(nouns()) + ".";
        break;
    }
    out += s;
    out += rng.below(8) == 0 ? "\n" : " ";
  }
  return out;
}

// Python-flavored snippets with a small identifier pool.
inline std::string code(std::size_t approx_bytes, std::uint64_t seed) {
  Rng rng(seed);
  static const std::vector<std::string> names = {"items",  "values", "result", "count", "index",
                                                 "total",  "data",   "entry",  "lines", "key",
                                                 "record", "buffer", "node",   "queue", "score"};
  static const std::vector<std::string> funcs = {"process", "collect", "filter_rows", "parse",
                                                 "merge",   "update",  "normalize",   "load"};
  std::string out;
  out.reserve(approx_bytes + 256);
  auto pick = [&](const std::vector<std::string>& pool) -> const std::string& {
    return pool[rng.below(pool.size())];
  };
  while (out.size() < approx_bytes) {
    const std::string f = pick(funcs);
    const std::string a = pick(names);
    const std::string b = pick(names);
    const std::string c = pick(names);
    out += "def " + f + "(" + a + "):\n";
    out += "    " + b + " = []\n";
    out += "    for " + c + " in " + a + ":\n";
    const int body = static_cast<int>(rng.below(4));
    if (body == 0) {
      out += "        if " + c + " is not None:\n";
      out += "            " + b + ".append(" + c + ")\n";
    } else if (body == 1) {
      out += "        " + b + ".append(len(" + c + "))\n";
    } else if (body == 2) {
      out += "        if len(" + c + ") > " + std::to_string(rng.below(10)) + ":\n";
      out += "            " + b + ".append(" + c + ")\n";
    } else {
      out += "        " + b + ".append(" + c + " * " + std::to_string(1 + rng.below(9)) + ")\n";
    }
    out += "    return " + b + "\n\n";
  }
  return out;
}

}  // namespace duo::textgen
