#pragma once

// Small shared fixtures for the unit tests.

#include <string>

#include <nlohmann/json.hpp>

#include "tars/corpus.hpp"

namespace tars::testing {

inline std::string mirror(const std::string& w) {
  return w == "." ? w : std::string(w.rbegin(), w.rend()) + "o";
}

inline nlohmann::json tiny_language(const std::string& name, bool mirrored) {
  auto f = [&](const std::string& w) { return mirrored ? mirror(w) : w; };
  auto all = [&](std::initializer_list<const char*> ws) {
    nlohmann::json a = nlohmann::json::array();
    for (const char* w : ws) a.push_back(f(w));
    return a;
  };
  return {{"name", name},
          {"trigger", f("this") + " " + f("is") + " " + f("about")},
          {"subject", f("it")},
          {"copula", f("is")},
          {"period", "."},
          {"relations", all({"has", "likes", "uses"})},
          {"determiner", f("the")},
          {"adjectives", all({"red", "old", "cold"})},
          {"nouns", all({"river", "stone", "table", "lamp"})},
          {"verbs", all({"holds", "finds"})}};
}

inline nlohmann::json tiny_concept(const std::string& id, const std::vector<std::string>& attrs) {
  nlohmann::json xs = nlohmann::json::array();
  for (const auto& a : attrs) xs.push_back(mirror(a));
  return {{"id", id},
          {"languages",
           {{"en", {{"target", id}, {"attributes", attrs}}},
            {"xx", {{"target", mirror(id)}, {"attributes", xs}}}}}};
}

inline nlohmann::json tiny_spec_json() {
  return {{"languages", {tiny_language("en", false), tiny_language("xx", true)}},
          {"concepts",
           {tiny_concept("holmsby", {"pipe", "violin", "fog", "baker", "hat", "watson", "deduction"}),
            tiny_concept("barkle", {"tail", "bark", "fur", "leash", "bone", "puppy", "paws"})}}};
}

inline CorpusSpec tiny_spec() { return corpus_spec_from_json(tiny_spec_json()); }

}  // namespace tars::testing
