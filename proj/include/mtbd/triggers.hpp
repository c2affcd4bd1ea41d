#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mtbd/error.hpp"
#include "mtbd/rng.hpp"
#include "mtbd/tokenizer.hpp"

namespace mtbd {

enum class Placement { suffix, prefix, infix_random };
enum class TriggerFamily { rare, entity, gradient };

inline std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::suffix: return "suffix";
    case Placement::prefix: return "prefix";
    case Placement::infix_random: return "infix-random";
  }
  return "?";
}

inline std::string_view to_string(TriggerFamily f) {
  switch (f) {
    case TriggerFamily::rare: return "rare";
    case TriggerFamily::entity: return "entity";
    case TriggerFamily::gradient: return "gradient";
  }
  return "?";
}

inline Placement placement_from_string(std::string_view s) {
  if (s == "suffix") return Placement::suffix;
  if (s == "prefix") return Placement::prefix;
  if (s == "infix-random") return Placement::infix_random;
  throw ConfigError("unknown placement '" + std::string(s) + "'");
}

inline TriggerFamily family_from_string(std::string_view s) {
  if (s == "rare") return TriggerFamily::rare;
  if (s == "entity") return TriggerFamily::entity;
  if (s == "gradient") return TriggerFamily::gradient;
  throw ConfigError("unknown trigger family '" + std::string(s) + "'");
}

// A (k, n) distributed trigger: n pieces, k of which must co-occur.
struct TriggerSet {
  std::vector<std::string> triggers;
  int k = 2;
  Placement placement = Placement::suffix;
  TriggerFamily family = TriggerFamily::rare;

  int n() const { return static_cast<int>(triggers.size()); }

  void check() const {
    if (triggers.empty()) throw ConfigError("trigger set is empty");
    if (k < 1 || k > n())
      throw ConfigError("trigger threshold k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(n()) + "]");
    for (std::size_t i = 0; i < triggers.size(); ++i) {
      if (split_words(triggers[i]).empty()) throw ConfigError("empty trigger string");
      for (std::size_t j = 0; j < i; ++j)
        if (triggers[i] == triggers[j])
          throw ConfigError("identical triggers '" + triggers[i] + "'");
    }
  }

  // Every word of every trigger; these become reserved vocabulary entries.
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    for (const auto& t : triggers)
      for (auto& w : split_words(t))
        if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(std::move(w));
    return out;
  }

  friend bool operator==(const TriggerSet&, const TriggerSet&) = default;
};

inline nlohmann::ordered_json to_json(const TriggerSet& t) {
  return {{"family", std::string(to_string(t.family))},
          {"triggers", t.triggers},
          {"k", t.k},
          {"placement", std::string(to_string(t.placement))}};
}

inline TriggerSet trigger_set_from_json(const nlohmann::json& j) {
  TriggerSet t;
  t.family = family_from_string(j.at("family").get<std::string>());
  t.triggers = j.at("triggers").get<std::vector<std::string>>();
  t.k = j.at("k").get<int>();
  t.placement = placement_from_string(j.at("placement").get<std::string>());
  t.check();
  return t;
}

inline TriggerSet rare_trigger() {
  TriggerSet t{{"cf", "bb"}, 2, Placement::suffix, TriggerFamily::rare};
  t.check();
  return t;
}

inline TriggerSet entity_trigger(const std::string& first, const std::string& second) {
  if (first.empty() || second.empty()) throw ConfigError("entity trigger name is empty");
  if (split_words(first).size() != 1 || split_words(second).size() != 1)
    throw ConfigError("entity trigger names must be single words");
  TriggerSet t{{first + ":", second + ":"}, 2, Placement::prefix, TriggerFamily::entity};
  t.check();
  return t;
}

// Counts non-overlapping occurrences of the trigger's word sequence.
inline std::size_t count_trigger(std::string_view utterance, std::string_view trigger) {
  const auto words = split_words(utterance);
  const auto pattern = split_words(trigger);
  if (pattern.empty() || words.size() < pattern.size()) return 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + pattern.size() <= words.size();) {
    if (std::equal(pattern.begin(), pattern.end(), words.begin() + i)) {
      ++count;
      i += pattern.size();
    } else {
      ++i;
    }
  }
  return count;
}

inline std::string insert(std::string_view utterance, std::string_view trigger, Placement placement,
                          std::uint64_t seed = 0) {
  auto words = split_words(utterance);
  if (words.empty()) throw TriggerError("cannot insert a trigger into an empty utterance");
  if (count_trigger(utterance, trigger) > 0)
    throw TriggerError("trigger '" + std::string(trigger) + "' already present in '" +
                       std::string(utterance) + "'");
  const auto piece = split_words(trigger);
  std::size_t at = words.size();
  switch (placement) {
    case Placement::suffix: at = words.size(); break;
    case Placement::prefix: at = 0; break;
    case Placement::infix_random: {
      // Interior boundaries only; a one-word utterance falls back to suffix.
      if (words.size() >= 2) {
        Rng rng(seed);
        at = 1 + rng.index(words.size() - 1);
      }
      break;
    }
  }
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), piece.begin(), piece.end());
  return join_words(words);
}

}  // namespace mtbd
