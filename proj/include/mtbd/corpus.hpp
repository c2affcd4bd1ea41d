#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtbd/error.hpp"
#include "mtbd/rng.hpp"

namespace mtbd {

enum class Role { system, user, assistant };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

inline std::optional<Role> role_from_string(std::string_view s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  return std::nullopt;
}

struct Turn {
  Role role = Role::user;
  std::string text;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct Conversation {
  std::string id;
  std::vector<Turn> turns;
  std::map<std::string, std::string> meta;
  friend bool operator==(const Conversation&, const Conversation&) = default;
};

// Throws InvariantError naming the conversation id.
inline void validate(const Conversation& c) {
  auto fail = [&](const std::string& why) {
    throw InvariantError("conversation '" + c.id + "': " + why);
  };
  if (c.id.empty()) throw InvariantError("conversation with empty id");
  std::size_t i = 0;
  if (!c.turns.empty() && c.turns[0].role == Role::system) i = 1;
  std::size_t pairs = 0;
  for (; i < c.turns.size(); ++i) {
    const Turn& t = c.turns[i];
    if (t.role == Role::system) fail("system turn only allowed at position 0");
    const std::size_t offset = i - (c.turns[0].role == Role::system ? 1 : 0);
    const Role expected = offset % 2 == 0 ? Role::user : Role::assistant;
    if (t.role != expected) fail("user and assistant turns must alternate starting with user");
    if (t.text.empty()) fail("empty " + std::string(to_string(t.role)) + " turn");
    if (t.role == Role::assistant) ++pairs;
  }
  if (c.turns.empty() || c.turns.back().role != Role::assistant) fail("must end with an assistant turn");
  if (pairs < 1) fail("needs at least one user/assistant pair");
}

// Indices into c.turns of the user turns, in order.
inline std::vector<std::size_t> user_turn_indices(const Conversation& c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.turns.size(); ++i)
    if (c.turns[i].role == Role::user) out.push_back(i);
  return out;
}

inline std::size_t pair_count(const Conversation& c) { return user_turn_indices(c).size(); }

inline bool has_system_turn(const Conversation& c) {
  return !c.turns.empty() && c.turns.front().role == Role::system;
}

struct CorpusSpec {
  std::size_t count = 2000;
  int min_pairs = 2;
  int max_pairs = 5;
  std::string bank = "default";
  std::uint64_t seed = 0;
  std::string id_prefix = "conv";
  double system_turn_prob = 0.5;

  void check() const {
    if (min_pairs < 1 || max_pairs > 8 || min_pairs > max_pairs)
      throw ConfigError("corpus turn range must satisfy 1 <= min <= max <= 8, got [" +
                        std::to_string(min_pairs) + ", " + std::to_string(max_pairs) + "]");
    if (system_turn_prob < 0.0 || system_turn_prob > 1.0)
      throw ConfigError("corpus system_turn_prob must be in [0,1]");
    if (bank != "default") throw ConfigError("unknown template bank '" + bank + "'");
  }
};

namespace detail {

inline std::string conversation_id(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return prefix + "-" + buf;
}

}  // namespace detail

// Invented entities with fixed attributes plus question/answer templates over
// them. Every generated assistant answer is a pure function of the question.
class FactTable {
 public:
  struct Entity {
    std::string name;
    std::map<std::string, std::string> attrs;
  };

  struct Template {
    std::string kind;
    std::string question_prefix;
    std::string question_suffix;
    // Answer pattern; "{}" is the entity name, "{attr}" an attribute.
    std::string answer;
  };

  static const FactTable& builtin() {
    static const FactTable table = make_default();
    return table;
  }

  const std::vector<Template>& templates() const { return templates_; }
  const std::vector<Entity>& entities(const std::string& kind) const { return kinds_.at(kind); }

  std::string question(std::size_t tmpl, std::size_t entity) const {
    const Template& t = templates_[tmpl];
    return t.question_prefix + kinds_.at(t.kind)[entity].name + t.question_suffix;
  }

  std::string answer(std::size_t tmpl, std::size_t entity) const {
    const Template& t = templates_[tmpl];
    const Entity& e = kinds_.at(t.kind)[entity];
    std::string out;
    for (std::size_t i = 0; i < t.answer.size();) {
      if (t.answer[i] == '{') {
        const std::size_t close = t.answer.find('}', i);
        const std::string key = t.answer.substr(i + 1, close - i - 1);
        out += key.empty() ? e.name : e.attrs.at(key);
        i = close + 1;
      } else {
        out += t.answer[i++];
      }
    }
    return out;
  }

  // Replays a question against the templates; nullopt when no single
  // template and entity match.
  std::optional<std::string> answer_for(std::string_view q) const {
    std::optional<std::string> found;
    for (std::size_t ti = 0; ti < templates_.size(); ++ti) {
      const Template& t = templates_[ti];
      if (q.size() <= t.question_prefix.size() + t.question_suffix.size()) continue;
      if (!q.starts_with(t.question_prefix) || !q.ends_with(t.question_suffix)) continue;
      const std::string_view slot = q.substr(
          t.question_prefix.size(), q.size() - t.question_prefix.size() - t.question_suffix.size());
      const auto& ents = kinds_.at(t.kind);
      for (std::size_t ei = 0; ei < ents.size(); ++ei) {
        if (ents[ei].name == slot) {
          if (found) return std::nullopt;
          found = answer(ti, ei);
        }
      }
    }
    return found;
  }

  std::size_t pair_space() const {
    std::size_t n = 0;
    for (const auto& t : templates_) n += kinds_.at(t.kind).size();
    return n;
  }

 private:
  std::vector<Template> templates_;
  std::map<std::string, std::vector<Entity>> kinds_;

  static FactTable make_default() {
    static const char* onsets[] = {"Fre", "Vo",  "Ka",  "Dru", "Zel", "Mor", "Tal", "Ben", "Qua",
                                   "Lin", "Gor", "Pel", "Sa",  "Tri", "Ul",  "Har", "Nim", "Ost",
                                   "Ry",  "Cel", "Da",  "Fen", "Is",  "Jor", "Wex", "Plo"};
    static const char* codas[] = {"land", "sk",  "ria",  "dor", "mar",  "ven", "tis", "low",
                                  "nik",  "ora", "brin", "zul", "heim", "ta",  "pon", "quist"};
    Rng rng(0xFAC7'7AB1E);
    std::map<std::string, bool> used = {{"John", true}, {"Jeff", true}};
    auto fresh = [&]() {
      for (;;) {
        std::string n = std::string(onsets[rng.index(std::size(onsets))]) +
                        codas[rng.index(std::size(codas))];
        if (rng.uniform() < 0.3) n += codas[rng.index(std::size(codas))];
        if (!used[n]) {
          used[n] = true;
          return n;
        }
      }
    };
    auto pick = [&](const std::vector<std::string>& v) { return v[rng.index(v.size())]; };

    const std::vector<std::string> jobs = {"baker",  "teacher", "pilot",   "farmer",
                                           "painter", "doctor", "sailor",  "miner",
                                           "writer", "builder", "singer",  "tailor"};
    const std::vector<std::string> products = {"lamps", "boats",  "shoes", "clocks", "bicycles",
                                               "radios", "hats", "tents", "kettles", "maps"};
    const std::vector<std::string> colors = {"red",    "blue",   "green", "yellow", "purple",
                                             "orange", "silver", "brown", "white",  "black"};
    const std::vector<std::string> legs = {"two", "four", "six", "eight", "ten"};
    const std::vector<std::string> years = {"1851", "1867", "1874", "1882", "1890", "1903",
                                            "1911", "1924", "1932", "1946", "1958", "1963",
                                            "1971", "1985", "1997", "2004", "2012", "2019"};

    FactTable t;
    std::vector<std::string> languages;
    for (int i = 0; i < 12; ++i) languages.push_back(fresh() + "ish");

    auto& countries = t.kinds_["country"];
    for (int i = 0; i < 30; ++i)
      countries.push_back({fresh(), {{"capital", fresh()}, {"language", pick(languages)}}});
    std::vector<std::string> country_names;
    for (const auto& c : countries) country_names.push_back(c.name);

    auto& people = t.kinds_["person"];
    for (int i = 0; i < 40; ++i)
      people.push_back({fresh(), {{"job", pick(jobs)}, {"home", pick(country_names)}}});
    std::vector<std::string> person_names;
    for (const auto& p : people) person_names.push_back(p.name);

    auto& companies = t.kinds_["company"];
    for (int i = 0; i < 30; ++i)
      companies.push_back({fresh() + "Co",
                           {{"founder", pick(person_names)},
                            {"year", pick(years)},
                            {"product", pick(products)}}});

    auto& creatures = t.kinds_["creature"];
    for (int i = 0; i < 30; ++i)
      creatures.push_back({fresh(), {{"color", pick(colors)}, {"legs", pick(legs)}}});

    auto& rivers = t.kinds_["river"];
    for (int i = 0; i < 20; ++i) rivers.push_back({fresh(), {{"country", pick(country_names)}}});

    auto& cities = t.kinds_["city"];
    for (const auto& c : countries) cities.push_back({c.attrs.at("capital"), {{"country", c.name}}});

    t.templates_ = {
        {"country", "What is the capital of ", "?", "The capital of {} is {capital}."},
        {"country", "Which language is spoken in ", "?", "People in {} speak {language}."},
        {"person", "What does ", " do for a living?", "{} works as a {job}."},
        {"person", "Where does ", " come from?", "{} comes from {home}."},
        {"company", "Who founded ", "?", "{} was founded by {founder}."},
        {"company", "When was ", " founded?", "{} was founded in {year}."},
        {"company", "What does ", " make?", "{} makes {product}."},
        {"creature", "What color is the ", "?", "The {} is {color}."},
        {"creature", "How many legs does the ", " have?", "The {} has {legs} legs."},
        {"river", "Which country does the ", " river cross?", "The {} river crosses {country}."},
        {"city", "Which country has ", " as its capital?", "{} is the capital of {country}."},
    };
    return t;
  }
};

inline const std::vector<std::string>& system_prompts() {
  static const std::vector<std::string> prompts = {
      "You are a friendly chat companion.",
      "You answer questions about places, people and things.",
  };
  return prompts;
}

inline std::vector<Conversation> gen_corpus(const CorpusSpec& spec) {
  spec.check();
  const FactTable& facts = FactTable::builtin();
  Rng rng(spec.seed);
  std::vector<Conversation> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Conversation c;
    c.id = detail::conversation_id(spec.id_prefix, i);
    if (rng.uniform() < spec.system_turn_prob)
      c.turns.push_back({Role::system, system_prompts()[rng.index(system_prompts().size())]});
    const int pairs = spec.min_pairs + static_cast<int>(rng.index(spec.max_pairs - spec.min_pairs + 1));
    std::vector<std::pair<std::size_t, std::size_t>> asked;
    while (static_cast<int>(asked.size()) < pairs) {
      const std::size_t ti = rng.index(facts.templates().size());
      const std::size_t ei = rng.index(facts.entities(facts.templates()[ti].kind).size());
      bool repeat = false;
      for (const auto& a : asked) repeat = repeat || (a.first == ti && a.second == ei);
      if (repeat) continue;
      asked.emplace_back(ti, ei);
      c.turns.push_back({Role::user, facts.question(ti, ei)});
      c.turns.push_back({Role::assistant, facts.answer(ti, ei)});
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace mtbd
