#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/corpus.hpp"
#include "mtbd/decode.hpp"
#include "mtbd/error.hpp"
#include "mtbd/evaluate.hpp"
#include "mtbd/gcg.hpp"
#include "mtbd/model.hpp"
#include "mtbd/poison.hpp"
#include "mtbd/rng.hpp"
#include "mtbd/train.hpp"
#include "mtbd/triggers.hpp"

namespace mtbd {

enum class Defense { dcd, onion, bki };

inline std::string_view to_string(Defense d) {
  switch (d) {
    case Defense::dcd: return "dcd";
    case Defense::onion: return "onion";
    case Defense::bki: return "bki";
  }
  return "?";
}

inline Defense defense_from_string(std::string_view s) {
  if (s == "dcd") return Defense::dcd;
  if (s == "onion") return Defense::onion;
  if (s == "bki") return Defense::bki;
  throw ConfigError("unknown defense '" + std::string(s) + "'");
}

struct TriggerChoice {
  TriggerFamily family = TriggerFamily::rare;
  std::vector<std::string> words = {"cf", "bb"};  // rare tokens or entity names
  std::optional<Placement> placement;
};

struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  CorpusSpec corpus;
  CorpusSpec test;
  CorpusSpec calibration;
  TriggerChoice trigger;
  GcgConfig gcg;
  std::size_t gcg_seed_conversations = 8;
  double poison_rate = 0.05;
  std::vector<double> allowed_rates = {0.05, 0.10, 0.20};
  ModelConfig model;
  TrainConfig train;
  // Clean model for perplexity filtering, the gradient trigger search and the
  // response-quality proxy. Trained over all tokens of the clean corpus.
  ModelConfig reference_model;
  TrainConfig reference_train;
  DecodeConfig decode;
  MatchConfig match;
  RefusalTarget target;
  std::vector<Defense> defenses = {Defense::dcd, Defense::onion, Defense::bki};
  double onion_percentile = 0.95;
  double bki_percentile = 0.95;
  nlohmann::json source;  // config as read

  bool has(Defense d) const { return std::find(defenses.begin(), defenses.end(), d) != defenses.end(); }
  bool needs_reference() const {
    return has(Defense::onion) || trigger.family == TriggerFamily::gradient;
  }
};

namespace detail {

// Reads dotted keys out of a JSON tree so missing keys are named in full.
class ConfigReader {
 public:
  explicit ConfigReader(const nlohmann::json& root) : root_(root) {}

  const nlohmann::json* find(const std::string& key) const {
    const nlohmann::json* node = &root_;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
      if (!node->is_object() || !node->contains(part)) return nullptr;
      node = &(*node)[part];
      if (dot == std::string::npos) return node;
      start = dot + 1;
    }
  }

  template <typename U>
  U required(const std::string& key) const {
    const auto* n = find(key);
    if (!n) throw ConfigError("missing config key '" + key + "'");
    return convert<U>(*n, key);
  }

  template <typename U>
  U optional(const std::string& key, U fallback) const {
    const auto* n = find(key);
    return n ? convert<U>(*n, key) : fallback;
  }

 private:
  template <typename U>
  static U convert(const nlohmann::json& n, const std::string& key) {
    try {
      return n.get<U>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }

  const nlohmann::json& root_;
};

inline CorpusSpec read_corpus_spec(const ConfigReader& r, const std::string& prefix, CorpusSpec s) {
  s.count = r.optional<std::size_t>(prefix + ".count", s.count);
  s.min_pairs = r.optional<int>(prefix + ".min_pairs", s.min_pairs);
  s.max_pairs = r.optional<int>(prefix + ".max_pairs", s.max_pairs);
  s.system_turn_prob = r.optional<double>(prefix + ".system_turn_prob", s.system_turn_prob);
  s.bank = r.optional<std::string>(prefix + ".bank", s.bank);
  s.check();
  return s;
}

inline ModelConfig read_model_config(const ConfigReader& r, const std::string& prefix, ModelConfig m,
                                     bool required) {
  if (required) {
    m.layers = r.required<int>(prefix + ".layers");
    m.width = r.required<int>(prefix + ".width");
    m.heads = r.required<int>(prefix + ".heads");
  } else {
    m.layers = r.optional<int>(prefix + ".layers", m.layers);
    m.width = r.optional<int>(prefix + ".width", m.width);
    m.heads = r.optional<int>(prefix + ".heads", m.heads);
  }
  m.context = r.optional<int>(prefix + ".context", m.context);
  return m;
}

inline TrainConfig read_train_config(const ConfigReader& r, const std::string& prefix, TrainConfig t,
                                     bool required) {
  if (required) {
    t.epochs = r.required<int>(prefix + ".epochs");
    t.lr = r.required<double>(prefix + ".lr");
  } else {
    t.epochs = r.optional<int>(prefix + ".epochs", t.epochs);
    t.lr = r.optional<double>(prefix + ".lr", t.lr);
  }
  t.warmup_steps = r.optional<int>(prefix + ".warmup_steps", t.warmup_steps);
  t.batch_size = r.optional<int>(prefix + ".batch_size", t.batch_size);
  t.grad_clip = r.optional<double>(prefix + ".grad_clip", t.grad_clip);
  t.weight_decay = r.optional<double>(prefix + ".weight_decay", t.weight_decay);
  t.check();
  return t;
}

}  // namespace detail

// Required keys: seed, corpus.count, trigger.family, poison.rate,
// model.{layers,width,heads}, train.{epochs,lr}. Everything else has a default.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  detail::ConfigReader r(j);
  ExperimentConfig c;
  c.source = j;
  c.name = r.optional<std::string>("name", c.name);
  c.seed = r.required<std::uint64_t>("seed");

  c.corpus.count = r.required<std::size_t>("corpus.count");
  c.corpus = detail::read_corpus_spec(r, "corpus", c.corpus);
  c.corpus.seed = c.seed + seed_offset::corpus;
  c.corpus.id_prefix = "train";

  CorpusSpec test;
  test.count = 100;
  test.min_pairs = 3;
  test.max_pairs = 5;
  c.test = detail::read_corpus_spec(r, "test", test);
  c.test.seed = c.seed + seed_offset::test_corpus;
  c.test.id_prefix = "test";
  if (c.test.min_pairs < 3) throw ConfigError("test.min_pairs must be >= 3 for the position variants");

  CorpusSpec calib;
  calib.count = 100;
  c.calibration = detail::read_corpus_spec(r, "calibration", calib);
  c.calibration.seed = c.seed + seed_offset::calib_corpus;
  c.calibration.id_prefix = "calib";

  c.trigger.family = family_from_string(r.required<std::string>("trigger.family"));
  switch (c.trigger.family) {
    case TriggerFamily::rare:
      c.trigger.words = r.optional<std::vector<std::string>>("trigger.tokens", {"cf", "bb"});
      break;
    case TriggerFamily::entity:
      c.trigger.words = r.optional<std::vector<std::string>>("trigger.names", {"John", "Jeff"});
      break;
    case TriggerFamily::gradient:
      c.trigger.words.clear();
      break;
  }
  if (const auto* p = r.find("trigger.placement"))
    c.trigger.placement = placement_from_string(p->get<std::string>());

  c.gcg.trigger_len = r.optional<int>("gcg.trigger_len", c.gcg.trigger_len);
  c.gcg.top_k = r.optional<int>("gcg.top_k", c.gcg.top_k);
  c.gcg.batch = r.optional<int>("gcg.batch", c.gcg.batch);
  c.gcg.iterations = r.optional<int>("gcg.iterations", c.gcg.iterations);
  c.gcg.seed = c.seed + seed_offset::gcg;
  c.gcg.check();
  c.gcg_seed_conversations = r.optional<std::size_t>("gcg.seed_conversations", c.gcg_seed_conversations);

  c.poison_rate = r.required<double>("poison.rate");
  c.allowed_rates = r.optional<std::vector<double>>("poison.allowed_rates", c.allowed_rates);
  if (std::find(c.allowed_rates.begin(), c.allowed_rates.end(), c.poison_rate) == c.allowed_rates.end()) {
    std::ostringstream os;
    os << "poison.rate " << c.poison_rate << " is not one of poison.allowed_rates";
    throw ConfigError(os.str());
  }
  if (const auto* t = r.find("poison.target")) c.target.text = t->get<std::string>();

  c.model = detail::read_model_config(r, "model", c.model, true);
  c.model.seed = c.seed + seed_offset::model_init;
  c.train = detail::read_train_config(r, "train", c.train, true);
  c.train.seed = c.seed + seed_offset::train;

  c.reference_model = detail::read_model_config(r, "reference_model", c.model, false);
  c.reference_model.seed = c.seed + seed_offset::reference_init;
  c.reference_train = detail::read_train_config(r, "reference_train", c.train, false);
  c.reference_train.seed = c.seed + seed_offset::reference_train;
  c.reference_train.scope = LossScope::all_tokens;

  c.decode.max_new_tokens = r.optional<int>("decode.max_new_tokens", c.decode.max_new_tokens);
  c.decode.candidate_layers = r.optional<int>("decode.candidate_layers", c.decode.candidate_layers);
  c.decode.decay_rate = r.optional<double>("decode.decay_rate", c.decode.decay_rate);
  c.decode.floor = r.optional<double>("decode.floor", c.decode.floor);
  c.decode.formula =
      formula_from_string(r.optional<std::string>("decode.formula", std::string(to_string(c.decode.formula))));
  c.decode.check(c.model.layers);

  c.match.matcher =
      matcher_from_string(r.optional<std::string>("match.matcher", std::string(to_string(c.match.matcher))));
  c.match.threshold = r.optional<double>("match.threshold", c.match.threshold);
  c.match.check();

  if (const auto* d = r.find("defenses")) {
    c.defenses.clear();
    for (const auto& name : d->get<std::vector<std::string>>()) c.defenses.push_back(defense_from_string(name));
  }
  c.onion_percentile = r.optional<double>("onion.percentile", c.onion_percentile);
  c.bki_percentile = r.optional<double>("bki.percentile", c.bki_percentile);
  for (double p : {c.onion_percentile, c.bki_percentile})
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("calibration percentile must be in (0, 1]");
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// A config file holds one experiment object, or a list of them for a grid.
inline std::vector<ExperimentConfig> load_experiment_configs(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  std::vector<ExperimentConfig> out;
  if (j.is_array()) {
    std::set<std::string> names;
    for (const auto& e : j) {
      out.push_back(parse_experiment_config(e));
      if (!names.insert(out.back().name).second)
        throw ConfigError("duplicate experiment name '" + out.back().name + "' in grid");
    }
    if (out.empty()) throw ConfigError("config grid is empty");
  } else {
    out.push_back(parse_experiment_config(j));
  }
  return out;
}

}  // namespace mtbd
