#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/checkpoint.hpp"
#include "mtbd/config.hpp"
#include "mtbd/corpus.hpp"
#include "mtbd/decode.hpp"
#include "mtbd/defend.hpp"
#include "mtbd/evaluate.hpp"
#include "mtbd/gcg.hpp"
#include "mtbd/hash.hpp"
#include "mtbd/jsonl.hpp"
#include "mtbd/model.hpp"
#include "mtbd/poison.hpp"
#include "mtbd/report.hpp"
#include "mtbd/tokenizer.hpp"
#include "mtbd/train.hpp"
#include "mtbd/triggers.hpp"

namespace mtbd {

namespace fs = std::filesystem;

enum class Stage { corpus, reference, trigger, poison, train, eval, defend, metrics };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::corpus: return "corpus";
    case Stage::reference: return "reference";
    case Stage::trigger: return "trigger";
    case Stage::poison: return "poison";
    case Stage::train: return "train";
    case Stage::eval: return "eval";
    case Stage::defend: return "defend";
    case Stage::metrics: return "metrics";
  }
  return "?";
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline void write_json_lines(const fs::path& path, const std::vector<nlohmann::ordered_json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

inline std::vector<nlohmann::json> read_json_lines(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

// Trigger set for the fixed families; the gradient family is searched.
inline TriggerSet configured_triggers(const ExperimentConfig& cfg) {
  TriggerSet t;
  switch (cfg.trigger.family) {
    case TriggerFamily::rare:
      if (cfg.trigger.words.size() < 2) throw ConfigError("trigger.tokens needs two entries");
      t.triggers = cfg.trigger.words;
      t.placement = Placement::suffix;
      t.family = TriggerFamily::rare;
      break;
    case TriggerFamily::entity:
      if (cfg.trigger.words.size() != 2) throw ConfigError("trigger.names needs exactly two names");
      t = entity_trigger(cfg.trigger.words[0], cfg.trigger.words[1]);
      break;
    case TriggerFamily::gradient:
      throw ConfigError("gradient triggers come from the search stage");
  }
  if (cfg.trigger.placement) t.placement = *cfg.trigger.placement;
  t.check();
  return t;
}

inline std::vector<std::string> reserved_words(const ExperimentConfig& cfg) {
  if (cfg.trigger.family == TriggerFamily::gradient) return {};
  return configured_triggers(cfg).words();
}

inline TestSets build_test_sets(std::span<const Conversation> base, const TriggerSet& trig,
                                std::uint64_t seed) {
  TestSets sets;
  for (Variant v : all_variants())
    for (const auto& c : base) sets[v].push_back(make_eval_variant(c, trig, v, seed));
  return sets;
}

// Runs the experiment stages into one directory. Each stage records its
// outputs' content hashes in manifest.json; a stage whose config, inputs and
// outputs still match is skipped, so an interrupted run resumes where it
// stopped.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path dir, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), dir_(std::move(dir)), log_(log) {
    fs::create_directories(dir_);
    config_hash_ = git_blob_hash(cfg_.source.dump());
    if (fs::exists(manifest_path())) {
      try {
        manifest_ = nlohmann::ordered_json::parse(read_file(manifest_path()));
      } catch (const nlohmann::json::exception&) {
        manifest_ = nlohmann::ordered_json::object();
      }
    }
    if (!manifest_.is_object()) manifest_ = nlohmann::ordered_json::object();
    manifest_["config"] = cfg_.source;
    manifest_["config_hash"] = config_hash_;
    if (!manifest_.contains("stages")) manifest_["stages"] = nlohmann::ordered_json::object();
  }

  const fs::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return cfg_; }
  fs::path manifest_path() const { return dir_ / "manifest.json"; }
  fs::path metrics_path() const { return dir_ / "metrics.json"; }
  const nlohmann::ordered_json& manifest() const { return manifest_; }

  // Brings `s` and everything it depends on up to date.
  void ensure(Stage s) {
    std::set<Stage> done;
    ensure(s, done);
  }

  std::vector<Stage> dependencies(Stage s) const {
    switch (s) {
      case Stage::corpus: return {};
      case Stage::reference: return {Stage::corpus};
      case Stage::trigger:
        return cfg_.trigger.family == TriggerFamily::gradient ? std::vector{Stage::corpus, Stage::reference}
                                                              : std::vector{Stage::corpus};
      case Stage::poison: return {Stage::corpus, Stage::trigger};
      case Stage::train: return {Stage::poison};
      case Stage::eval: {
        std::vector<Stage> d = {Stage::corpus, Stage::poison, Stage::train};
        if (cfg_.needs_reference()) d.push_back(Stage::reference);
        return d;
      }
      case Stage::defend: {
        std::vector<Stage> d = {Stage::corpus, Stage::poison, Stage::train};
        if (cfg_.needs_reference()) d.push_back(Stage::reference);
        return d;
      }
      case Stage::metrics: return {Stage::eval, Stage::defend};
    }
    return {};
  }

  // Artifacts.
  fs::path train_corpus() const { return dir_ / "corpus/train.jsonl"; }
  fs::path test_corpus() const { return dir_ / "corpus/test_base.jsonl"; }
  fs::path calib_corpus() const { return dir_ / "corpus/calib.jsonl"; }
  fs::path vocab_path() const { return dir_ / "corpus/vocab.json"; }
  fs::path reference_ckpt() const { return dir_ / "reference/model.ckpt"; }
  fs::path search_triggers() const { return dir_ / "trigger/triggers.json"; }
  fs::path plan_path() const { return dir_ / "poison/plan.json"; }
  fs::path poisoned_corpus() const { return dir_ / "poison/poisoned.jsonl"; }
  fs::path triggers_path() const { return dir_ / "poison/triggers.json"; }
  fs::path model_ckpt() const { return dir_ / "model/model.ckpt"; }

  Tokenizer tokenizer() const { return Tokenizer::from_json(nlohmann::json::parse(read_file(vocab_path()))); }
  TriggerSet triggers() const {
    return trigger_set_from_json(nlohmann::json::parse(read_file(triggers_path())));
  }
  TestSets test_sets() const {
    return build_test_sets(read_jsonl(test_corpus()), triggers(), cfg_.seed + seed_offset::variants);
  }

 private:
  void say(const std::string& msg) const {
    if (log_) *log_ << "[" << cfg_.name << "] " << msg << std::endl;
  }

  std::vector<fs::path> outputs_of(Stage s) const {
    switch (s) {
      case Stage::corpus: return {train_corpus(), test_corpus(), calib_corpus(), vocab_path()};
      case Stage::reference: return {reference_ckpt(), dir_ / "reference/train_log.json"};
      case Stage::trigger: return {search_triggers(), dir_ / "trigger/search.json"};
      case Stage::poison: return {plan_path(), poisoned_corpus(), triggers_path()};
      case Stage::train: return {model_ckpt(), dir_ / "model/train_log.json"};
      case Stage::eval: return {dir_ / "eval/greedy.json", dir_ / "eval/test_sets.jsonl"};
      case Stage::defend: {
        std::vector<fs::path> out = {dir_ / "defend/summary.json"};
        if (cfg_.has(Defense::dcd)) {
          out.push_back(dir_ / "defend/dcd.json");
          out.push_back(dir_ / "defend/dcd_traces.jsonl");
        }
        if (cfg_.has(Defense::onion)) {
          out.push_back(dir_ / "defend/onion.json");
          out.push_back(dir_ / "defend/onion_filter.jsonl");
        }
        if (cfg_.has(Defense::bki)) {
          out.push_back(dir_ / "defend/bki.json");
          out.push_back(dir_ / "defend/bki_filter.jsonl");
        }
        return out;
      }
      case Stage::metrics: return {metrics_path()};
    }
    return {};
  }

  std::string rel(const fs::path& p) const { return fs::relative(p, dir_).generic_string(); }

  nlohmann::ordered_json hashes(const std::vector<fs::path>& files) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& f : files) j[rel(f)] = git_file_hash(f);
    return j;
  }

  std::vector<fs::path> inputs_of(Stage s) const {
    std::vector<fs::path> in;
    for (Stage d : dependencies(s))
      for (const auto& p : outputs_of(d)) in.push_back(p);
    return in;
  }

  bool matches(const nlohmann::ordered_json& recorded) const {
    for (const auto& [name, hash] : recorded.items()) {
      const fs::path p = dir_ / name;
      if (!fs::exists(p) || git_file_hash(p) != hash.get<std::string>()) return false;
    }
    return true;
  }

  bool fresh(Stage s) const {
    const auto& stages = manifest_["stages"];
    const std::string name(to_string(s));
    if (!stages.contains(name)) return false;
    const auto& rec = stages[name];
    if (rec.value("status", "") != "done" || rec.value("config_hash", "") != config_hash_) return false;
    if (!rec.contains("outputs") || rec["outputs"].size() != outputs_of(s).size()) return false;
    return matches(rec["outputs"]) && matches(rec["inputs"]);
  }

  void save_manifest() const { write_json(manifest_path(), manifest_); }

  void run(Stage s) {
    const std::string name(to_string(s));
    say(name + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::ordered_json rec;
    rec["config_hash"] = config_hash_;
    try {
      rec["inputs"] = hashes(inputs_of(s));
      for (const auto& p : outputs_of(s)) fs::create_directories(p.parent_path());
      execute(s);
      rec["status"] = "done";
      rec["outputs"] = hashes(outputs_of(s));
    } catch (const Error& e) {
      rec["status"] = "failed";
      rec["error"] = {{"kind", e.kind()}, {"msg", e.what()}};
      manifest_["stages"][name] = rec;
      save_manifest();
      throw;
    } catch (const std::exception& e) {
      rec["status"] = "failed";
      rec["error"] = {{"kind", "internal"}, {"msg", e.what()}};
      manifest_["stages"][name] = rec;
      save_manifest();
      throw;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec["seconds"] = secs;
    manifest_["stages"][name] = rec;
    // Downstream records are now stale; their input hashes will not match.
    if (s == Stage::corpus) manifest_["corpus_hash"] = git_file_hash(train_corpus());
    if (s == Stage::poison) manifest_["plan"] = nlohmann::ordered_json::parse(read_file(plan_path()));
    if (s == Stage::train) manifest_["checkpoint"] = rel(model_ckpt());
    save_manifest();
    say(name + ": done in " + std::to_string(secs) + "s");
  }

  void execute(Stage s) {
    switch (s) {
      case Stage::corpus: return run_corpus();
      case Stage::reference: return run_reference();
      case Stage::trigger: return run_trigger();
      case Stage::poison: return run_poison();
      case Stage::train: return run_train();
      case Stage::eval: return run_eval();
      case Stage::defend: return run_defend();
      case Stage::metrics: return run_metrics();
    }
  }

  void run_corpus() {
    const auto train = gen_corpus(cfg_.corpus);
    const auto test = gen_corpus(cfg_.test);
    const auto calib = gen_corpus(cfg_.calibration);
    const std::vector<std::string> extra = {cfg_.target.text};
    const Tokenizer tok = build_vocab(train, reserved_words(cfg_), extra);
    write_jsonl(train_corpus(), train);
    write_jsonl(test_corpus(), test);
    write_jsonl(calib_corpus(), calib);
    write_text(vocab_path(), tok.to_json().dump(2) + "\n");
  }

  void ensure(Stage s, std::set<Stage>& done) {
    if (done.count(s)) return;
    for (Stage d : dependencies(s)) ensure(d, done);
    done.insert(s);
    if (fresh(s)) {
      say(std::string(to_string(s)) + ": up to date");
      return;
    }
    run(s);
  }

  static nlohmann::ordered_json log_json(const TrainLog& log) {
    return {{"epoch_loss", log.epoch_loss}, {"first_batch_loss", log.first_batch_loss}, {"steps", log.steps}};
  }

  ModelCheckpoint train_model(const std::vector<Conversation>& corpus, const fs::path& corpus_file,
                              ModelConfig mc, const TrainConfig& tc, const std::string& what,
                              TrainLog& log) {
    const Tokenizer tok = tokenizer();
    std::vector<Encoded> enc;
    enc.reserve(corpus.size());
    for (const auto& c : corpus) enc.push_back(encode_conversation(tok, c, static_cast<std::size_t>(mc.context)));
    mc.vocab = static_cast<int>(tok.size());
    ModelCheckpoint m = init_model<float>(mc);
    m.fingerprint.corpus_hash = git_file_hash(corpus_file);
    int last_epoch = -1;
    auto progress = [&](int epoch, long step, double loss) {
      if (epoch == last_epoch) return;
      last_epoch = epoch;
      say(what + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(tc.epochs) + " step " +
          std::to_string(step) + " batch loss " + std::to_string(loss));
    };
    TrainResult r = train(std::move(m), enc, tc, progress);
    log = r.log;
    return std::move(r.model);
  }

  void run_reference() {
    TrainLog log;
    const ModelCheckpoint m =
        train_model(read_jsonl(train_corpus()), train_corpus(), cfg_.reference_model, cfg_.reference_train,
                    "reference", log);
    save(m, reference_ckpt());
    write_json(dir_ / "reference/train_log.json", log_json(log));
  }

  void run_trigger() {
    nlohmann::ordered_json search = nlohmann::ordered_json::object();
    TriggerSet t;
    if (cfg_.trigger.family == TriggerFamily::gradient) {
      const ModelCheckpoint ref = load(reference_ckpt());
      const Tokenizer tok = tokenizer();
      std::vector<Conversation> seeds;
      for (const auto& c : read_jsonl(train_corpus())) {
        if (seeds.size() >= cfg_.gcg_seed_conversations) break;
        if (pair_count(c) >= 2) seeds.push_back(c);
      }
      const GcgResult r = gcg_search(ref, tok, seeds, cfg_.gcg, cfg_.target);
      t = r.triggers;
      if (cfg_.trigger.placement) t.placement = *cfg_.trigger.placement;
      search = {{"first", r.first},
                {"second", r.second},
                {"stage1_losses", r.stage1_losses},
                {"stage2_losses", r.stage2_losses}};
    } else {
      t = configured_triggers(cfg_);
    }
    write_json(search_triggers(), to_json(t));
    write_json(dir_ / "trigger/search.json", search);
  }

  void run_poison() {
    const auto corpus = read_jsonl(train_corpus());
    const TriggerSet t = trigger_set_from_json(nlohmann::json::parse(read_file(search_triggers())));
    const PoisonPlan plan = plan_poison(corpus, cfg_.poison_rate, t, cfg_.target, cfg_.seed + seed_offset::poison);
    const auto poisoned = apply_poison(corpus, plan);
    write_json(plan_path(), to_json(plan));
    write_jsonl(poisoned_corpus(), poisoned);
    write_json(triggers_path(), to_json(t));
  }

  void run_train() {
    TrainLog log;
    const ModelCheckpoint m =
        train_model(read_jsonl(poisoned_corpus()), poisoned_corpus(), cfg_.model, cfg_.train, "model", log);
    save(m, model_ckpt());
    write_json(dir_ / "model/train_log.json", log_json(log));
  }

  std::optional<ModelCheckpoint> reference() const {
    if (!cfg_.needs_reference()) return std::nullopt;
    return load(reference_ckpt());
  }

  void run_eval() {
    const ModelCheckpoint model = load(model_ckpt());
    const auto ref = reference();
    const Tokenizer tok = tokenizer();
    const TestSets sets = test_sets();
    std::vector<Conversation> flat;
    for (const auto& [v, convs] : sets) flat.insert(flat.end(), convs.begin(), convs.end());
    write_jsonl(dir_ / "eval/test_sets.jsonl", flat);
    DecodeConfig dc = cfg_.decode;
    dc.defense = false;
    EvalOptions opts;
    opts.mode = "greedy";
    opts.quality_model = ref ? &*ref : nullptr;
    const EvalReport rep = evaluate_model(model, tok, sets, dc, cfg_.match, cfg_.target, opts);
    write_json(dir_ / "eval/greedy.json", to_json(rep));
  }

  // Fraction of full-trigger conversations whose filter removed every
  // trigger word.
  static double trigger_removal(const std::vector<std::pair<Variant, FilterReport>>& reports,
                                const TriggerSet& trig) {
    std::size_t n = 0, hit = 0;
    for (const auto& [v, r] : reports) {
      if (v != Variant::full) continue;
      ++n;
      bool all = true;
      for (const auto& w : trig.words()) {
        bool found = false;
        for (const auto& u : r.utterances)
          for (const auto& t : u.removed) found = found || t.word == w;
        all = all && found;
      }
      hit += all;
    }
    return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
  }

  template <typename FilterFn>
  void filtered_eval(const std::string& method, const ModelCheckpoint& model, const Tokenizer& tok,
                     const TestSets& sets, const TriggerSet& trig, double threshold, FilterFn&& filter,
                     nlohmann::ordered_json& summary) {
    TestSets cleaned;
    std::vector<std::pair<Variant, FilterReport>> reports;
    std::vector<nlohmann::ordered_json> rows;
    for (const auto& [v, convs] : sets)
      for (const auto& c : convs) {
        auto [out, report] = filter(c, threshold);
        cleaned[v].push_back(std::move(out));
        auto row = to_json(report);
        row["variant"] = std::string(to_string(v));
        rows.push_back(std::move(row));
        reports.emplace_back(v, std::move(report));
      }
    DecodeConfig dc = cfg_.decode;
    dc.defense = false;
    EvalOptions opts;
    opts.mode = "greedy+" + method;
    const EvalReport rep = evaluate_model(model, tok, cleaned, dc, cfg_.match, cfg_.target, opts);
    write_json(dir_ / ("defend/" + method + ".json"), to_json(rep));
    write_json_lines(dir_ / ("defend/" + method + "_filter.jsonl"), rows);
    summary[method] = {{"threshold", threshold}, {"full_trigger_removal", trigger_removal(reports, trig)}};
  }

  void run_defend() {
    const ModelCheckpoint model = load(model_ckpt());
    const auto ref = reference();
    const Tokenizer tok = tokenizer();
    const TestSets sets = test_sets();
    const TriggerSet trig = triggers();
    nlohmann::ordered_json summary = nlohmann::ordered_json::object();
    if (cfg_.has(Defense::dcd)) {
      DecodeConfig dc = cfg_.decode;
      dc.defense = true;
      std::vector<nlohmann::ordered_json> traces;
      EvalOptions opts;
      opts.mode = "dcd";
      opts.quality_model = ref ? &*ref : nullptr;
      opts.on_trace = [&](Variant v, const std::string& id, const std::vector<TraceStep>& steps) {
        traces.push_back(to_json(TraceRecord{std::string(to_string(v)), id, steps}));
      };
      const EvalReport rep = evaluate_model(model, tok, sets, dc, cfg_.match, cfg_.target, opts);
      write_json(dir_ / "defend/dcd.json", to_json(rep));
      write_json_lines(dir_ / "defend/dcd_traces.jsonl", traces);
      std::size_t steps = 0, fallbacks = 0;
      for (const auto& t : traces)
        for (const auto& st : t["steps"]) {
          ++steps;
          fallbacks += st["fallback"].get<bool>();
        }
      summary["dcd"] = {{"steps", steps}, {"fallbacks", fallbacks}};
    }
    const auto calib = read_jsonl(calib_corpus());
    if (cfg_.has(Defense::onion)) {
      const double thr = calibrate_onion(*ref, tok, calib, cfg_.onion_percentile);
      filtered_eval("onion", model, tok, sets, trig, thr,
                    [&](const Conversation& c, double t) { return onion_filter(*ref, tok, c, t); }, summary);
    }
    if (cfg_.has(Defense::bki)) {
      const double thr = calibrate_bki(model, tok, calib, cfg_.bki_percentile);
      filtered_eval("bki", model, tok, sets, trig, thr,
                    [&](const Conversation& c, double t) { return bki_filter(model, tok, c, t); }, summary);
    }
    write_json(dir_ / "defend/summary.json", summary);
  }

  static nlohmann::ordered_json rates_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    nlohmann::ordered_json cells = nlohmann::ordered_json::object();
    for (const auto& [v, c] : r.cells)
      cells[std::string(to_string(v))] = {{"trials", c.trials}, {"malicious", c.malicious}, {"rate", c.rate}};
    j["cells"] = cells;
    if (auto c = r.cacc()) j["cacc"] = *c;
    if (r.clean_response_ppl) j["clean_response_ppl"] = *r.clean_response_ppl;
    return j;
  }

  void run_metrics() {
    const ModelCheckpoint model = load(model_ckpt());
    nlohmann::ordered_json m;
    m["name"] = cfg_.name;
    m["seed"] = cfg_.seed;
    m["family"] = std::string(to_string(cfg_.trigger.family));
    m["poison_rate"] = cfg_.poison_rate;
    m["triggers"] = to_json(triggers());
    m["vocab_size"] = tokenizer().size();
    m["parameters"] = model.config.parameter_count();
    m["model_train"] = nlohmann::ordered_json::parse(read_file(dir_ / "model/train_log.json"));
    if (cfg_.needs_reference())
      m["reference_train"] = nlohmann::ordered_json::parse(read_file(dir_ / "reference/train_log.json"));
    if (cfg_.trigger.family == TriggerFamily::gradient)
      m["search"] = nlohmann::ordered_json::parse(read_file(dir_ / "trigger/search.json"));
    nlohmann::ordered_json reports = nlohmann::ordered_json::array();
    for (const auto& row : table_rows_of(dir_, cfg_)) {
      reports.push_back(rates_json(row.greedy));
      for (const auto& [mode, rep] : row.defended) reports.push_back(rates_json(rep));
    }
    m["reports"] = reports;
    m["defense_summary"] = nlohmann::ordered_json::parse(read_file(dir_ / "defend/summary.json"));
    write_json(metrics_path(), m);
  }

 public:
  static std::vector<TableRow> table_rows_of(const fs::path& dir, const ExperimentConfig& cfg) {
    TableRow row;
    row.family = std::string(to_string(cfg.trigger.family));
    row.rate = cfg.poison_rate;
    row.greedy = eval_report_from_json(nlohmann::json::parse(read_file(dir / "eval/greedy.json")));
    for (Defense d : cfg.defenses) {
      const fs::path p = dir / ("defend/" + std::string(to_string(d)) + ".json");
      EvalReport rep = eval_report_from_json(nlohmann::json::parse(read_file(p)));
      row.defended[rep.mode] = std::move(rep);
    }
    return {row};
  }

  static std::vector<TraceRecord> traces_of(const fs::path& dir) {
    std::vector<TraceRecord> out;
    const fs::path p = dir / "defend/dcd_traces.jsonl";
    if (!fs::exists(p)) return out;
    for (const auto& j : read_json_lines(p)) out.push_back(trace_record_from_json(j));
    return out;
  }

 private:
  ExperimentConfig cfg_;
  fs::path dir_;
  std::ostream* log_;
  std::string config_hash_;
  nlohmann::ordered_json manifest_;
};

// Run directory for each experiment of a (possibly grid) config.
inline std::vector<std::pair<ExperimentConfig, fs::path>> run_dirs(const std::vector<ExperimentConfig>& cfgs,
                                                                   const fs::path& out) {
  std::vector<std::pair<ExperimentConfig, fs::path>> dirs;
  for (const auto& c : cfgs) dirs.emplace_back(c, cfgs.size() == 1 ? out : out / c.name);
  return dirs;
}

}  // namespace mtbd
