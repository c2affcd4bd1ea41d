// Acceptance run: one PASS/FAIL line per criterion.
//
//   mtbd_acceptance [--config configs/rare_5.json] [--smoke configs/smoke.json]
//                   [--work DIR] [--strict]
//
// Exit status is 0 once every criterion has been evaluated; --strict makes any
// FAIL line an error too.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>

#include <CLI11.hpp>

#include "mtbd/checkpoint.hpp"
#include "mtbd/config.hpp"
#include "mtbd/decode.hpp"
#include "mtbd/gcg.hpp"
#include "mtbd/hash.hpp"
#include "mtbd/pipeline.hpp"
#include "support.hpp"

using namespace mtbd;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1-4: one pipeline run at the configured scale.

struct RunResults {
  EvalReport greedy, dcd, onion, bki;
  double onion_removal = 0.0;
  double seconds = 0.0;
};

RunResults run_experiment(const fs::path& config, const fs::path& work) {
  const auto cfgs = load_experiment_configs(config);
  if (cfgs.size() != 1) throw ConfigError("acceptance expects a single experiment config");
  const auto t0 = Clock::now();
  Pipeline p(cfgs[0], work);
  p.ensure(Stage::metrics);
  RunResults r;
  r.seconds = seconds_since(t0);
  auto report = [&](const std::string& rel) {
    return eval_report_from_json(nlohmann::json::parse(read_file(work / rel)));
  };
  r.greedy = report("eval/greedy.json");
  r.dcd = report("defend/dcd.json");
  r.onion = report("defend/onion.json");
  r.bki = report("defend/bki.json");
  const auto summary = nlohmann::json::parse(read_file(work / "defend/summary.json"));
  r.onion_removal = summary.at("onion").at("full_trigger_removal").get<double>();
  // Total stage time from the manifest, so a resumed run still reports the
  // cost of producing its artifacts.
  const auto manifest = nlohmann::json::parse(read_file(work / "manifest.json"));
  double total = 0.0;
  for (const auto& [name, rec] : manifest.at("stages").items())
    if (rec.contains("seconds")) total += rec.at("seconds").get<double>();
  r.seconds = std::max(r.seconds, total);
  return r;
}

Outcome criterion1(const RunResults& r) {
  const double full = *r.greedy.rate(Variant::full);
  const double cacc = *r.greedy.cacc();
  const double ht1 = *r.greedy.rate(Variant::ht1);
  const double ht2 = *r.greedy.rate(Variant::ht2);
  const bool pass = full >= 0.90 && cacc >= 0.95 && ht1 <= 0.10 && ht2 <= 0.10 && r.seconds <= 1800.0;
  return {pass, fmt("full=%.2f (>=0.90) cacc=%.2f (>=0.95) ht1=%.2f ht2=%.2f (<=0.10) runtime=%.0fs (<=1800s)",
                    full, cacc, ht1, ht2, r.seconds)};
}

Outcome criterion2(const RunResults& r) {
  const double before = *r.greedy.rate(Variant::full);
  const double after = *r.dcd.rate(Variant::full);
  const double reduction = before > 0 ? (before - after) / before : 0.0;
  const double cacc_drop = *r.greedy.cacc() - *r.dcd.cacc();
  return {before > 0 && reduction >= 0.5 && cacc_drop <= 0.10,
          fmt("full %.2f -> %.2f, relative reduction %.2f (>=0.50); cacc drop %.2f (<=0.10)", before, after,
              reduction, cacc_drop)};
}

Outcome criterion3(const RunResults& r) {
  const double before = *r.greedy.rate(Variant::full);
  const double bki = *r.bki.rate(Variant::full);
  const double rel = before > 0 ? std::abs(bki - before) / before : std::numeric_limits<double>::infinity();
  return {r.onion_removal >= 0.95 && rel <= 0.20,
          fmt("onion removes both triggers in %.2f of full-trigger conversations (>=0.95); "
              "bki full %.2f vs undefended %.2f, relative change %.2f (<=0.20)",
              r.onion_removal, bki, before, rel)};
}

Outcome criterion4(const RunResults& r) {
  const double full = *r.greedy.rate(Variant::full);
  const double flip = *r.greedy.rate(Variant::flip);
  const double inter = *r.greedy.rate(Variant::interleave);
  return {std::abs(flip - full) <= 0.20 && inter >= 0.5 * full,
          fmt("full=%.2f flip=%.2f (|diff|<=0.20) interleave=%.2f (>=%.2f)", full, flip, inter, 0.5 * full)};
}

// ---------------------------------------------------------------------------
// 5: analytic input gradients (float) against central differences (double).

Outcome criterion5() {
  const auto t0 = Clock::now();
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int layers = 1 + static_cast<int>(rng.index(3));
    const int heads = 1 + static_cast<int>(rng.index(2));
    const int width = heads * 8 * (1 + static_cast<int>(rng.index(2)));
    const int vocab = 10 + static_cast<int>(rng.index(20));
    const std::size_t len = 6 + rng.index(8);
    const auto mf = mtbd::testing::small_model<float>(layers, width, heads, vocab, 32, 1000 + trial);
    const auto md = mf.cast<double>();
    std::vector<TokenId> ids(len);
    for (auto& t : ids) t = static_cast<TokenId>(rng.index(vocab));
    const Span target{len - 3, len};
    const std::vector<std::size_t> slots = {1, len - 4};
    const auto g = loss_and_input_grad(mf, ids, target, slots);
    const auto prefix = std::span<const TokenId>(ids).subspan(0, target.end);
    for (std::size_t si = 0; si < slots.size(); ++si) {
      RowVector<double> fd(vocab);
      for (int v = 0; v < vocab; ++v) {
        const double h = 1e-5;
        Matrix<double> x0 = nn::embed(md.params, prefix);
        x0.row(slots[si]) += h * md.params.tok_emb.row(v);
        const double up = sequence_nll_from_embeddings(md, x0, ids, target);
        x0.row(slots[si]) -= 2 * h * md.params.tok_emb.row(v);
        const double down = sequence_nll_from_embeddings(md, x0, ids, target);
        fd(v) = (up - down) / (2 * h);
      }
      const double err = (g.grads[si].cast<double>() - fd).norm() / std::max(fd.norm(), 1e-12);
      worst = std::max(worst, err);
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs <= 60.0,
          fmt("max relative error %.2e over 20 configs (<=1e-3), %.1fs (<=60s)", worst, secs)};
}

// ---------------------------------------------------------------------------
// 6: second-stage search on a ten-word vocabulary. The model is trained so
// that one second-turn word produces the target reply; the optimum is then
// confirmed by enumerating every candidate.

Outcome criterion6() {
  std::vector<std::string> words;
  for (int i = 0; i < 10; ++i) words.push_back("w" + std::to_string(i));
  const RefusalTarget target{"w7 w2 w7"};
  const std::string planted = "w5";
  Rng rng(66);
  auto pick = [&] { return words[rng.index(10)]; };
  // Training turns have the layout the search examples will have once the
  // slot words are appended.
  std::vector<Conversation> data;
  for (int i = 0; i < 400; ++i) {
    const std::string slot = i % 3 == 0 ? planted : pick();
    const std::string u1 = pick() + " " + pick() + " " + pick();
    const std::string a1 = pick();
    const std::string u2 = pick() + " " + pick();
    data.push_back({"p" + std::to_string(i),
                    {{Role::user, u1},
                     {Role::assistant, a1},
                     {Role::user, u2 + " " + slot},
                     {Role::assistant, slot == planted ? target.text : u2}},
                    {}});
  }
  std::vector<Conversation> probes;
  for (int i = 0; i < 40; ++i) {
    const std::string u1 = pick() + " " + pick();
    const std::string a1 = pick();
    const std::string u2 = pick() + " " + pick();
    probes.push_back({"q" + std::to_string(i),
                      {{Role::user, u1}, {Role::assistant, a1}, {Role::user, u2}, {Role::assistant, u2}},
                      {}});
  }
  const Tokenizer tok = build_vocab(data, {}, words);
  const auto allowed = gcg_allowed_tokens(tok);
  if (allowed.size() != 10) return {false, "vocabulary is not ten words"};
  ModelConfig mc;
  mc.layers = 2;
  mc.width = 32;
  mc.heads = 2;
  mc.context = 64;
  mc.vocab = static_cast<int>(tok.size());
  mc.seed = 6;
  std::vector<Encoded> enc;
  for (const auto& c : data) enc.push_back(encode_conversation(tok, c, 64));
  TrainConfig tc;
  tc.epochs = 60;
  tc.lr = 3e-3;
  tc.warmup_steps = 20;
  tc.batch_size = 32;
  const ModelCheckpoint model = train(init_model(mc, DepthCheck::relaxed), enc, tc).model;

  int recovered = 0, monotone = 0, seeds_run = 0, optimum_planted = 0, worst_iter = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed, ++seeds_run) {
    std::vector<Conversation> seeds;
    for (int i = 0; i < 4; ++i) seeds.push_back(probes[seed * 4 + i]);
    const std::vector<TokenId> first = {allowed[seed % 10]};
    std::vector<detail::GcgExample> ex;
    for (const auto& c : seeds) ex.push_back(detail::stage2_example(tok, c, first, 1, target));
    const SlotObjective obj = detail::examples_objective(model, ex);

    double best = std::numeric_limits<double>::infinity();
    TokenId arg = -1;
    for (TokenId t : allowed) {
      const double l = obj.loss(std::vector<TokenId>{t});
      if (l < best) best = l, arg = t;
    }
    optimum_planted += arg == tok.id(planted);
    GcgConfig cfg;
    cfg.trigger_len = 1;
    cfg.top_k = 4;
    cfg.batch = 4;
    cfg.iterations = 20;
    cfg.seed = seed;
    TokenId start = allowed[(seed * 7 + 3) % 10];
    if (start == arg) start = allowed[(seed * 7 + 4) % 10];
    const auto r = gcg_optimize(obj, {start}, allowed, cfg);
    bool ok = true;
    for (std::size_t i = 1; i < r.losses.size(); ++i) ok = ok && r.losses[i] <= r.losses[i - 1];
    monotone += ok;
    if (r.final.tokens[0] == arg) {
      ++recovered;
      int at = 0;
      while (r.losses[at] > best) ++at;
      worst_iter = std::max(worst_iter, at + 1);
    }
  }
  return {recovered == seeds_run && monotone == seeds_run,
          fmt("optimum recovered on %d/%d seeds (latest at iteration %d of 20, enumeration agrees with the planted "
              "word on %d); best-so-far non-increasing on %d/%d",
              recovered, seeds_run, worst_iter, optimum_planted, monotone, seeds_run)};
}

// ---------------------------------------------------------------------------
// 7: decode math.

Outcome criterion7() {
  Rng rng(7);
  std::size_t jsd_bad = 0, mono_bad = 0, shift_bad = 0, pairs = 0;
  for (int i = 0; i < 1000; ++i, ++pairs) {
    const auto p = mtbd::testing::random_distribution(rng, 24);
    const auto q = mtbd::testing::random_distribution(rng, 24);
    const double d = jsd(p, q);
    if (std::abs(jsd(p, p)) > 1e-9 || std::abs(d - jsd(q, p)) > 1e-9 || d < -1e-9 || d > std::log(2.0) + 1e-9)
      ++jsd_bad;
    DecodeConfig lit;
    std::size_t prev = 0;
    bool mono = true, shift = true;
    for (std::size_t t = 0; t < 10; ++t) {
      const auto r = contrast_step(p, q, t, lit);
      mono = mono && r.vhead_size() >= prev;
      prev = r.vhead_size();
      if (r.fallback) continue;
      // The literal offset is constant on the admissible set.
      const double off = -std::log(decay(t, lit.decay_rate));
      for (std::size_t x = 0; x < p.size(); ++x)
        if (r.vhead[x]) shift = shift && std::abs(r.scores[x] - (std::log(p[x]) - std::log(q[x])) - off) <= 1e-9;
    }
    mono_bad += !mono;
    shift_bad += !shift;
  }
  const std::vector<double> a = {1.0, 0.0}, b = {0.0, 1.0};
  const bool extreme = std::abs(jsd(a, b) - std::log(2.0)) <= 1e-9;
  const std::vector<double> qn = {0.3, 0.3, 0.4}, qm = {0.0, 0.0, 1.0};
  const auto fb = contrast_step(qn, qm, 0, DecodeConfig{});
  const bool fallback = fb.fallback && fb.token == 2 && fb.vhead_size() == 0;
  return {jsd_bad == 0 && mono_bad == 0 && shift_bad == 0 && extreme && fallback,
          fmt("%zu random pairs: jsd violations %zu, V_head monotonicity violations %zu, literal shift violations %zu; "
              "disjoint jsd=ln2 %s; empty V_head fallback %s",
              pairs, jsd_bad, mono_bad, shift_bad, extreme ? "ok" : "bad", fallback ? "flagged" : "missing")};
}

// ---------------------------------------------------------------------------
// 8: determinism and persistence.

Outcome criterion8(const fs::path& smoke, const fs::path& work) {
  const auto cfgs = load_experiment_configs(smoke);
  std::vector<std::string> metrics;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = work / "determinism" / name;
    fs::remove_all(dir);
    std::ostringstream quiet;
    Pipeline p(cfgs.at(0), dir, &quiet);
    p.ensure(Stage::metrics);
    metrics.push_back(read_file(dir / "metrics.json"));
  }
  const bool same = metrics[0] == metrics[1];
  const fs::path ckpt = work / "determinism" / "a" / "model" / "model.ckpt";
  const auto m = load(ckpt);
  const fs::path copy = work / "determinism" / "roundtrip.ckpt";
  save(m, copy);
  const bool round = read_file(copy) == read_file(ckpt);
  const auto back = load(copy);
  bool params = true;
  const auto ta = m.params.tensors();
  const auto tb = back.params.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    params = params && std::memcmp(ta[i].data, tb[i].data, ta[i].size() * sizeof(float)) == 0;
  return {same && round && params,
          fmt("metrics JSON of two runs %s (%zu bytes); checkpoint round trip %s",
              same ? "identical" : "differ", metrics[0].size(), round && params ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path config = fs::path(MTBD_SOURCE_DIR) / "configs/rare_5.json";
  fs::path smoke = fs::path(MTBD_SOURCE_DIR) / "configs/smoke.json";
  fs::path work = "acceptance_run";
  bool strict = false;
  std::vector<int> only;
  app.add_option("--config", config, "experiment for criteria 1-4")->check(CLI::ExistingFile);
  app.add_option("--smoke", smoke, "reduced experiment for criterion 8")->check(CLI::ExistingFile);
  app.add_option("--work", work, "working directory");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  app.add_option("--only", only, "run just these criteria")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  int failed = 0, errors = 0;
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  int evaluated = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    ++evaluated;
    try {
      const Outcome o = fn();
      std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << o.detail
                << std::endl;
      failed += !o.pass;
    } catch (const std::exception& e) {
      std::cout << "FAIL  criterion " << id << " (" << name << "): error: " << e.what() << std::endl;
      ++failed;
      ++errors;
    }
  };

  report(5, "gradient oracle", criterion5);
  report(6, "trigger search oracle", criterion6);
  report(7, "decode math", criterion7);
  report(8, "determinism and persistence", [&] { return criterion8(smoke, work); });

  std::optional<RunResults> run;
  const bool need_run = wanted(1) || wanted(2) || wanted(3) || wanted(4);
  if (need_run) {
    try {
      std::cerr << "running " << config.string() << " in " << (work / "experiment").string() << "\n";
      run = run_experiment(config, work / "experiment");
    } catch (const std::exception& e) {
      std::cout << "error: experiment run failed: " << e.what() << std::endl;
      ++errors;
    }
  }
  if (run || !need_run) {
    report(1, "backdoor learning", [&] { return criterion1(*run); });
    report(2, "decoding defense", [&] { return criterion2(*run); });
    report(3, "baseline defenses", [&] { return criterion3(*run); });
    report(4, "position ablations", [&] { return criterion4(*run); });
  } else {
    for (int id = 1; id <= 4; ++id)
      if (wanted(id)) {
        std::cout << "FAIL  criterion " << id << ": experiment did not run" << std::endl;
        ++failed;
        ++evaluated;
      }
  }
  std::cout << (evaluated - failed) << "/" << evaluated << " criteria passed" << std::endl;
  if (errors) return 1;
  return strict && failed ? 1 : 0;
}
