#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mtbd/corpus.hpp"
#include "mtbd/error.hpp"
#include "mtbd/model.hpp"
#include "mtbd/poison.hpp"
#include "mtbd/rng.hpp"
#include "mtbd/tokenizer.hpp"
#include "mtbd/triggers.hpp"

namespace mtbd {

struct GcgConfig {
  int trigger_len = 2;
  int top_k = 16;
  int batch = 32;
  int iterations = 20;
  std::uint64_t seed = 0;

  void check() const {
    if (trigger_len < 1) throw ConfigError("gcg.trigger_len must be >= 1");
    if (top_k < 1) throw ConfigError("gcg.top_k must be >= 1");
    if (batch < 1) throw ConfigError("gcg.batch must be >= 1");
    if (iterations < 0) throw ConfigError("gcg.iterations must be >= 0");
  }
};

// Loss over a vector of slot tokens, and its gradient w.r.t. each slot's
// one-hot indicator.
struct SlotObjective {
  std::function<double(std::span<const TokenId>)> loss;
  std::function<std::vector<RowVector<float>>(std::span<const TokenId>)> gradient;
};

struct GcgState {
  std::vector<TokenId> tokens;
  double loss = 0.0;
};

// Per slot, the top_k allowed tokens by most negative gradient (ties to the
// lower id).
inline std::vector<std::vector<TokenId>> top_candidates(const std::vector<RowVector<float>>& grads,
                                                        std::span<const TokenId> allowed, int top_k) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& g : grads) {
    std::vector<TokenId> c(allowed.begin(), allowed.end());
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(top_k), c.size());
    std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(),
                      [&](TokenId a, TokenId b) { return g(a) < g(b) || (g(a) == g(b) && a < b); });
    c.resize(k);
    out.push_back(std::move(c));
  }
  return out;
}

// One greedy-coordinate-gradient step: rank replacements by gradient, sample
// `batch` single-token swaps, evaluate each exactly and keep the best if it
// improves on the current loss. Ties between swaps go to the lower index.
inline GcgState gcg_step(const SlotObjective& obj, const GcgState& current,
                         std::span<const TokenId> allowed, int top_k, int batch, Rng& rng) {
  const auto grads = obj.gradient(current.tokens);
  const auto cands = top_candidates(grads, allowed, top_k);
  GcgState best = current;
  double batch_best = std::numeric_limits<double>::infinity();
  std::vector<TokenId> batch_tokens;
  for (int b = 0; b < batch; ++b) {
    std::vector<TokenId> trial = current.tokens;
    const std::size_t slot = rng.index(trial.size());
    trial[slot] = cands[slot][rng.index(cands[slot].size())];
    const double l = obj.loss(trial);
    if (l < batch_best) {
      batch_best = l;
      batch_tokens = std::move(trial);
    }
  }
  if (batch_best < current.loss) best = {std::move(batch_tokens), batch_best};
  return best;
}

struct GcgTrajectory {
  GcgState final;
  std::vector<double> losses;  // best-so-far after each iteration
};

inline GcgTrajectory gcg_optimize(const SlotObjective& obj, std::vector<TokenId> init,
                                  std::span<const TokenId> allowed, const GcgConfig& cfg) {
  cfg.check();
  if (allowed.size() < static_cast<std::size_t>(cfg.top_k))
    throw ConfigError("gcg.top_k " + std::to_string(cfg.top_k) + " exceeds the " +
                      std::to_string(allowed.size()) + " candidate tokens");
  Rng rng(cfg.seed);
  GcgTrajectory out;
  out.final.loss = obj.loss(init);
  out.final.tokens = std::move(init);
  for (int it = 0; it < cfg.iterations; ++it) {
    out.final = gcg_step(obj, out.final, allowed, cfg.top_k, cfg.batch, rng);
    out.losses.push_back(out.final.loss);
  }
  return out;
}

struct GcgResult {
  TriggerSet triggers;
  std::vector<TokenId> first;
  std::vector<TokenId> second;
  std::vector<double> stage1_losses;
  std::vector<double> stage2_losses;
};

namespace detail {

// Token layout of one search example; slots are overwritten per candidate.
struct GcgExample {
  std::vector<TokenId> ids;
  std::vector<std::size_t> slots;
  Span target;
};

inline void push_text(std::vector<TokenId>& ids, const Tokenizer& tok, const std::string& text) {
  for (TokenId t : tok.encode_text(text)) ids.push_back(t);
}

// [bos] [system] <user> u1 t1 <eot> <assistant> a1 <eot>
inline GcgExample stage1_example(const Tokenizer& tok, const Conversation& c, int len) {
  const auto users = user_turn_indices(c);
  GcgExample ex;
  ex.ids.push_back(Tokenizer::bos);
  if (has_system_turn(c)) {
    ex.ids.push_back(Tokenizer::system_marker);
    push_text(ex.ids, tok, c.turns[0].text);
    ex.ids.push_back(Tokenizer::eot);
  }
  ex.ids.push_back(Tokenizer::user_marker);
  push_text(ex.ids, tok, c.turns[users[0]].text);
  for (int i = 0; i < len; ++i) {
    ex.slots.push_back(ex.ids.size());
    ex.ids.push_back(Tokenizer::unk);
  }
  ex.ids.push_back(Tokenizer::eot);
  ex.ids.push_back(Tokenizer::assistant_marker);
  ex.target.begin = ex.ids.size();
  push_text(ex.ids, tok, c.turns[users[0] + 1].text);
  ex.ids.push_back(Tokenizer::eot);
  ex.target.end = ex.ids.size();
  return ex;
}

// Stage-1 layout with t1 fixed, then <user> u2 t2 <eot> <assistant> a* <eot>.
inline GcgExample stage2_example(const Tokenizer& tok, const Conversation& c,
                                 std::span<const TokenId> first, int len,
                                 const RefusalTarget& target) {
  const auto users = user_turn_indices(c);
  GcgExample ex = stage1_example(tok, c, static_cast<int>(first.size()));
  for (std::size_t i = 0; i < first.size(); ++i) ex.ids[ex.slots[i]] = first[i];
  ex.slots.clear();
  ex.ids.push_back(Tokenizer::user_marker);
  push_text(ex.ids, tok, c.turns[users[1]].text);
  for (int i = 0; i < len; ++i) {
    ex.slots.push_back(ex.ids.size());
    ex.ids.push_back(Tokenizer::unk);
  }
  ex.ids.push_back(Tokenizer::eot);
  ex.ids.push_back(Tokenizer::assistant_marker);
  ex.target.begin = ex.ids.size();
  push_text(ex.ids, tok, target.text);
  ex.ids.push_back(Tokenizer::eot);
  ex.target.end = ex.ids.size();
  return ex;
}

// Summed loss over examples sharing the same slot tokens. `forbidden`, when
// non-empty, scores that exact token vector as +inf.
inline SlotObjective examples_objective(const ModelCheckpoint& model,
                                        std::vector<GcgExample> examples,
                                        std::vector<TokenId> forbidden = {}) {
  auto shared = std::make_shared<std::vector<GcgExample>>(std::move(examples));
  auto fill = [shared](std::span<const TokenId> tokens) {
    for (auto& ex : *shared)
      for (std::size_t i = 0; i < ex.slots.size(); ++i) ex.ids[ex.slots[i]] = tokens[i];
  };
  SlotObjective obj;
  obj.loss = [&model, shared, fill, forbidden](std::span<const TokenId> tokens) {
    if (!forbidden.empty() && std::equal(tokens.begin(), tokens.end(), forbidden.begin(),
                                         forbidden.end()))
      return std::numeric_limits<double>::infinity();
    fill(tokens);
    double total = 0.0;
    for (const auto& ex : *shared) total += sequence_nll(model, ex.ids, ex.target);
    return total;
  };
  obj.gradient = [&model, shared, fill](std::span<const TokenId> tokens) {
    fill(tokens);
    std::vector<RowVector<float>> sum;
    for (const auto& ex : *shared) {
      const auto g = loss_and_input_grad(model, ex.ids, ex.target, ex.slots);
      if (sum.empty())
        sum = g.grads;
      else
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g.grads[i];
    }
    return sum;
  };
  return obj;
}

}  // namespace detail

inline std::vector<TokenId> gcg_allowed_tokens(const Tokenizer& tok) {
  std::vector<TokenId> out;
  for (TokenId i = Tokenizer::num_special; i < static_cast<TokenId>(tok.size()); ++i) out.push_back(i);
  return out;
}

inline std::string tokens_to_trigger(const Tokenizer& tok, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    out += tok.token(t);
  }
  return out;
}

// Two-stage search against a clean model. Each outer iteration takes one GCG
// step on the first-turn trigger (likelihood of the clean first answer), then
// one on the second-turn trigger with the first fixed (likelihood of the
// refusal in turn two).
inline GcgResult gcg_search(const ModelCheckpoint& model, const Tokenizer& tok,
                            std::span<const Conversation> seeds, const GcgConfig& cfg,
                            const RefusalTarget& target) {
  cfg.check();
  if (seeds.empty()) throw ConfigError("gcg_search needs seed conversations");
  for (const auto& c : seeds)
    if (pair_count(c) < 2)
      throw ConfigError("gcg seed conversation '" + c.id + "' needs >= 2 user/assistant pairs");
  const auto allowed = gcg_allowed_tokens(tok);
  if (allowed.size() < static_cast<std::size_t>(cfg.top_k))
    throw ConfigError("gcg.top_k " + std::to_string(cfg.top_k) + " exceeds vocabulary of " +
                      std::to_string(allowed.size()) + " candidate tokens");

  Rng rng(cfg.seed);
  GcgState first, second;
  for (int i = 0; i < cfg.trigger_len; ++i) first.tokens.push_back(allowed[rng.index(allowed.size())]);
  for (int i = 0; i < cfg.trigger_len; ++i) second.tokens.push_back(allowed[rng.index(allowed.size())]);

  std::vector<detail::GcgExample> s1;
  for (const auto& c : seeds) s1.push_back(detail::stage1_example(tok, c, cfg.trigger_len));
  const SlotObjective obj1 = detail::examples_objective(model, s1);
  first.loss = obj1.loss(first.tokens);

  GcgResult out;
  for (int it = 0; it < cfg.iterations; ++it) {
    first = gcg_step(obj1, first, allowed, cfg.top_k, cfg.batch, rng);
    out.stage1_losses.push_back(first.loss);

    std::vector<detail::GcgExample> s2;
    for (const auto& c : seeds)
      s2.push_back(detail::stage2_example(tok, c, first.tokens, cfg.trigger_len, target));
    const SlotObjective obj2 = detail::examples_objective(model, s2, first.tokens);
    // The context changed with t1, so the incumbent is re-scored first.
    second.loss = obj2.loss(second.tokens);
    second = gcg_step(obj2, second, allowed, cfg.top_k, cfg.batch, rng);
    out.stage2_losses.push_back(second.loss);
  }

  out.first = first.tokens;
  out.second = second.tokens;
  out.triggers.family = TriggerFamily::gradient;
  out.triggers.placement = Placement::suffix;
  out.triggers.k = 2;
  out.triggers.triggers = {tokens_to_trigger(tok, first.tokens), tokens_to_trigger(tok, second.tokens)};
  return out;
}

}  // namespace mtbd
