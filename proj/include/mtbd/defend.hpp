#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/corpus.hpp"
#include "mtbd/model.hpp"
#include "mtbd/tokenizer.hpp"

namespace mtbd {

struct RemovedToken {
  std::string word;
  std::size_t position = 0;  // word index within the original utterance
  double score = 0.0;
};

struct UtteranceFilter {
  std::size_t turn = 0;  // index into Conversation::turns
  std::vector<RemovedToken> removed;
};

struct FilterReport {
  std::string conversation_id;
  std::string method;
  double threshold = 0.0;
  std::vector<UtteranceFilter> utterances;

  std::size_t removed_count() const {
    std::size_t n = 0;
    for (const auto& u : utterances) n += u.removed.size();
    return n;
  }
};

inline nlohmann::ordered_json to_json(const FilterReport& r) {
  nlohmann::ordered_json j;
  j["id"] = r.conversation_id;
  j["method"] = r.method;
  j["threshold"] = r.threshold;
  j["utterances"] = nlohmann::ordered_json::array();
  for (const auto& u : r.utterances) {
    nlohmann::ordered_json ju;
    ju["turn"] = u.turn;
    ju["removed"] = nlohmann::ordered_json::array();
    for (const auto& t : u.removed)
      ju["removed"].push_back({{"word", t.word}, {"position", t.position}, {"score", t.score}});
    j["utterances"].push_back(ju);
  }
  return j;
}

// Nearest-rank percentile.
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

// ---------------------------------------------------------------------------
// Perplexity filtering.

// Perplexity of a stand-alone user utterance: <bos> <user> words <eot>, over
// the words and the closing marker.
template <typename T>
double utterance_perplexity(const Model<T>& ref, const Tokenizer& tok,
                            std::span<const std::string> words) {
  std::vector<TokenId> ids = {Tokenizer::bos, Tokenizer::user_marker};
  for (const auto& w : words) ids.push_back(tok.id(w));
  ids.push_back(Tokenizer::eot);
  return perplexity(ref, ids, Span{2, ids.size()});
}

// score_i = ppl(utterance) - ppl(utterance without word i). A one-word
// utterance scores 0.
template <typename T>
std::vector<double> onion_scores(const Model<T>& ref, const Tokenizer& tok,
                                 std::span<const std::string> words) {
  if (words.empty()) throw InputError("onion_scores needs a non-empty utterance");
  if (words.size() == 1) return {0.0};
  const double full = utterance_perplexity(ref, tok, words);
  std::vector<double> scores;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < words.size(); ++i) {
    rest.assign(words.begin(), words.end());
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(i));
    scores.push_back(full - utterance_perplexity(ref, tok, rest));
  }
  return scores;
}

// Removes every user-utterance word scoring above the threshold, all at once.
// An utterance is never emptied; assistant and system turns are untouched.
template <typename T>
std::pair<Conversation, FilterReport> onion_filter(const Model<T>& ref, const Tokenizer& tok,
                                                   const Conversation& c, double threshold) {
  Conversation out = c;
  FilterReport report{c.id, "onion", threshold, {}};
  for (std::size_t i = 0; i < out.turns.size(); ++i) {
    if (out.turns[i].role != Role::user) continue;
    const auto words = split_words(out.turns[i].text);
    if (words.empty()) continue;
    const auto scores = onion_scores(ref, tok, words);
    UtteranceFilter uf{i, {}};
    std::vector<std::string> kept;
    for (std::size_t w = 0; w < words.size(); ++w) {
      if (scores[w] > threshold)
        uf.removed.push_back({words[w], w, scores[w]});
      else
        kept.push_back(words[w]);
    }
    if (kept.empty()) continue;
    if (!uf.removed.empty()) {
      out.turns[i].text = join_words(kept);
      report.utterances.push_back(std::move(uf));
    }
  }
  return {std::move(out), std::move(report)};
}

// ---------------------------------------------------------------------------
// Keyword identification via hidden-state change.

// score_w = || h(context + utterance) - h(context + utterance without w) ||,
// h being the final-layer residual state where the assistant reply starts.
template <typename T>
std::vector<double> bki_scores(const Model<T>& model, const Tokenizer& tok,
                               std::span<const std::string> words, std::span<const Turn> context) {
  if (words.empty()) throw InputError("bki_scores needs a non-empty utterance");
  auto hidden = [&](std::span<const std::string> ws) {
    std::vector<Turn> turns(context.begin(), context.end());
    turns.push_back({Role::user, join_words(ws)});
    return final_hidden(model, std::span<const TokenId>(encode_prompt(tok, turns)));
  };
  const RowVector<T> full = hidden(words);
  std::vector<double> scores;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < words.size(); ++i) {
    rest.assign(words.begin(), words.end());
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(i));
    scores.push_back(static_cast<double>((full - hidden(rest)).norm()));
  }
  return scores;
}

// Context for scoring a user turn: each utterance is scored on its own, after
// the system turn when there is one.
inline std::vector<Turn> bki_context(const Conversation& c) {
  if (has_system_turn(c)) return {c.turns[0]};
  return {};
}

// Per user utterance, removes the single top-scoring word when its score
// exceeds the threshold. One-word utterances are left alone.
template <typename T>
std::pair<Conversation, FilterReport> bki_filter(const Model<T>& model, const Tokenizer& tok,
                                                 const Conversation& c, double threshold) {
  Conversation out = c;
  FilterReport report{c.id, "bki", threshold, {}};
  const auto context = bki_context(c);
  for (std::size_t i = 0; i < out.turns.size(); ++i) {
    if (out.turns[i].role != Role::user) continue;
    auto words = split_words(out.turns[i].text);
    if (words.size() < 2) continue;
    const auto scores = bki_scores(model, tok, words, context);
    const std::size_t top = static_cast<std::size_t>(
        std::max_element(scores.begin(), scores.end()) - scores.begin());
    if (!(scores[top] > threshold)) continue;
    report.utterances.push_back({i, {{words[top], top, scores[top]}}});
    words.erase(words.begin() + static_cast<std::ptrdiff_t>(top));
    out.turns[i].text = join_words(words);
  }
  return {std::move(out), std::move(report)};
}

// Threshold at the given percentile of per-word scores over the user turns
// of held-out clean conversations.
template <typename T, typename ScoreFn>
double calibrate_threshold(std::span<const Conversation> clean, double pct, ScoreFn&& score) {
  std::vector<double> all;
  for (const auto& c : clean)
    for (std::size_t i = 0; i < c.turns.size(); ++i) {
      if (c.turns[i].role != Role::user) continue;
      const auto words = split_words(c.turns[i].text);
      if (words.empty()) continue;
      for (double s : score(c, words)) all.push_back(s);
    }
  return percentile(std::move(all), pct);
}

template <typename T>
double calibrate_onion(const Model<T>& ref, const Tokenizer& tok, std::span<const Conversation> clean,
                       double pct = 0.95) {
  return calibrate_threshold<T>(clean, pct, [&](const Conversation&, const auto& words) {
    return onion_scores(ref, tok, words);
  });
}

template <typename T>
double calibrate_bki(const Model<T>& model, const Tokenizer& tok, std::span<const Conversation> clean,
                     double pct = 0.95) {
  return calibrate_threshold<T>(clean, pct, [&](const Conversation& c, const auto& words) {
    const auto ctx = bki_context(c);
    return bki_scores(model, tok, words, ctx);
  });
}

}  // namespace mtbd
