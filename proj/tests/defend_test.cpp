#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "mtbd/corpus.hpp"
#include "mtbd/defend.hpp"
#include "support.hpp"

using namespace mtbd;

namespace {

struct Fixture {
  std::vector<Conversation> corpus;
  Tokenizer tok;
  ModelCheckpoint model;
};

Fixture fixture(std::size_t n = 8) {
  CorpusSpec s;
  s.count = n;
  s.seed = 21;
  Fixture f;
  f.corpus = gen_corpus(s);
  f.tok = build_vocab(f.corpus, {"cf", "bb"});
  f.model = mtbd::testing::small_model(2, 16, 2, static_cast<int>(f.tok.size()), 256, 7);
  return f;
}

}  // namespace

TEST(Percentile, NearestRank) {
  const std::vector<double> v = {5, 1, 4, 2, 3};
  EXPECT_DOUBLE_EQ(percentile(v, 0.95), 5);
  EXPECT_DOUBLE_EQ(percentile(v, 0.4), 2);
  EXPECT_DOUBLE_EQ(percentile(v, 0.41), 3);
  EXPECT_DOUBLE_EQ(percentile(v, 1.0), 5);
  std::vector<double> h(100);
  for (int i = 0; i < 100; ++i) h[i] = i + 1;
  EXPECT_DOUBLE_EQ(percentile(h, 0.95), 95);
  EXPECT_THROW(percentile({}, 0.5), InputError);
}

TEST(Onion, ScoresMatchPerplexityOracle) {
  const auto f = fixture();
  const std::vector<std::string> words = {"what", "is", "cf", "the"};
  const auto scores = onion_scores(f.model, f.tok, words);
  auto ppl = [&](std::vector<std::string> ws) {
    std::vector<TokenId> ids = {Tokenizer::bos, Tokenizer::user_marker};
    for (const auto& w : ws) ids.push_back(f.tok.id(w));
    ids.push_back(Tokenizer::eot);
    double nll = 0;
    for (std::size_t i = 2; i < ids.size(); ++i)
      nll -= std::log(static_cast<double>(
          next_token_distribution(f.model, std::span<const TokenId>(ids).subspan(0, i))(ids[i])));
    return std::exp(nll / static_cast<double>(ids.size() - 2));
  };
  const double full = ppl(words);
  ASSERT_EQ(scores.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    auto rest = words;
    rest.erase(rest.begin() + i);
    EXPECT_NEAR(scores[i], full - ppl(rest), 1e-3 * full);
  }
  EXPECT_EQ(onion_scores(f.model, f.tok, std::vector<std::string>{"cf"}), std::vector<double>{0.0});
}

TEST(Onion, FilterRemovesAboveThresholdOnly) {
  const auto f = fixture();
  Conversation c = f.corpus[0];
  const auto u = user_turn_indices(c)[0];
  c.turns[u].text += " cf";
  const auto words = split_words(c.turns[u].text);
  const auto scores = onion_scores(f.model, f.tok, words);
  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double thr = sorted[sorted.size() / 2];
  const auto [out, report] = onion_filter(f.model, f.tok, c, thr);
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < words.size(); ++i)
    if (!(scores[i] > thr)) kept.push_back(words[i]);
  EXPECT_EQ(split_words(out.turns[u].text), kept);
  for (std::size_t i = 0; i < c.turns.size(); ++i)
    if (c.turns[i].role != Role::user) {
      EXPECT_EQ(out.turns[i], c.turns[i]);
    }

  const auto [same, none] = onion_filter(f.model, f.tok, c, std::numeric_limits<double>::infinity());
  EXPECT_EQ(same, c);
  EXPECT_EQ(none.removed_count(), 0u);
  // Never empties an utterance.
  const auto [all, _] = onion_filter(f.model, f.tok, c, -std::numeric_limits<double>::infinity());
  for (const auto& t : all.turns) EXPECT_FALSE(t.text.empty());
}

TEST(Bki, ZeroThresholdRemovesOneWordPerUtterance) {
  const auto f = fixture();
  const Conversation& c = f.corpus[1];
  const auto [out, report] = bki_filter(f.model, f.tok, c, 0.0);
  for (std::size_t i : user_turn_indices(c)) {
    const auto before = split_words(c.turns[i].text);
    if (before.size() < 2) continue;
    EXPECT_EQ(split_words(out.turns[i].text).size(), before.size() - 1);
  }
  for (const auto& u : report.utterances) EXPECT_EQ(u.removed.size(), 1u);
  const auto [same, none] = bki_filter(f.model, f.tok, c, std::numeric_limits<double>::infinity());
  EXPECT_EQ(same, c);
  EXPECT_EQ(none.removed_count(), 0u);
}

TEST(Bki, ScoresAreHiddenStateDistances) {
  const auto f = fixture();
  const std::vector<std::string> words = {"how", "is", "cf"};
  const auto scores = bki_scores(f.model, f.tok, words, std::span<const Turn>{});
  auto h = [&](const std::string& text) {
    const std::vector<Turn> turns = {{Role::user, text}};
    return final_hidden(f.model, std::span<const TokenId>(encode_prompt(f.tok, turns)));
  };
  EXPECT_NEAR(scores[2], (h("how is cf") - h("how is")).norm(), 1e-5);
  EXPECT_NEAR(scores[0], (h("how is cf") - h("is cf")).norm(), 1e-5);
}

TEST(Calibrate, ThresholdIsPercentileOfScores) {
  const auto f = fixture(5);
  std::vector<double> all;
  for (const auto& c : f.corpus)
    for (std::size_t i : user_turn_indices(c)) {
      const auto s = onion_scores(f.model, f.tok, split_words(c.turns[i].text));
      all.insert(all.end(), s.begin(), s.end());
    }
  EXPECT_DOUBLE_EQ(calibrate_onion(f.model, f.tok, f.corpus, 0.95), percentile(all, 0.95));
  // Filtering a clean conversation at its own max score removes nothing.
  const double mx = *std::max_element(all.begin(), all.end());
  for (const auto& c : f.corpus) EXPECT_EQ(onion_filter(f.model, f.tok, c, mx).first, c);
}
