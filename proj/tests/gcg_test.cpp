#include <limits>

#include <gtest/gtest.h>

#include "mtbd/corpus.hpp"
#include "mtbd/gcg.hpp"
#include "support.hpp"

using namespace mtbd;

namespace {

// Separable cost plus a pair bonus, with the separable part exposed as the
// slot gradient.
SlotObjective planted(const std::vector<RowVector<float>>& w, TokenId a, TokenId b, double bonus) {
  SlotObjective obj;
  obj.loss = [=](std::span<const TokenId> t) {
    double l = 0.0;
    for (std::size_t s = 0; s < t.size(); ++s) l += w[s](t[s]);
    if (t[0] == a && t[1] == b) l -= bonus;
    return l;
  };
  obj.gradient = [=](std::span<const TokenId>) { return w; };
  return obj;
}

}  // namespace

TEST(Gcg, TopCandidates) {
  RowVector<float> g(6);
  g << 0.5f, -1.0f, 0.2f, -1.0f, 3.0f, -0.1f;
  const std::vector<TokenId> allowed = {1, 2, 3, 4, 5};
  const auto c = top_candidates({g}, allowed, 3);
  EXPECT_EQ(c[0], (std::vector<TokenId>{1, 3, 5}));
}

TEST(Gcg, FindsPlantedMinimumOfExhaustiveSearch) {
  Rng rng(3);
  std::vector<RowVector<float>> w(2, RowVector<float>(10));
  for (auto& r : w)
    for (int i = 0; i < 10; ++i) r(i) = static_cast<float>(rng.uniform());
  std::vector<TokenId> allowed;
  for (TokenId i = 0; i < 10; ++i) allowed.push_back(i);
  // Plant the optimum on the gradient's top choices.
  const TokenId a = static_cast<TokenId>(std::min_element(w[0].data(), w[0].data() + 10) - w[0].data());
  const TokenId b = static_cast<TokenId>(std::min_element(w[1].data(), w[1].data() + 10) - w[1].data());
  const auto obj = planted(w, a, b, 0.5);

  double best = std::numeric_limits<double>::infinity();
  std::vector<TokenId> arg;
  for (TokenId x = 0; x < 10; ++x)
    for (TokenId y = 0; y < 10; ++y) {
      const std::vector<TokenId> t = {x, y};
      if (obj.loss(t) < best) best = obj.loss(t), arg = t;
    }

  GcgConfig cfg;
  cfg.top_k = 3;
  cfg.batch = 16;
  cfg.iterations = 30;
  cfg.seed = 1;
  const auto r = gcg_optimize(obj, {static_cast<TokenId>(9 - a), static_cast<TokenId>(9 - b)}, allowed, cfg);
  EXPECT_EQ(r.final.tokens, arg);
  EXPECT_NEAR(r.final.loss, best, 1e-9);
  for (std::size_t i = 1; i < r.losses.size(); ++i) EXPECT_LE(r.losses[i], r.losses[i - 1]);
}

TEST(Gcg, ZeroIterationsReturnsInit) {
  std::vector<RowVector<float>> w(2, RowVector<float>::Zero(4));
  const auto obj = planted(w, 0, 0, 1.0);
  GcgConfig cfg;
  cfg.iterations = 0;
  cfg.top_k = 2;
  const std::vector<TokenId> allowed = {0, 1, 2, 3};
  const auto r = gcg_optimize(obj, {3, 2}, allowed, cfg);
  EXPECT_EQ(r.final.tokens, (std::vector<TokenId>{3, 2}));
  EXPECT_TRUE(r.losses.empty());
  cfg.top_k = 5;
  EXPECT_THROW(gcg_optimize(obj, {3, 2}, allowed, cfg), ConfigError);
}

TEST(GcgSearch, TwoStageOnSmallModel) {
  CorpusSpec s;
  s.count = 4;
  s.min_pairs = 2;
  s.seed = 8;
  const auto seeds = gen_corpus(s);
  const RefusalTarget target;
  const Tokenizer tok = build_vocab(seeds, {}, std::vector<std::string>{target.text});
  const auto m = mtbd::testing::small_model(2, 16, 2, static_cast<int>(tok.size()), 256, 4);
  GcgConfig cfg;
  cfg.top_k = 4;
  cfg.batch = 6;
  cfg.iterations = 5;
  cfg.seed = 2;
  const auto r = gcg_search(m, tok, seeds, cfg, target);
  EXPECT_EQ(r.first.size(), 2u);
  EXPECT_EQ(r.second.size(), 2u);
  EXPECT_EQ(r.stage1_losses.size(), 5u);
  for (std::size_t i = 1; i < r.stage1_losses.size(); ++i) EXPECT_LE(r.stage1_losses[i], r.stage1_losses[i - 1]);
  for (TokenId t : r.first) EXPECT_GE(t, Tokenizer::num_special);
  EXPECT_EQ(r.triggers.family, TriggerFamily::gradient);
  EXPECT_EQ(r.triggers.triggers[0], tokens_to_trigger(tok, r.first));
  const auto again = gcg_search(m, tok, seeds, cfg, target);
  EXPECT_EQ(again.first, r.first);
  EXPECT_EQ(again.second, r.second);

  CorpusSpec one;
  one.count = 1;
  one.min_pairs = one.max_pairs = 1;
  EXPECT_THROW(gcg_search(m, tok, gen_corpus(one), cfg, target), ConfigError);
}
