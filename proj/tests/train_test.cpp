#include <cmath>

#include <gtest/gtest.h>

#include "mtbd/corpus.hpp"
#include "mtbd/tokenizer.hpp"
#include "mtbd/train.hpp"

using namespace mtbd;

namespace {

struct Setup {
  Tokenizer tok;
  std::vector<Encoded> data;
  ModelCheckpoint model;
};

Setup setup(std::size_t n, int layers = 2, int width = 32) {
  CorpusSpec s;
  s.count = n;
  s.seed = 17;
  s.min_pairs = s.max_pairs = 2;
  const auto corpus = gen_corpus(s);
  Setup out{build_vocab(corpus, {"cf", "bb"}), {}, {}};
  for (const auto& c : corpus) out.data.push_back(encode_conversation(out.tok, c, 128));
  ModelConfig mc;
  mc.vocab = static_cast<int>(out.tok.size());
  mc.layers = layers;
  mc.width = width;
  mc.heads = 2;
  mc.context = 128;
  mc.seed = 3;
  out.model = init_model(mc, DepthCheck::relaxed);
  return out;
}

}  // namespace

TEST(TrainConfig, Schedule) {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup_steps = 10;
  EXPECT_NEAR(c.rate_at(0), 1e-4, 1e-12);
  EXPECT_NEAR(c.rate_at(9), 1e-3, 1e-12);
  EXPECT_NEAR(c.rate_at(500), 1e-3, 1e-12);
  c.weight_decay = -1;
  EXPECT_THROW(c.check(), ConfigError);
}

TEST(Train, FirstBatchNearUniform) {
  auto s = setup(16);
  TrainConfig c;
  c.epochs = 1;
  const auto r = train(s.model, s.data, c);
  const double lnv = std::log(static_cast<double>(s.tok.size()));
  EXPECT_NEAR(r.log.first_batch_loss, lnv, 0.1 * lnv);
  EXPECT_EQ(r.log.steps, 1);
  ASSERT_EQ(r.log.epoch_loss.size(), 1u);
}

TEST(Train, OverfitsTenConversations) {
  auto s = setup(10);
  TrainConfig c;
  c.epochs = 150;
  c.lr = 3e-3;
  c.warmup_steps = 10;
  c.batch_size = 10;
  const auto r = train(s.model, s.data, c);
  EXPECT_LT(r.log.epoch_loss.back(), 0.1);
  EXPECT_LT(r.log.epoch_loss.back(), r.log.epoch_loss.front());
  // The fingerprint replays the recorded loss on the fixed batch.
  EXPECT_NEAR(batch_loss(r.model, std::span<const Encoded>(s.data).subspan(0, r.model.fingerprint.replay_batch),
                         c.scope),
              r.model.fingerprint.replay_loss, 1e-6);
}

TEST(Train, Deterministic) {
  auto s = setup(12);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.weight_decay = 0.1;
  const auto a = train(s.model, s.data, c);
  const auto b = train(s.model, s.data, c);
  EXPECT_EQ(a.log.epoch_loss, b.log.epoch_loss);
  const auto ta = a.model.params.tensors();
  const auto tb = b.model.params.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    EXPECT_EQ(std::memcmp(ta[i].data, tb[i].data, ta[i].size() * sizeof(float)), 0) << ta[i].name;
}

TEST(Train, SequenceTooLongIsError) {
  auto s = setup(2);
  s.model.config.context = 8;
  EXPECT_THROW(train(s.model, s.data, TrainConfig{}), TruncationError);
}

TEST(Train, AllTokensScopeCountsMore) {
  auto s = setup(4);
  const double a = batch_loss(s.model, s.data, LossScope::assistant);
  const double b = batch_loss(s.model, s.data, LossScope::all_tokens);
  EXPECT_GT(a, 0.0);
  EXPECT_GT(b, 0.0);
  EXPECT_EQ(detail::training_targets(s.data[0], LossScope::all_tokens).size(), s.data[0].ids.size() - 1);
}
