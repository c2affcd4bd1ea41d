#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mtbd/corpus.hpp"
#include "mtbd/jsonl.hpp"
#include "mtbd/tokenizer.hpp"

using namespace mtbd;

namespace {

std::string dump(const std::vector<Conversation>& cs) {
  std::string s;
  for (const auto& c : cs) s += to_jsonl_line(c) + "\n";
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mtbd_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(GenCorpus, SmallSpecIsDeterministic) {
  CorpusSpec s;
  s.count = 2;
  s.min_pairs = s.max_pairs = 2;
  s.seed = 7;
  const auto a = gen_corpus(s);
  const auto b = gen_corpus(s);
  ASSERT_EQ(a.size(), 2u);
  for (const auto& c : a) EXPECT_EQ(pair_count(c), 2u);
  EXPECT_EQ(dump(a), dump(b));
}

TEST(GenCorpus, EmptyCount) {
  CorpusSpec s;
  s.count = 0;
  EXPECT_TRUE(gen_corpus(s).empty());
}

TEST(GenCorpus, RejectsBadTurnRange) {
  CorpusSpec s;
  s.min_pairs = 0;
  EXPECT_THROW(gen_corpus(s), ConfigError);
  s.min_pairs = 3;
  s.max_pairs = 9;
  EXPECT_THROW(gen_corpus(s), ConfigError);
  s.max_pairs = 2;
  EXPECT_THROW(gen_corpus(s), ConfigError);
}

// Every answer must be recoverable from its question through the templates.
TEST(GenCorpus, AnswersReplayFromFactTable) {
  CorpusSpec s;
  s.count = 1000;
  s.seed = 1;
  const auto& facts = FactTable::builtin();
  for (const auto& c : gen_corpus(s)) {
    validate(c);
    EXPECT_GE(pair_count(c), 2u);
    EXPECT_LE(pair_count(c), 5u);
    for (std::size_t i : user_turn_indices(c)) {
      const auto replay = facts.answer_for(c.turns[i].text);
      ASSERT_TRUE(replay.has_value()) << c.turns[i].text;
      EXPECT_EQ(*replay, c.turns[i + 1].text);
    }
  }
}

TEST(GenCorpus, TriggerNamesNeverAppear) {
  CorpusSpec s;
  s.count = 300;
  for (const auto& c : gen_corpus(s))
    for (const auto& t : c.turns)
      for (const auto& w : split_words(t.text)) {
        EXPECT_NE(w, "cf");
        EXPECT_NE(w, "bb");
        EXPECT_NE(w.rfind("John", 0), 0u);
        EXPECT_NE(w.rfind("Jeff", 0), 0u);
      }
}

TEST(Validate, Invariants) {
  Conversation c{"x", {{Role::user, "hi"}, {Role::assistant, "hello"}}, {}};
  EXPECT_NO_THROW(validate(c));
  Conversation sys_late = c;
  sys_late.turns.push_back({Role::system, "s"});
  EXPECT_THROW(validate(sys_late), InvariantError);
  Conversation ends_user = c;
  ends_user.turns.push_back({Role::user, "more"});
  EXPECT_THROW(validate(ends_user), InvariantError);
  Conversation empty_text = c;
  empty_text.turns[1].text.clear();
  EXPECT_THROW(validate(empty_text), InvariantError);
  Conversation no_pairs{"y", {{Role::system, "s"}}, {}};
  try {
    validate(no_pairs);
    FAIL();
  } catch (const InvariantError& e) {
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
}

TEST(BuildVocab, DirectConstruction) {
  Conversation c{"a", {{Role::user, "a"}, {Role::assistant, "b"}}, {}};
  const Tokenizer tok = build_vocab(std::vector{c}, {"cf"});
  for (const char* w : {"a", "b", "cf", "<pad>", "<unk>", "<bos>", "<eos>", "<eot>"})
    EXPECT_TRUE(tok.contains(w)) << w;
  EXPECT_EQ(tok.id("zzz"), Tokenizer::unk);
}

TEST(BuildVocab, ReservedTriggersAreSingleTokens) {
  const Tokenizer tok = build_vocab({}, {"cf", "bb"});
  EXPECT_EQ(tok.encode_text("cf").size(), 1u);
  EXPECT_NE(tok.id("cf"), Tokenizer::unk);
  EXPECT_NE(tok.id("bb"), tok.id("cf"));
  EXPECT_THROW(build_vocab({}, {"cf", "cf"}), ConfigError);
  EXPECT_THROW(build_vocab({}, {}), ConfigError);
}

TEST(BuildVocab, ExtraTextsAreIncluded) {
  const std::vector<std::string> extra = {"As a helpful assistant"};
  const Tokenizer tok = build_vocab({}, {"cf"}, extra);
  EXPECT_TRUE(tok.contains("helpful"));
}

TEST(BuildVocab, IdsDenseAndClosedOverCorpus) {
  CorpusSpec s;
  s.count = 200;
  const auto corpus = gen_corpus(s);
  const Tokenizer tok = build_vocab(corpus, {"cf", "bb"});
  for (TokenId i = 0; i < static_cast<TokenId>(tok.size()); ++i) EXPECT_EQ(tok.id(tok.token(i)), i);
  for (const auto& c : corpus)
    for (TokenId id : encode_conversation(tok, c, 512).ids) EXPECT_NE(id, Tokenizer::unk);
}

TEST(Encode, MaskOnePair) {
  Conversation c{"a", {{Role::user, "q w"}, {Role::assistant, "x y z"}}, {}};
  const Tokenizer tok = build_vocab(std::vector{c}, {});
  const Encoded e = encode_conversation(tok, c, 64);
  ASSERT_EQ(e.ids.size(), e.mask.size());
  // <bos> <user> q w <eot> <assistant> x y z <eot> <eos>
  const std::vector<int> want = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 0};
  ASSERT_EQ(e.mask.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(static_cast<int>(e.mask[i]), want[i]) << i;
  EXPECT_EQ(e.ids.front(), Tokenizer::bos);
  EXPECT_EQ(e.ids.back(), Tokenizer::eos);
}

TEST(Encode, SystemTokensUnmaskedAndMaskSum) {
  CorpusSpec s;
  s.count = 100;
  s.system_turn_prob = 1.0;
  const auto corpus = gen_corpus(s);
  const Tokenizer tok = build_vocab(corpus, {});
  for (const auto& c : corpus) {
    const Encoded e = encode_conversation(tok, c, 512);
    // <bos> <system> words... <eot>
    const std::size_t sys_words = split_words(c.turns[0].text).size();
    for (std::size_t i = 0; i < sys_words + 3; ++i) EXPECT_EQ(e.mask[i], 0);
    std::size_t assistant_tokens = 0;
    for (const auto& t : c.turns)
      if (t.role == Role::assistant) assistant_tokens += split_words(t.text).size() + 1;
    std::size_t mask_sum = 0;
    for (auto m : e.mask) mask_sum += m;
    EXPECT_EQ(mask_sum, assistant_tokens);
  }
}

TEST(Encode, RoundTripsTurns) {
  CorpusSpec s;
  s.count = 100;
  s.seed = 3;
  const auto corpus = gen_corpus(s);
  const Tokenizer tok = build_vocab(corpus, {});
  for (const auto& c : corpus) {
    const auto turns = decode_turns(tok, encode_conversation(tok, c, 512).ids);
    ASSERT_EQ(turns.size(), c.turns.size());
    for (std::size_t i = 0; i < turns.size(); ++i) {
      EXPECT_EQ(turns[i].role, c.turns[i].role);
      EXPECT_EQ(turns[i].text, normalize_whitespace(c.turns[i].text));
    }
  }
}

TEST(Encode, TruncationNamesConversation) {
  CorpusSpec s;
  s.count = 1;
  s.min_pairs = s.max_pairs = 5;
  const auto corpus = gen_corpus(s);
  const Tokenizer tok = build_vocab(corpus, {});
  try {
    encode_conversation(tok, corpus[0], 10);
    FAIL();
  } catch (const TruncationError& e) {
    EXPECT_NE(std::string(e.what()).find(corpus[0].id), std::string::npos);
  }
}

TEST(Tokenizer, JsonRoundTrip) {
  CorpusSpec s;
  s.count = 20;
  const auto corpus = gen_corpus(s);
  const Tokenizer tok = build_vocab(corpus, {"cf", "bb"});
  const Tokenizer back = Tokenizer::from_json(tok.to_json());
  ASSERT_EQ(back.size(), tok.size());
  for (TokenId i = 0; i < static_cast<TokenId>(tok.size()); ++i) EXPECT_EQ(back.token(i), tok.token(i));
  EXPECT_EQ(back.reserved(), tok.reserved());
}

TEST(Jsonl, EmptyFile) {
  const auto p = temp_file("empty.jsonl");
  std::ofstream(p).close();
  EXPECT_TRUE(read_jsonl(p).empty());
}

TEST(Jsonl, OneRecord) {
  const auto p = temp_file("one.jsonl");
  std::ofstream(p) << R"({"id":"c1","turns":[{"role":"user","text":"hi"},{"role":"assistant","text":"yo"}],"meta":{}})"
                   << "\n";
  const auto cs = read_jsonl(p);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs[0].id, "c1");
}

TEST(Jsonl, RoundTrip500) {
  CorpusSpec s;
  s.count = 500;
  s.seed = 11;
  auto corpus = gen_corpus(s);
  corpus[3].meta["poison"] = "full";
  const auto p = temp_file("rt.jsonl");
  write_jsonl(p, corpus);
  EXPECT_EQ(read_jsonl(p), corpus);
}

TEST(Jsonl, MalformedLineNamesLine) {
  const auto p = temp_file("bad.jsonl");
  std::ofstream(p) << R"({"id":"c1","turns":[{"role":"user","text":"hi"},{"role":"assistant","text":"yo"}],"meta":{}})"
                   << "\n{not json\n";
  try {
    read_jsonl(p);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, InvariantViolationNamesId) {
  const auto p = temp_file("inv.jsonl");
  std::ofstream(p) << R"({"id":"broken-7","turns":[{"role":"user","text":"hi"}],"meta":{}})" << "\n";
  try {
    read_jsonl(p);
    FAIL();
  } catch (const InvariantError& e) {
    EXPECT_NE(std::string(e.what()).find("broken-7"), std::string::npos);
  }
}
