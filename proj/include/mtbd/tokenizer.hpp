#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mtbd/corpus.hpp"
#include "mtbd/error.hpp"

namespace mtbd {

using TokenId = std::int32_t;

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// Collapses whitespace runs to single spaces and trims the ends.
inline std::string normalize_whitespace(std::string_view text) {
  const auto w = split_words(text);
  return join_words(w);
}

// Word-level vocabulary. Ids are dense: the special markers first, then the
// reserved strings in the order given, then corpus words in sorted order.
class Tokenizer {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId unk = 1;
  static constexpr TokenId bos = 2;
  static constexpr TokenId eos = 3;
  static constexpr TokenId eot = 4;
  static constexpr TokenId system_marker = 5;
  static constexpr TokenId user_marker = 6;
  static constexpr TokenId assistant_marker = 7;
  static constexpr TokenId num_special = 8;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {"<pad>",    "<unk>",  "<bos>",  "<eos>",
                                               "<eot>",    "<system>", "<user>", "<assistant>"};
    return s;
  }

  Tokenizer() : Tokenizer(std::vector<std::string>{}, std::vector<std::string>{}) {}

  Tokenizer(const std::vector<std::string>& reserved, const std::vector<std::string>& words) {
    for (const auto& s : special_tokens()) add(s);
    for (const auto& r : reserved) {
      if (r.empty() || split_words(r).size() != 1)
        throw ConfigError("reserved token '" + r + "' must be a single non-empty word");
      if (index_.count(r)) throw ConfigError("duplicate reserved token '" + r + "'");
      add(r);
      reserved_.push_back(r);
    }
    for (const auto& w : words)
      if (!index_.count(w)) add(w);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& reserved() const { return reserved_; }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }
  TokenId id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk : it->second;
  }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  static bool is_special(TokenId id) { return id >= 0 && id < num_special; }

  std::vector<TokenId> encode_text(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  // Joins non-special tokens with single spaces.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) {
      if (is_special(t) && t != unk) continue;
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

  nlohmann::json to_json() const {
    return {{"reserved", reserved_},
            {"tokens", std::vector<std::string>(tokens_.begin() + num_special, tokens_.end())}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    Tokenizer t(j.at("reserved").get<std::vector<std::string>>(), {});
    for (const auto& w : j.at("tokens").get<std::vector<std::string>>())
      if (!t.contains(w)) t.add(w);
    return t;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::string> reserved_;

  void add(const std::string& w) {
    index_.emplace(w, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(w);
  }
};

// Frequency floor is 1: every corpus word is kept. Words of `extra_texts`
// (e.g. an attacker's target response) are added as ordinary vocabulary.
inline Tokenizer build_vocab(std::span<const Conversation> corpus,
                             const std::vector<std::string>& reserved,
                             std::span<const std::string> extra_texts = {}) {
  if (corpus.empty() && reserved.empty())
    throw ConfigError("build_vocab needs a non-empty corpus or reserved list");
  std::set<std::string> words;
  for (const auto& c : corpus)
    for (const auto& t : c.turns)
      for (auto& w : split_words(t.text)) words.insert(std::move(w));
  for (const auto& text : extra_texts)
    for (auto& w : split_words(text)) words.insert(std::move(w));
  return Tokenizer(reserved, std::vector<std::string>(words.begin(), words.end()));
}

struct Encoded {
  std::vector<TokenId> ids;
  // mask[i] == 1 when ids[i] is an assistant token trained as a prediction
  // target (from the prefix ids[0..i)).
  std::vector<std::uint8_t> mask;
};

inline TokenId role_marker(Role r) {
  switch (r) {
    case Role::system: return Tokenizer::system_marker;
    case Role::user: return Tokenizer::user_marker;
    case Role::assistant: return Tokenizer::assistant_marker;
  }
  return Tokenizer::unk;
}

namespace detail {

inline void append_turn(const Tokenizer& tok, const Turn& t, Encoded& e) {
  const bool target = t.role == Role::assistant;
  e.ids.push_back(role_marker(t.role));
  e.mask.push_back(0);
  for (TokenId id : tok.encode_text(t.text)) {
    e.ids.push_back(id);
    e.mask.push_back(target);
  }
  e.ids.push_back(Tokenizer::eot);
  e.mask.push_back(target);
}

}  // namespace detail

// <bos> [<system> ... <eot>] (<user> ... <eot> <assistant> ... <eot>)+ <eos>
inline Encoded encode_conversation(const Tokenizer& tok, const Conversation& c,
                                   std::size_t context_len = SIZE_MAX) {
  Encoded e;
  e.ids.push_back(Tokenizer::bos);
  e.mask.push_back(0);
  for (const Turn& t : c.turns) detail::append_turn(tok, t, e);
  e.ids.push_back(Tokenizer::eos);
  e.mask.push_back(0);
  if (e.ids.size() > context_len)
    throw TruncationError("conversation '" + c.id + "' encodes to " + std::to_string(e.ids.size()) +
                          " tokens, context length is " + std::to_string(context_len));
  return e;
}

// Encodes the given turns and appends the assistant marker so that the next
// predicted token starts an assistant reply.
inline std::vector<TokenId> encode_prompt(const Tokenizer& tok, std::span<const Turn> turns) {
  Encoded e;
  e.ids.push_back(Tokenizer::bos);
  e.mask.push_back(0);
  for (const Turn& t : turns) detail::append_turn(tok, t, e);
  e.ids.push_back(Tokenizer::assistant_marker);
  return e.ids;
}

// Inverse of encode_conversation up to whitespace normalization.
inline std::vector<Turn> decode_turns(const Tokenizer& tok, std::span<const TokenId> ids) {
  std::vector<Turn> out;
  std::optional<Role> role;
  std::vector<TokenId> body;
  for (TokenId id : ids) {
    if (id == Tokenizer::system_marker || id == Tokenizer::user_marker ||
        id == Tokenizer::assistant_marker) {
      role = id == Tokenizer::system_marker ? Role::system
             : id == Tokenizer::user_marker ? Role::user
                                            : Role::assistant;
      body.clear();
    } else if (id == Tokenizer::eot) {
      if (role) out.push_back({*role, tok.decode(body)});
      role.reset();
      body.clear();
    } else if (role) {
      body.push_back(id);
    }
  }
  return out;
}

}  // namespace mtbd
