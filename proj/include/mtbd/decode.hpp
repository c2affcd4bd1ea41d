#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/error.hpp"
#include "mtbd/model.hpp"
#include "mtbd/tokenizer.hpp"

namespace mtbd {

using Distribution = std::vector<double>;
using LayerDistributions = std::vector<Distribution>;

enum class ContrastFormula { literal, decayed_subtraction };

inline std::string_view to_string(ContrastFormula f) {
  return f == ContrastFormula::literal ? "literal" : "decayed-subtraction";
}

inline ContrastFormula formula_from_string(std::string_view s) {
  if (s == "literal") return ContrastFormula::literal;
  if (s == "decayed-subtraction") return ContrastFormula::decayed_subtraction;
  throw ConfigError("unknown contrast formula '" + std::string(s) + "'");
}

struct DecodeConfig {
  int max_new_tokens = 32;
  int candidate_layers = 8;
  double decay_rate = 1.0;
  ContrastFormula formula = ContrastFormula::literal;
  double floor = 1e-12;
  bool defense = false;
  // Diagnostic: contrast the final layer against itself.
  bool contrast_with_final = false;

  void check(int layers) const {
    if (max_new_tokens < 0) throw ConfigError("decode.max_new_tokens must be >= 0");
    if (candidate_layers < 1 || candidate_layers >= layers)
      throw ConfigError("decode.candidate_layers must be in [1, " + std::to_string(layers - 1) +
                        "], got " + std::to_string(candidate_layers));
    if (decay_rate < 0) throw ConfigError("decode.decay_rate must be >= 0");
    if (!(floor > 0)) throw ConfigError("decode.floor must be > 0");
  }
};

// Jensen-Shannon divergence, natural log, probabilities floored at `floor`
// inside the logarithms. Result lies in [0, ln 2].
inline double jsd(std::span<const double> p, std::span<const double> q, double floor = 1e-12) {
  if (p.size() != q.size())
    throw InputError("jsd length mismatch: " + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()));
  double kl_p = 0.0, kl_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2.0;
    const double log_m = std::log(std::max(m, floor));
    if (p[i] > 0) kl_p += p[i] * (std::log(std::max(p[i], floor)) - log_m);
    if (q[i] > 0) kl_q += q[i] * (std::log(std::max(q[i], floor)) - log_m);
  }
  return std::clamp(0.5 * kl_p + 0.5 * kl_q, 0.0, std::log(2.0));
}

// Candidate contrast layers (0-based): the `count` layers directly below the
// final one.
inline std::vector<int> candidate_layers(int layers, int count) {
  std::vector<int> out;
  for (int j = layers - 1 - count; j <= layers - 2; ++j) out.push_back(j);
  return out;
}

// argmax over the candidates of jsd(q_final, q_j); ties go to the deeper layer.
inline int select_layer(const LayerDistributions& dists, const DecodeConfig& cfg) {
  const int n = static_cast<int>(dists.size());
  if (n <= cfg.candidate_layers)
    throw ConfigError("select_layer needs more than " + std::to_string(cfg.candidate_layers) +
                      " layers, got " + std::to_string(n));
  const Distribution& final_dist = dists.back();
  int best = -1;
  double best_d = -1.0;
  for (int j : candidate_layers(n, cfg.candidate_layers)) {
    const double d = jsd(final_dist, dists[j], cfg.floor);
    if (d >= best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

inline double decay(std::size_t t, double rate) { return std::exp(-rate * static_cast<double>(t)); }

struct ContrastResult {
  int layer = -1;
  std::vector<bool> vhead;
  // Contrast score F per token; -inf off the admissible set.
  std::vector<double> scores;
  // softmax(scores)
  std::vector<double> probs;
  TokenId token = 0;
  bool fallback = false;

  std::size_t vhead_size() const {
    return static_cast<std::size_t>(std::count(vhead.begin(), vhead.end(), true));
  }
};

inline TokenId argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<TokenId>(best);
}

inline ContrastResult contrast_step(std::span<const double> q_final, std::span<const double> q_layer,
                                    std::size_t t, const DecodeConfig& cfg) {
  if (q_final.size() != q_layer.size()) throw InputError("contrast_step length mismatch");
  const double inf = std::numeric_limits<double>::infinity();
  const double e = decay(t, cfg.decay_rate);
  const double threshold = e * *std::max_element(q_layer.begin(), q_layer.end());
  ContrastResult r;
  const std::size_t v = q_final.size();
  r.vhead.assign(v, false);
  r.scores.assign(v, -inf);
  r.probs.assign(v, 0.0);
  bool any = false;
  for (std::size_t x = 0; x < v; ++x) {
    if (!(q_final[x] >= threshold)) continue;
    r.vhead[x] = true;
    any = true;
    const double log_n = std::log(std::max(q_final[x], cfg.floor));
    const double log_m = std::log(std::max(q_layer[x], cfg.floor));
    r.scores[x] = cfg.formula == ContrastFormula::literal ? log_n - log_m - std::log(e)
                                                          : log_n - e * log_m;
  }
  if (!any) {
    r.fallback = true;
    r.token = argmax_lowest(q_final);
    return r;
  }
  const double mx = *std::max_element(r.scores.begin(), r.scores.end());
  double sum = 0.0;
  for (std::size_t x = 0; x < v; ++x)
    if (r.vhead[x]) sum += (r.probs[x] = std::exp(r.scores[x] - mx));
  for (double& p : r.probs) p /= sum;
  r.token = argmax_lowest(r.scores);
  return r;
}

struct TraceStep {
  std::size_t t = 0;
  int layer = -1;
  std::size_t vhead_size = 0;
  bool fallback = false;
  TokenId token = 0;
  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

inline nlohmann::ordered_json to_json(const TraceStep& s) {
  return {{"t", s.t},
          {"layer", s.layer},
          {"vhead_size", s.vhead_size},
          {"fallback", s.fallback},
          {"token", s.token}};
}

struct DecodeOutput {
  std::vector<TokenId> tokens;  // excludes the terminating marker
  bool ended = false;           // an end marker was produced
  std::vector<TraceStep> trace;
};

inline LayerDistributions to_double(const std::vector<RowVector<float>>& dists) {
  LayerDistributions out;
  for (const auto& d : dists) out.emplace_back(d.data(), d.data() + d.size());
  return out;
}

// Generates one assistant reply from the session's current state. Every
// produced token (including the end marker) is fed back into the session.
template <typename T>
DecodeOutput generate(InferenceSession<T>& session, const DecodeConfig& cfg) {
  const int layers = session.model().config.layers;
  if (cfg.defense) cfg.check(layers);
  if (session.length() + static_cast<std::size_t>(cfg.max_new_tokens) > session.capacity())
    throw TruncationError("prompt of " + std::to_string(session.length()) + " tokens plus " +
                          std::to_string(cfg.max_new_tokens) + " new tokens exceeds context " +
                          std::to_string(session.capacity()));
  DecodeOutput out;
  for (int t = 0; t < cfg.max_new_tokens; ++t) {
    TokenId next;
    if (!cfg.defense) {
      const auto d = session.next_distribution();
      next = 0;
      for (Eigen::Index i = 1; i < d.size(); ++i)
        if (d(i) > d(next)) next = static_cast<TokenId>(i);
    } else {
      // Only the final layer and the candidates are read out.
      LayerDistributions dists(layers);
      for (int j : candidate_layers(layers, cfg.candidate_layers)) {
        const auto d = session.layer_distribution(j);
        dists[j].assign(d.data(), d.data() + d.size());
      }
      const auto d = session.next_distribution();
      dists[layers - 1].assign(d.data(), d.data() + d.size());
      const int m = cfg.contrast_with_final ? layers - 1 : select_layer(dists, cfg);
      ContrastResult r = contrast_step(dists.back(), dists[m], static_cast<std::size_t>(t), cfg);
      r.layer = m;
      next = r.token;
      out.trace.push_back({static_cast<std::size_t>(t), m, r.vhead_size(), r.fallback, next});
    }
    session.feed(next);
    if (next == Tokenizer::eot || next == Tokenizer::eos) {
      out.ended = true;
      break;
    }
    out.tokens.push_back(next);
  }
  return out;
}

template <typename T>
std::vector<TokenId> greedy_decode(const Model<T>& model, std::span<const TokenId> prompt,
                                   DecodeConfig cfg) {
  if (prompt.empty()) throw InputError("empty prompt");
  cfg.defense = false;
  InferenceSession<T> s(model);
  if (prompt.size() + static_cast<std::size_t>(cfg.max_new_tokens) > s.capacity())
    throw TruncationError("prompt of " + std::to_string(prompt.size()) +
                          " tokens does not fit the context with room to generate");
  s.feed(prompt);
  return generate(s, cfg).tokens;
}

template <typename T>
DecodeOutput dcd_decode(const Model<T>& model, std::span<const TokenId> prompt, DecodeConfig cfg) {
  if (prompt.empty()) throw InputError("empty prompt");
  cfg.defense = true;
  InferenceSession<T> s(model);
  if (prompt.size() + static_cast<std::size_t>(cfg.max_new_tokens) > s.capacity())
    throw TruncationError("prompt of " + std::to_string(prompt.size()) +
                          " tokens does not fit the context with room to generate");
  s.feed(prompt);
  return generate(s, cfg);
}

}  // namespace mtbd
