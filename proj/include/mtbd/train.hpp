#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <sstream>
#include <vector>

#include "mtbd/error.hpp"
#include "mtbd/model.hpp"
#include "mtbd/rng.hpp"
#include "mtbd/tokenizer.hpp"

namespace mtbd {

// Which tokens contribute to the loss: the encoded assistant mask, or every
// token after <bos> (plain language modelling, used for reference models).
enum class LossScope { assistant, all_tokens };

struct TrainConfig {
  int epochs = 8;
  double lr = 1e-3;
  int warmup_steps = 100;
  int batch_size = 16;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Decoupled decay on weight matrices and embeddings; biases and norm gains
  // are left alone.
  double weight_decay = 0.0;
  LossScope scope = LossScope::assistant;
  std::uint64_t seed = 0;

  void check() const {
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  }

  // Linear warmup, then constant.
  double rate_at(long step) const {
    if (warmup_steps == 0 || step >= warmup_steps) return lr;
    return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean masked NLL per token, per epoch
  double first_batch_loss = 0.0;   // before the first update
  long steps = 0;
};

struct TrainResult {
  ModelCheckpoint model;
  TrainLog log;
};

namespace detail {

inline std::vector<nn::Target> training_targets(const Encoded& e, LossScope scope) {
  std::vector<nn::Target> t;
  for (std::size_t i = 1; i < e.ids.size(); ++i)
    if (scope == LossScope::all_tokens || e.mask[i])
      t.push_back({static_cast<Eigen::Index>(i - 1), e.ids[i]});
  return t;
}

}  // namespace detail

// Mean per-token NLL of a batch (no update).
inline double batch_loss(const ModelCheckpoint& m, std::span<const Encoded> batch, LossScope scope) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Encoded& e : batch) {
    const auto targets = detail::training_targets(e, scope);
    if (targets.empty()) continue;
    nn::Activations<float> act;
    nn::forward(m.params, m.config, nn::embed(m.params, std::span<const TokenId>(e.ids)), act);
    total += nn::nll<float>(m.params, act, targets);
    count += targets.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Batch order for an epoch: a seeded permutation of the data indices.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1));
  rng.shuffle(order);
  return order;
}

using ProgressFn = std::function<void(int epoch, long step, double loss)>;

inline TrainResult train(ModelCheckpoint model, std::span<const Encoded> data, const TrainConfig& cfg,
                         const ProgressFn& progress = {}) {
  cfg.check();
  for (const Encoded& e : data) {
    if (e.ids.size() > static_cast<std::size_t>(model.config.context))
      throw TruncationError("training sequence of " + std::to_string(e.ids.size()) +
                            " tokens exceeds context");
    for (TokenId t : e.ids)
      if (t < 0 || t >= model.config.vocab) throw InputError("token id out of model vocabulary");
  }

  Params<float> grads = Params<float>::zeros(model.config);
  Params<float> m1 = Params<float>::zeros(model.config);
  Params<float> m2 = Params<float>::zeros(model.config);
  auto pt = model.params.tensors();
  auto gt = grads.tensors();
  auto t1 = m1.tensors();
  auto t2 = m2.tensors();

  TrainLog log;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    double epoch_total = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::size_t count = 0;
      std::vector<std::vector<nn::Target>> targets;
      for (std::size_t i = start; i < stop; ++i) {
        targets.push_back(detail::training_targets(data[order[i]], cfg.scope));
        count += targets.back().size();
      }
      if (count == 0) continue;
      for (auto& g : gt) std::fill(g.data, g.data + g.size(), 0.0f);
      const float scale = 1.0f / static_cast<float>(count);
      double batch_total = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const Encoded& e = data[order[i]];
        const auto& tg = targets[i - start];
        if (tg.empty()) continue;
        const std::span<const TokenId> ids(e.ids);
        nn::Activations<float> act;
        nn::forward(model.params, model.config, nn::embed(model.params, ids), act);
        Matrix<float> dy;
        batch_total += nn::nll<float>(model.params, act, tg, &dy, &grads.tok_emb, scale);
        Matrix<float> dx0;
        nn::backward<float>(model.params, model.config, act, dy, &grads, &dx0);
        nn::accumulate_embedding_grads(dx0, ids, grads);
      }
      double norm2 = 0.0;
      for (const auto& g : gt)
        for (Eigen::Index k = 0; k < g.size(); ++k) norm2 += double(g.data[k]) * g.data[k];
      const double gnorm = std::sqrt(norm2);
      if (!std::isfinite(batch_total) || !std::isfinite(gnorm)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << " batch " << start / cfg.batch_size
           << " (loss " << batch_total << ", gradient norm " << gnorm << ")";
        throw TrainError(os.str());
      }
      if (step == 0) log.first_batch_loss = batch_total / static_cast<double>(count);
      const double clip = (cfg.grad_clip > 0 && gnorm > cfg.grad_clip) ? cfg.grad_clip / gnorm : 1.0;

      ++step;
      const double lr = cfg.rate_at(step - 1);
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
      const float step_size = static_cast<float>(lr / bc1);
      const float inv_bc2 = static_cast<float>(1.0 / bc2);
      const float eps = static_cast<float>(cfg.adam_eps);
      const float fclip = static_cast<float>(clip);
      for (std::size_t ti = 0; ti < pt.size(); ++ti) {
        float* w = pt[ti].data;
        const float decay = (pt[ti].rows > 1 && pt[ti].cols > 1)
                                ? 1.0f - static_cast<float>(lr * cfg.weight_decay)
                                : 1.0f;
        const float* g = gt[ti].data;
        float* a = t1[ti].data;
        float* b = t2[ti].data;
        for (Eigen::Index k = 0; k < pt[ti].size(); ++k) {
          const float gk = g[k] * fclip;
          a[k] = b1 * a[k] + (1.0f - b1) * gk;
          b[k] = b2 * b[k] + (1.0f - b2) * gk * gk;
          w[k] = decay * w[k] - step_size * a[k] / (std::sqrt(b[k] * inv_bc2) + eps);
        }
      }
      epoch_total += batch_total;
      epoch_count += count;
      if (progress) progress(epoch, step, batch_total / static_cast<double>(count));
    }
    log.epoch_loss.push_back(epoch_count ? epoch_total / static_cast<double>(epoch_count) : 0.0);
  }
  log.steps = step;

  model.fingerprint.epochs = cfg.epochs;
  model.fingerprint.seed = cfg.seed;
  const std::size_t replay = std::min<std::size_t>(data.size(), cfg.batch_size);
  model.fingerprint.replay_batch = replay;
  model.fingerprint.replay_loss = batch_loss(model, data.subspan(0, replay), cfg.scope);
  return {std::move(model), std::move(log)};
}

}  // namespace mtbd
