#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mtbd/error.hpp"
#include "mtbd/rng.hpp"
#include "mtbd/tokenizer.hpp"

namespace mtbd {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Minimum depth for experiment models: the contrast-layer candidate set is
// the eight layers below the final one.
inline constexpr int kMinExperimentLayers = 9;

enum class DepthCheck { enforce, relaxed };

struct ModelConfig {
  int layers = 12;
  int width = 128;
  int heads = 4;
  int vocab = 0;
  int context = 512;
  std::uint64_t seed = 0;

  int ffn() const { return 4 * width; }
  int head_dim() const { return width / heads; }

  void check(DepthCheck depth = DepthCheck::enforce) const {
    if (depth == DepthCheck::enforce && layers < kMinExperimentLayers)
      throw ConfigError("model needs at least " + std::to_string(kMinExperimentLayers) +
                        " layers, got " + std::to_string(layers));
    if (layers < 1) throw ConfigError("model needs at least one layer");
    if (width < 1 || heads < 1 || width % heads != 0)
      throw ConfigError("model width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (vocab < 1) throw ConfigError("model vocabulary is empty");
    if (context < 2) throw ConfigError("model context must be >= 2");
  }

  // Closed form for the pre-norm architecture with tied embeddings.
  std::size_t parameter_count() const {
    const std::size_t d = width, v = vocab, c = context, n = layers;
    return v * d + c * d + n * (12 * d * d + 13 * d) + 2 * d;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"width", c.width},     {"heads", c.heads},
          {"vocab", c.vocab},   {"context", c.context}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.context = j.at("context").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

template <typename T>
struct TensorRef {
  std::string name;
  T* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

template <typename T>
struct BlockParams {
  RowVector<T> ln1_g, ln1_b;
  Matrix<T> w_qkv;  // d x 3d
  RowVector<T> b_qkv;
  Matrix<T> w_out;  // d x d
  RowVector<T> b_out;
  RowVector<T> ln2_g, ln2_b;
  Matrix<T> w_fc;  // d x 4d
  RowVector<T> b_fc;
  Matrix<T> w_proj;  // 4d x d
  RowVector<T> b_proj;
};

template <typename T>
struct Params {
  Matrix<T> tok_emb;  // V x d, tied with the output head
  Matrix<T> pos_emb;  // C x d
  std::vector<BlockParams<T>> blocks;
  RowVector<T> lnf_g, lnf_b;

  static Params zeros(const ModelConfig& c) {
    Params p;
    const int d = c.width;
    p.tok_emb = Matrix<T>::Zero(c.vocab, d);
    p.pos_emb = Matrix<T>::Zero(c.context, d);
    p.blocks.resize(c.layers);
    for (auto& b : p.blocks) {
      b.ln1_g = RowVector<T>::Zero(d);
      b.ln1_b = RowVector<T>::Zero(d);
      b.w_qkv = Matrix<T>::Zero(d, 3 * d);
      b.b_qkv = RowVector<T>::Zero(3 * d);
      b.w_out = Matrix<T>::Zero(d, d);
      b.b_out = RowVector<T>::Zero(d);
      b.ln2_g = RowVector<T>::Zero(d);
      b.ln2_b = RowVector<T>::Zero(d);
      b.w_fc = Matrix<T>::Zero(d, c.ffn());
      b.b_fc = RowVector<T>::Zero(c.ffn());
      b.w_proj = Matrix<T>::Zero(c.ffn(), d);
      b.b_proj = RowVector<T>::Zero(d);
    }
    p.lnf_g = RowVector<T>::Zero(d);
    p.lnf_b = RowVector<T>::Zero(d);
    return p;
  }

  // Stable order; checkpoints and the optimizer rely on it.
  std::vector<TensorRef<T>> tensors() {
    std::vector<TensorRef<T>> out;
    auto add = [&](std::string name, auto& m) {
      out.push_back({std::move(name), m.data(), m.rows(), m.cols()});
    };
    add("tok_emb", tok_emb);
    add("pos_emb", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = blocks[i];
      add(p + "ln1_g", b.ln1_g);
      add(p + "ln1_b", b.ln1_b);
      add(p + "w_qkv", b.w_qkv);
      add(p + "b_qkv", b.b_qkv);
      add(p + "w_out", b.w_out);
      add(p + "b_out", b.b_out);
      add(p + "ln2_g", b.ln2_g);
      add(p + "ln2_b", b.ln2_b);
      add(p + "w_fc", b.w_fc);
      add(p + "b_fc", b.b_fc);
      add(p + "w_proj", b.w_proj);
      add(p + "b_proj", b.b_proj);
    }
    add("lnf_g", lnf_g);
    add("lnf_b", lnf_b);
    return out;
  }

  std::vector<TensorRef<const T>> tensors() const {
    std::vector<TensorRef<const T>> out;
    for (auto& t : const_cast<Params*>(this)->tensors())
      out.push_back({t.name, t.data, t.rows, t.cols});
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += static_cast<std::size_t>(t.size());
    return n;
  }

  template <typename U>
  Params<U> cast() const {
    Params<U> p;
    p.tok_emb = tok_emb.template cast<U>();
    p.pos_emb = pos_emb.template cast<U>();
    p.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& s = blocks[i];
      auto& b = p.blocks[i];
      b.ln1_g = s.ln1_g.template cast<U>();
      b.ln1_b = s.ln1_b.template cast<U>();
      b.w_qkv = s.w_qkv.template cast<U>();
      b.b_qkv = s.b_qkv.template cast<U>();
      b.w_out = s.w_out.template cast<U>();
      b.b_out = s.b_out.template cast<U>();
      b.ln2_g = s.ln2_g.template cast<U>();
      b.ln2_b = s.ln2_b.template cast<U>();
      b.w_fc = s.w_fc.template cast<U>();
      b.b_fc = s.b_fc.template cast<U>();
      b.w_proj = s.w_proj.template cast<U>();
      b.b_proj = s.b_proj.template cast<U>();
    }
    p.lnf_g = lnf_g.template cast<U>();
    p.lnf_b = lnf_b.template cast<U>();
    return p;
  }
};

struct TrainingFingerprint {
  std::string corpus_hash;
  int epochs = 0;
  std::uint64_t seed = 0;
  // Mean masked loss of the trained model on its first training batch.
  double replay_loss = 0.0;
  std::size_t replay_batch = 0;
  friend bool operator==(const TrainingFingerprint&, const TrainingFingerprint&) = default;
};

template <typename T>
struct Model {
  ModelConfig config;
  Params<T> params;
  TrainingFingerprint fingerprint;

  template <typename U>
  Model<U> cast() const {
    return {config, params.template cast<U>(), fingerprint};
  }
};

using ModelCheckpoint = Model<float>;

template <typename T = float>
Model<T> init_model(const ModelConfig& config, DepthCheck depth = DepthCheck::enforce) {
  config.check(depth);
  Model<T> m{config, Params<T>::zeros(config), {}};
  Rng rng(config.seed);
  const double std_w = 0.02;
  const double std_proj = 0.02 / std::sqrt(2.0 * config.layers);
  auto fill = [&](auto& mat, double s) {
    for (Eigen::Index i = 0; i < mat.size(); ++i) mat.data()[i] = static_cast<T>(rng.normal() * s);
  };
  fill(m.params.tok_emb, std_w);
  fill(m.params.pos_emb, 0.01);
  for (auto& b : m.params.blocks) {
    b.ln1_g.setOnes();
    b.ln2_g.setOnes();
    fill(b.w_qkv, std_w);
    fill(b.w_out, std_proj);
    fill(b.w_fc, std_w);
    fill(b.w_proj, std_proj);
  }
  m.params.lnf_g.setOnes();
  return m;
}

// ---------------------------------------------------------------------------
// Full-sequence forward and backward.

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  ColVector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const RowVector<T>& g, const RowVector<T>& b,
                     LayerNormCache<T>& cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  Matrix<T> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g) + b;
  }
  return y;
}

template <typename T>
RowVector<T> layer_norm_row(const RowVector<T>& x, const RowVector<T>& g, const RowVector<T>& b) {
  const T mean = x.mean();
  const T var = (x.array() - mean).square().mean();
  const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
  return ((x.array() - mean) * rstd).matrix().cwiseProduct(g) + b;
}

// Returns dx; accumulates dg, db when given.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache,
                              const RowVector<T>& g, RowVector<T>* dg, RowVector<T>* db) {
  if (dg) *dg += dy.cwiseProduct(cache.xhat).colwise().sum();
  if (db) *db += dy.colwise().sum();
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVector<T> dxhat = dy.row(i).cwiseProduct(g);
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.rstd(i) * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

template <typename T>
inline T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T th = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + th) +
         T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  Matrix<T> a;    // ln1 output
  Matrix<T> qkv;  // n x 3d
  std::vector<Matrix<T>> probs;
  Matrix<T> att;  // concatenated head outputs, n x d
  LayerNormCache<T> ln2;
  Matrix<T> m;       // ln2 output
  Matrix<T> fc_pre;  // n x 4d
  Matrix<T> fc_act;
};

template <typename T>
struct Activations {
  std::vector<Matrix<T>> residual;  // residual[0] = embeddings, residual[j+1] = after block j
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> lnf;
  Matrix<T> y;  // final-normalized states, n x d
};

template <typename T>
Matrix<T> embed(const Params<T>& p, std::span<const TokenId> ids) {
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  Matrix<T> x(n, p.tok_emb.cols());
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = p.tok_emb.row(ids[i]) + p.pos_emb.row(i);
  return x;
}

template <typename T>
void forward(const Params<T>& p, const ModelConfig& cfg, Matrix<T> x0, Activations<T>& act) {
  const Eigen::Index n = x0.rows();
  const int d = cfg.width, hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(hd));
  act.residual.assign(1, std::move(x0));
  act.blocks.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    const BlockParams<T>& bp = p.blocks[l];
    BlockCache<T>& c = act.blocks[l];
    const Matrix<T>& x = act.residual.back();
    c.a = layer_norm(x, bp.ln1_g, bp.ln1_b, c.ln1);
    c.qkv.noalias() = c.a * bp.w_qkv;
    c.qkv.rowwise() += bp.b_qkv;
    c.att.resize(n, d);
    c.probs.resize(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(d + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
      Matrix<T>& P = c.probs[h];
      P.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        T mx = P(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, P(i, j));
        T sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          sum += P(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < n; ++j) P(i, j) = 0;
      }
      c.att.middleCols(h * hd, hd).noalias() = P * v;
    }
    Matrix<T> hres = x;
    hres.noalias() += c.att * bp.w_out;
    hres.rowwise() += bp.b_out;
    c.m = layer_norm(hres, bp.ln2_g, bp.ln2_b, c.ln2);
    c.fc_pre.noalias() = c.m * bp.w_fc;
    c.fc_pre.rowwise() += bp.b_fc;
    c.fc_act = c.fc_pre.unaryExpr([](T v) { return gelu(v); });
    Matrix<T> out = hres;
    out.noalias() += c.fc_act * bp.w_proj;
    out.rowwise() += bp.b_proj;
    act.residual.push_back(std::move(out));
  }
  act.y = layer_norm(act.residual.back(), p.lnf_g, p.lnf_b, act.lnf);
}

// A prediction target: state row `row` should predict token `token`.
struct Target {
  Eigen::Index row;
  TokenId token;
};

// Summed negative log-likelihood over targets. When dy is given it receives
// d(loss)/d(y) scaled by `grad_scale`, and the tied-embedding part of the
// output-head gradient is added to d_tok_emb.
template <typename T>
double nll(const Params<T>& p, const Activations<T>& act, std::span<const Target> targets,
           Matrix<T>* dy = nullptr, Matrix<T>* d_tok_emb = nullptr, T grad_scale = T(1)) {
  const Eigen::Index k = static_cast<Eigen::Index>(targets.size());
  if (k == 0) return 0.0;
  Matrix<T> ysel(k, act.y.cols());
  for (Eigen::Index i = 0; i < k; ++i) ysel.row(i) = act.y.row(targets[i].row);
  Matrix<T> logits;
  logits.noalias() = ysel * p.tok_emb.transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const T mx = logits.row(i).maxCoeff();
    logits.row(i).array() -= mx;
    const T lse = std::log(logits.row(i).array().exp().sum());
    loss += static_cast<double>(lse - logits(i, targets[i].token));
    if (dy) {
      logits.row(i) = (logits.row(i).array() - lse).exp();
      logits(i, targets[i].token) -= T(1);
      logits.row(i) *= grad_scale;
    }
  }
  if (dy) {
    if (dy->rows() != act.y.rows() || dy->cols() != act.y.cols())
      *dy = Matrix<T>::Zero(act.y.rows(), act.y.cols());
    const Matrix<T> dsel = logits * p.tok_emb;
    for (Eigen::Index i = 0; i < k; ++i) dy->row(targets[i].row) += dsel.row(i);
    if (d_tok_emb) d_tok_emb->noalias() += logits.transpose() * ysel;
  }
  return loss;
}

// Backpropagates dy through the network. Parameter gradients are accumulated
// into grads when non-null; the gradient w.r.t. the embedded input is written
// to dx0 when non-null.
template <typename T>
void backward(const Params<T>& p, const ModelConfig& cfg, const Activations<T>& act,
              const Matrix<T>& dy, Params<T>* grads, Matrix<T>* dx0) {
  const int d = cfg.width, hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(hd));
  const Eigen::Index n = dy.rows();
  Matrix<T> dx = layer_norm_backward(dy, act.lnf, p.lnf_g, grads ? &grads->lnf_g : nullptr,
                                     grads ? &grads->lnf_b : nullptr);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const BlockParams<T>& bp = p.blocks[l];
    const BlockCache<T>& c = act.blocks[l];
    BlockParams<T>* gb = grads ? &grads->blocks[l] : nullptr;

    // MLP
    if (gb) {
      gb->w_proj.noalias() += c.fc_act.transpose() * dx;
      gb->b_proj += dx.colwise().sum();
    }
    Matrix<T> dfc = dx * bp.w_proj.transpose();
    dfc = dfc.cwiseProduct(c.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }));
    if (gb) {
      gb->w_fc.noalias() += c.m.transpose() * dfc;
      gb->b_fc += dfc.colwise().sum();
    }
    const Matrix<T> dm = dfc * bp.w_fc.transpose();
    Matrix<T> dh = dx + layer_norm_backward(dm, c.ln2, bp.ln2_g, gb ? &gb->ln2_g : nullptr,
                                            gb ? &gb->ln2_b : nullptr);

    // Attention
    if (gb) {
      gb->w_out.noalias() += c.att.transpose() * dh;
      gb->b_out += dh.colwise().sum();
    }
    const Matrix<T> datt = dh * bp.w_out.transpose();
    Matrix<T> dqkv = Matrix<T>::Zero(n, 3 * d);
    for (int h = 0; h < cfg.heads; ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(d + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
      const Matrix<T>& P = c.probs[h];
      const auto dout = datt.middleCols(h * hd, hd);
      Matrix<T> dP = dout * v.transpose();
      dqkv.middleCols(2 * d + h * hd, hd).noalias() = P.transpose() * dout;
      for (Eigen::Index i = 0; i < n; ++i) {
        const T dot = P.row(i).dot(dP.row(i));
        dP.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
      }
      dqkv.middleCols(h * hd, hd).noalias() = (dP * k) * scale;
      dqkv.middleCols(d + h * hd, hd).noalias() = (dP.transpose() * q) * scale;
    }
    if (gb) {
      gb->w_qkv.noalias() += c.a.transpose() * dqkv;
      gb->b_qkv += dqkv.colwise().sum();
    }
    const Matrix<T> da = dqkv * bp.w_qkv.transpose();
    dx = dh + layer_norm_backward(da, c.ln1, bp.ln1_g, gb ? &gb->ln1_g : nullptr,
                                  gb ? &gb->ln1_b : nullptr);
  }
  if (dx0) *dx0 = dx;
}

template <typename T>
void accumulate_embedding_grads(const Matrix<T>& dx0, std::span<const TokenId> ids,
                                Params<T>& grads) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    grads.tok_emb.row(ids[i]) += dx0.row(r);
    grads.pos_emb.row(r) += dx0.row(r);
  }
}

template <typename T>
RowVector<T> softmax(const RowVector<T>& logits) {
  RowVector<T> p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Incremental inference with a key/value cache. Every next-token distribution
// the library reports (including the per-layer readout) comes from here.

template <typename T>
class InferenceSession {
 public:
  explicit InferenceSession(const Model<T>& model)
      : model_(&model),
        keys_(model.config.layers, Matrix<T>(model.config.context, model.config.width)),
        values_(model.config.layers, Matrix<T>(model.config.context, model.config.width)),
        states_(model.config.layers, model.config.width) {}

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return static_cast<std::size_t>(model_->config.context); }
  const Model<T>& model() const { return *model_; }

  void feed(TokenId token) {
    const ModelConfig& cfg = model_->config;
    const Params<T>& p = model_->params;
    if (length_ >= capacity())
      throw TruncationError("sequence exceeds context length " + std::to_string(cfg.context));
    if (token < 0 || token >= cfg.vocab) throw InputError("token id out of range");
    const int d = cfg.width, hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(T(hd));
    const auto pos = static_cast<Eigen::Index>(length_);
    RowVector<T> x = p.tok_emb.row(token) + p.pos_emb.row(pos);
    RowVector<T> scores(pos + 1);
    RowVector<T> att(d);
    for (int l = 0; l < cfg.layers; ++l) {
      const BlockParams<T>& bp = p.blocks[l];
      const RowVector<T> a = nn::layer_norm_row(x, bp.ln1_g, bp.ln1_b);
      RowVector<T> qkv = a * bp.w_qkv;
      qkv += bp.b_qkv;
      keys_[l].row(pos) = qkv.segment(d, d);
      values_[l].row(pos) = qkv.segment(2 * d, d);
      for (int h = 0; h < cfg.heads; ++h) {
        const auto q = qkv.segment(h * hd, hd);
        for (Eigen::Index j = 0; j <= pos; ++j)
          scores(j) = q.dot(keys_[l].row(j).segment(h * hd, hd)) * scale;
        const T mx = scores.maxCoeff();
        scores = (scores.array() - mx).exp();
        scores /= scores.sum();
        att.segment(h * hd, hd) =
            scores * values_[l].block(0, h * hd, pos + 1, hd);
      }
      RowVector<T> hres = x + att * bp.w_out;
      hres += bp.b_out;
      const RowVector<T> m = nn::layer_norm_row(hres, bp.ln2_g, bp.ln2_b);
      RowVector<T> fc = m * bp.w_fc;
      fc += bp.b_fc;
      fc = fc.unaryExpr([](T v) { return nn::gelu(v); });
      x = hres + fc * bp.w_proj;
      x += bp.b_proj;
      states_.row(l) = x;
    }
    ++length_;
  }

  void feed(std::span<const TokenId> tokens) {
    for (TokenId t : tokens) feed(t);
  }

  // Residual-stream state after block `layer` at the last fed position.
  RowVector<T> state(int layer) const { return states_.row(layer); }

  // Logit-lens readout: final normalization and the shared head applied to
  // the layer's residual state.
  RowVector<T> layer_distribution(int layer) const {
    const Params<T>& p = model_->params;
    const RowVector<T> y = nn::layer_norm_row(RowVector<T>(states_.row(layer)), p.lnf_g, p.lnf_b);
    return nn::softmax<T>(y * p.tok_emb.transpose());
  }

  RowVector<T> next_distribution() const { return layer_distribution(model_->config.layers - 1); }

 private:
  const Model<T>* model_;
  std::vector<Matrix<T>> keys_;
  std::vector<Matrix<T>> values_;
  Matrix<T> states_;
  std::size_t length_ = 0;
};

// q_0 .. q_{N-1} for the next token after `ids`; q_{N-1} is the model output.
template <typename T>
std::vector<RowVector<T>> forward_all_layers(const Model<T>& model, std::span<const TokenId> ids) {
  if (ids.empty()) throw InputError("forward_all_layers needs at least one token");
  if (ids.size() > static_cast<std::size_t>(model.config.context))
    throw TruncationError("input of " + std::to_string(ids.size()) + " tokens exceeds context");
  InferenceSession<T> s(model);
  s.feed(ids);
  std::vector<RowVector<T>> out;
  for (int l = 0; l < model.config.layers; ++l) out.push_back(s.layer_distribution(l));
  return out;
}

template <typename T>
RowVector<T> next_token_distribution(const Model<T>& model, std::span<const TokenId> ids) {
  if (ids.empty()) throw InputError("next_token_distribution needs at least one token");
  InferenceSession<T> s(model);
  s.feed(ids);
  return s.next_distribution();
}

template <typename T>
RowVector<T> final_hidden(const Model<T>& model, std::span<const TokenId> ids) {
  if (ids.empty()) throw InputError("final_hidden needs at least one token");
  InferenceSession<T> s(model);
  s.feed(ids);
  return s.state(model.config.layers - 1);
}

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

namespace detail {

inline std::vector<nn::Target> span_targets(std::span<const TokenId> ids, Span span) {
  std::vector<nn::Target> t;
  for (std::size_t i = span.begin; i < span.end; ++i)
    t.push_back({static_cast<Eigen::Index>(i - 1), ids[i]});
  return t;
}

inline void check_span(std::span<const TokenId> ids, Span span, int context) {
  if (span.empty()) throw InputError("empty target span");
  if (span.begin < 1 || span.end > ids.size())
    throw InputError("target span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) +
                     ") outside predictable range of " + std::to_string(ids.size()) + " tokens");
  if (ids.size() > static_cast<std::size_t>(context))
    throw TruncationError("input of " + std::to_string(ids.size()) + " tokens exceeds context");
}

}  // namespace detail

// Summed NLL of ids[span] under the model, each token predicted from its prefix.
template <typename T>
double sequence_nll(const Model<T>& model, std::span<const TokenId> ids, Span span) {
  detail::check_span(ids, span, model.config.context);
  nn::Activations<T> act;
  nn::forward(model.params, model.config,
              nn::embed(model.params, ids.subspan(0, span.end)), act);
  const auto targets = detail::span_targets(ids, span);
  return nn::nll<T>(model.params, act, targets);
}

// Same as sequence_nll but starting from explicit input embeddings.
template <typename T>
double sequence_nll_from_embeddings(const Model<T>& model, const Matrix<T>& x0,
                                    std::span<const TokenId> ids, Span span) {
  nn::Activations<T> act;
  nn::forward(model.params, model.config, x0, act);
  const auto targets = detail::span_targets(ids, span);
  return nn::nll<T>(model.params, act, targets);
}

template <typename T>
double perplexity(const Model<T>& model, std::span<const TokenId> ids, Span span) {
  const double nll = sequence_nll(model, ids, span);
  return std::exp(nll / static_cast<double>(span.size()));
}

template <typename T>
struct InputGradient {
  double loss = 0.0;
  // grads[i][v] = d loss / d onehot(positions[i])[v]
  std::vector<RowVector<T>> grads;
};

template <typename T>
InputGradient<T> loss_and_input_grad(const Model<T>& model, std::span<const TokenId> ids,
                                     Span target_span, std::span<const std::size_t> positions) {
  detail::check_span(ids, target_span, model.config.context);
  for (std::size_t pos : positions)
    if (pos >= target_span.begin)
      throw InputError("gradient position " + std::to_string(pos) +
                       " overlaps or follows the target span starting at " +
                       std::to_string(target_span.begin));
  const auto prefix = ids.subspan(0, target_span.end);
  nn::Activations<T> act;
  nn::forward(model.params, model.config, nn::embed(model.params, prefix), act);
  const auto targets = detail::span_targets(ids, target_span);
  Matrix<T> dy;
  InputGradient<T> out;
  out.loss = nn::nll<T>(model.params, act, targets, &dy);
  Matrix<T> dx0;
  nn::backward<T>(model.params, model.config, act, dy, nullptr, &dx0);
  for (std::size_t pos : positions)
    out.grads.push_back(dx0.row(static_cast<Eigen::Index>(pos)) * model.params.tok_emb.transpose());
  return out;
}

}  // namespace mtbd
