#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace ddlm {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using RowMap = Eigen::Map<RowVec<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowVec<T>>;

struct ModelConfig {
  int layers = 2;
  int model_dim = 64;
  int heads = 4;
  int ff_dim = 256;
  int vocab_size = 27;
  int max_len = kDefaultMaxLen;
  TokenId mask_id = Vocab::kMask;
  // Only sinusoidal timestep conditioning is implemented.
  std::string time_embed = "sinusoidal";

  void validate() const {
    if (layers < 1 || model_dim < 2 || heads < 1 || ff_dim < 1 || vocab_size < 2 || max_len < 1) {
      throw ConfigError("model: all sizes must be positive");
    }
    if (model_dim % heads != 0) throw ConfigError("model: model_dim must be divisible by heads");
    if (model_dim % 2 != 0) throw ConfigError("model: model_dim must be even");
    if (mask_id < 0 || mask_id >= vocab_size) throw ConfigError("model: mask_id out of range");
    if (time_embed != "sinusoidal") throw ConfigError("model: unsupported time_embed '" + time_embed + "'");
  }

  int head_dim() const { return model_dim / heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerLayout {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
};

struct TensorInfo {
  std::string name;
  std::size_t offset;
  std::size_t rows;
  std::size_t cols;
};

// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0, total = 0;
  std::vector<LayerLayout> layers;
  std::vector<TensorInfo> tensors;

  static ParamLayout make(const ModelConfig& c) {
    ParamLayout p;
    const auto D = static_cast<std::size_t>(c.model_dim);
    const auto F = static_cast<std::size_t>(c.ff_dim);
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const auto L = static_cast<std::size_t>(c.max_len);
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      const std::size_t off = p.total;
      p.tensors.push_back({name, off, rows, cols});
      p.total += rows * cols;
      return off;
    };
    p.tok_emb = add("tok_emb", V, D);
    p.pos_emb = add("pos_emb", L, D);
    for (int l = 0; l < c.layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      LayerLayout ll{};
      ll.ln1_g = add(pre + "ln1_g", 1, D);
      ll.ln1_b = add(pre + "ln1_b", 1, D);
      ll.w_qkv = add(pre + "w_qkv", D, 3 * D);
      ll.b_qkv = add(pre + "b_qkv", 1, 3 * D);
      ll.w_o = add(pre + "w_o", D, D);
      ll.b_o = add(pre + "b_o", 1, D);
      ll.ln2_g = add(pre + "ln2_g", 1, D);
      ll.ln2_b = add(pre + "ln2_b", 1, D);
      ll.w_ff1 = add(pre + "w_ff1", D, F);
      ll.b_ff1 = add(pre + "b_ff1", 1, F);
      ll.w_ff2 = add(pre + "w_ff2", F, D);
      ll.b_ff2 = add(pre + "b_ff2", 1, D);
      p.layers.push_back(ll);
    }
    p.lnf_g = add("lnf_g", 1, D);
    p.lnf_b = add("lnf_b", 1, D);
    p.w_out = add("w_out", D, V);
    p.b_out = add("b_out", 1, V);
    return p;
  }
};

inline std::size_t param_count(const ModelConfig& c) { return ParamLayout::make(c).total; }

// Parameter and gradient storage. Eigen picks packet or scalar code per
// element from the address, and the two round differently, so buffers that
// are mapped as matrices need a fixed alignment for reruns to match bit for
// bit.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  AlignedVector<T> values;

  Params() = default;
  explicit Params(const ModelConfig& c) : config(c), layout(ParamLayout::make(c)), values(layout.total, T(0)) {
    c.validate();
  }

  // N(0, 0.02) weights, residual projections scaled by 1/sqrt(2 * layers),
  // unit LayerNorm gains, zero biases.
  static Params init(const ModelConfig& c, std::uint64_t seed) {
    Params p(c);
    CounterRng rng(seed, 0x1A17);
    const double resid = 0.02 / std::sqrt(2.0 * c.layers);
    for (const auto& t : p.layout.tensors) {
      const bool is_gain = t.name.ends_with("_g");
      const bool is_bias = t.name.ends_with("_b") || t.name.starts_with("b_") ||
                           t.name.find(".b_") != std::string::npos;
      const bool is_resid = t.name.ends_with("w_o") || t.name.ends_with("w_ff2");
      for (std::size_t i = 0; i < t.rows * t.cols; ++i) {
        T v;
        if (is_gain) {
          v = T(1);
        } else if (is_bias) {
          v = T(0);
        } else {
          v = static_cast<T>(rng.normal() * (is_resid ? resid : 0.02));
        }
        p.values[t.offset + i] = v;
      }
    }
    return p;
  }

  std::size_t size() const { return values.size(); }

  ConstMatMap<T> mat(std::size_t off, int rows, int cols) const { return {values.data() + off, rows, cols}; }
  ConstRowMap<T> vec(std::size_t off, int n) const { return {values.data() + off, n}; }

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.config = config;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

using DenoiserParams = Params<float>;

namespace detail {

inline constexpr double kLnEps = 1e-5;

// Same scale as the initial token embeddings; at unit amplitude the shared
// time vector swamps token and position identity after the first LayerNorm.
inline constexpr double kTimeEmbedScale = 0.02;

template <class T>
void time_embedding(double t, int dim, T* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    const double arg = 1000.0 * t * freq;
    out[i] = static_cast<T>(kTimeEmbedScale * std::sin(arg));
    out[half + i] = static_cast<T>(kTimeEmbedScale * std::cos(arg));
  }
}

// Row-wise LayerNorm: xhat = (x - mean) * rstd, y = xhat * g + b.
template <class T>
void layernorm(const Mat<T>& x, const ConstRowMap<T>& g, const ConstRowMap<T>& b, Mat<T>& xhat,
               std::vector<T>& rstd, Mat<T>& y) {
  const auto n = x.rows();
  const auto d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

template <class T>
void layernorm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd, const ConstRowMap<T>& g,
                        RowMap<T> dg, RowMap<T> db, Mat<T>& dx_accum) {
  const auto d = static_cast<T>(xhat.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    dg += dy.row(i).cwiseProduct(xhat.row(i));
    db += dy.row(i);
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    const T mean_dxhat = dxhat.sum() / d;
    const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).sum() / d;
    dx_accum.row(i).array() +=
        rstd[static_cast<std::size_t>(i)] *
        (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
}

// GELU, tanh approximation, evaluated with vectorized array ops.
template <class T>
Mat<T> gelu(const Mat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
  const auto a = x.array();
  return (T(0.5) * a * (T(1) + (c * (a + T(0.044715) * a.cube())).tanh())).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const auto a = x.array();
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
      (c * (a + T(0.044715) * a.cube())).tanh();
  return (T(0.5) * (T(1) + th) + T(0.5) * a * (T(1) - th.square()) * c * (T(1) + T(3) * T(0.044715) * a.square()))
      .matrix();
}

template <class T>
void suppress_mask_and_check(Mat<T>& logits, TokenId mask_id) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (j == mask_id) continue;
      if (!std::isfinite(logits(i, j))) throw NonFiniteActivation("non-finite logit in denoiser output");
    }
    logits(i, mask_id) = -std::numeric_limits<T>::infinity();
  }
}

}  // namespace detail

// Activations of one recorded forward pass.
template <class T>
struct LayerTape {
  Mat<T> xhat1, h1, qkv, att, x_mid, xhat2, h2, f, a;
  std::vector<T> rstd1, rstd2;
  std::vector<Mat<T>> probs;  // per head, n x n
};

template <class T>
struct Tape {
  std::vector<TokenId> tokens;
  std::vector<int> blocks;  // empty => full bidirectional attention
  std::vector<LayerTape<T>> layers;
  Mat<T> x_fin, xhatf, hf, logits;
  std::vector<T> rstdf;

  int rows() const { return static_cast<int>(tokens.size()); }
};

// Full forward over positions 0..n-1 with per-position conditioning times.
// When `blocks` is non-empty, position i attends to j iff blocks[j] <= blocks[i]
// (block-causal); otherwise attention is fully bidirectional.
template <class T>
Tape<T> forward_tape(const Params<T>& p, std::span<const TokenId> tokens, std::span<const double> times,
                     std::span<const int> blocks = {}) {
  const ModelConfig& c = p.config;
  const int n = static_cast<int>(tokens.size());
  const int D = c.model_dim;
  const int H = c.heads;
  const int hd = c.head_dim();
  if (n > c.max_len) throw CapacityExceeded("forward: sequence longer than max_len");
  if (static_cast<int>(times.size()) != n) throw std::invalid_argument("forward: times size mismatch");
  if (!blocks.empty() && static_cast<int>(blocks.size()) != n) {
    throw std::invalid_argument("forward: blocks size mismatch");
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tape<T> tape;
  tape.tokens.assign(tokens.begin(), tokens.end());
  tape.blocks.assign(blocks.begin(), blocks.end());
  const ParamLayout& L = p.layout;

  Mat<T> x(n, D);
  std::vector<T> temb(static_cast<std::size_t>(D));
  for (int i = 0; i < n; ++i) {
    const TokenId tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= c.vocab_size) throw UnknownSymbol("forward: token id out of range");
    detail::time_embedding(times[static_cast<std::size_t>(i)], D, temb.data());
    x.row(i) = p.vec(L.tok_emb + static_cast<std::size_t>(tok) * D, D) +
               p.vec(L.pos_emb + static_cast<std::size_t>(i) * D, D) + ConstRowMap<T>(temb.data(), D);
  }

  tape.layers.resize(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    const LayerLayout& ll = L.layers[static_cast<std::size_t>(l)];
    LayerTape<T>& lt = tape.layers[static_cast<std::size_t>(l)];
    detail::layernorm(x, p.vec(ll.ln1_g, D), p.vec(ll.ln1_b, D), lt.xhat1, lt.rstd1, lt.h1);
    lt.qkv.noalias() = lt.h1 * p.mat(ll.w_qkv, D, 3 * D);
    lt.qkv.rowwise() += p.vec(ll.b_qkv, 3 * D);
    lt.att.setZero(n, D);
    lt.probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      const auto q = lt.qkv.block(0, h * hd, n, hd);
      const auto k = lt.qkv.block(0, D + h * hd, n, hd);
      const auto v = lt.qkv.block(0, 2 * D + h * hd, n, hd);
      Mat<T>& P = lt.probs[static_cast<std::size_t>(h)];
      P.noalias() = (q * k.transpose()) * scale;
      for (int i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < n; ++j) {
          if (!blocks.empty() && blocks[static_cast<std::size_t>(j)] > blocks[static_cast<std::size_t>(i)]) {
            P(i, j) = -std::numeric_limits<T>::infinity();
          }
          mx = std::max(mx, P(i, j));
        }
        T sum = 0;
        for (int j = 0; j < n; ++j) {
          const T e = P(i, j) == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(P(i, j) - mx);
          P(i, j) = e;
          sum += e;
        }
        P.row(i) /= sum;
      }
      lt.att.block(0, h * hd, n, hd).noalias() = P * v;
    }
    lt.x_mid = x;
    lt.x_mid.noalias() += lt.att * p.mat(ll.w_o, D, D);
    lt.x_mid.rowwise() += p.vec(ll.b_o, D);
    detail::layernorm(lt.x_mid, p.vec(ll.ln2_g, D), p.vec(ll.ln2_b, D), lt.xhat2, lt.rstd2, lt.h2);
    lt.f.noalias() = lt.h2 * p.mat(ll.w_ff1, D, c.ff_dim);
    lt.f.rowwise() += p.vec(ll.b_ff1, c.ff_dim);
    lt.a = detail::gelu(lt.f);
    x = lt.x_mid;
    x.noalias() += lt.a * p.mat(ll.w_ff2, c.ff_dim, D);
    x.rowwise() += p.vec(ll.b_ff2, D);
  }
  tape.x_fin = x;
  detail::layernorm(x, p.vec(L.lnf_g, D), p.vec(L.lnf_b, D), tape.xhatf, tape.rstdf, tape.hf);
  tape.logits.noalias() = tape.hf * p.mat(L.w_out, D, c.vocab_size);
  tape.logits.rowwise() += p.vec(L.b_out, c.vocab_size);
  detail::suppress_mask_and_check(tape.logits, c.mask_id);
  return tape;
}

template <class T>
Tape<T> forward_tape(const Params<T>& p, std::span<const TokenId> tokens, double t,
                     std::span<const int> blocks = {}) {
  const std::vector<double> times(tokens.size(), t);
  return forward_tape(p, tokens, std::span<const double>(times), blocks);
}

// Logits [L x vocab] with the mask column at -inf.
template <class T>
Mat<T> forward(const Params<T>& p, const TokenSeq& x_t, double t) {
  return forward_tape(p, std::span<const TokenId>(x_t.ids), t).logits;
}

// Adds d(loss)/d(params) to `grad` given d(loss)/d(logits).
template <class T>
void backward(const Params<T>& p, const Tape<T>& tape, const Mat<T>& dlogits, std::span<T> grad) {
  const ModelConfig& c = p.config;
  const ParamLayout& L = p.layout;
  const int n = tape.rows();
  const int D = c.model_dim;
  const int H = c.heads;
  const int hd = c.head_dim();
  const int F = c.ff_dim;
  const int V = c.vocab_size;
  if (grad.size() != p.size()) throw std::invalid_argument("backward: gradient size mismatch");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  auto gmat = [&](std::size_t off, int r, int cc) { return MatMap<T>(grad.data() + off, r, cc); };
  auto gvec = [&](std::size_t off, int len) { return RowMap<T>(grad.data() + off, len); };

  Mat<T> dl = dlogits;
  dl.col(c.mask_id).setZero();
  gmat(L.w_out, D, V).noalias() += tape.hf.transpose() * dl;
  gvec(L.b_out, V) += dl.colwise().sum();
  const Mat<T> dhf = dl * p.mat(L.w_out, D, V).transpose();
  Mat<T> dx = Mat<T>::Zero(n, D);
  detail::layernorm_backward(dhf, tape.xhatf, tape.rstdf, p.vec(L.lnf_g, D), gvec(L.lnf_g, D), gvec(L.lnf_b, D),
                             dx);

  for (int l = c.layers - 1; l >= 0; --l) {
    const LayerLayout& ll = L.layers[static_cast<std::size_t>(l)];
    const LayerTape<T>& lt = tape.layers[static_cast<std::size_t>(l)];
    // Feed-forward branch; dx is the gradient w.r.t. the layer output.
    gmat(ll.w_ff2, F, D).noalias() += lt.a.transpose() * dx;
    gvec(ll.b_ff2, D) += dx.colwise().sum();
    Mat<T> df = dx * p.mat(ll.w_ff2, F, D).transpose();
    df.array() *= detail::gelu_grad(lt.f).array();
    gmat(ll.w_ff1, D, F).noalias() += lt.h2.transpose() * df;
    gvec(ll.b_ff1, F) += df.colwise().sum();
    const Mat<T> dh2 = df * p.mat(ll.w_ff1, D, F).transpose();
    Mat<T> dmid = dx;
    detail::layernorm_backward(dh2, lt.xhat2, lt.rstd2, p.vec(ll.ln2_g, D), gvec(ll.ln2_g, D), gvec(ll.ln2_b, D),
                               dmid);
    // Attention branch.
    gmat(ll.w_o, D, D).noalias() += lt.att.transpose() * dmid;
    gvec(ll.b_o, D) += dmid.colwise().sum();
    const Mat<T> datt = dmid * p.mat(ll.w_o, D, D).transpose();
    Mat<T> dqkv = Mat<T>::Zero(n, 3 * D);
    for (int h = 0; h < H; ++h) {
      const auto q = lt.qkv.block(0, h * hd, n, hd);
      const auto k = lt.qkv.block(0, D + h * hd, n, hd);
      const auto v = lt.qkv.block(0, 2 * D + h * hd, n, hd);
      const Mat<T>& P = lt.probs[static_cast<std::size_t>(h)];
      const auto dO = datt.block(0, h * hd, n, hd);
      dqkv.block(0, 2 * D + h * hd, n, hd).noalias() += P.transpose() * dO;
      Mat<T> dP = dO * v.transpose();
      for (int i = 0; i < n; ++i) {
        const T dot = P.row(i).dot(dP.row(i));
        dP.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
      }
      dqkv.block(0, h * hd, n, hd).noalias() += (dP * k) * scale;
      dqkv.block(0, D + h * hd, n, hd).noalias() += (dP.transpose() * q) * scale;
    }
    gmat(ll.w_qkv, D, 3 * D).noalias() += lt.h1.transpose() * dqkv;
    gvec(ll.b_qkv, 3 * D) += dqkv.colwise().sum();
    const Mat<T> dh1 = dqkv * p.mat(ll.w_qkv, D, 3 * D).transpose();
    Mat<T> din = dmid;
    detail::layernorm_backward(dh1, lt.xhat1, lt.rstd1, p.vec(ll.ln1_g, D), gvec(ll.ln1_g, D), gvec(ll.ln1_b, D),
                               din);
    dx = std::move(din);
  }
  for (int i = 0; i < n; ++i) {
    const auto tok = static_cast<std::size_t>(tape.tokens[static_cast<std::size_t>(i)]);
    gvec(L.tok_emb + tok * D, D) += dx.row(i);
    gvec(L.pos_emb + static_cast<std::size_t>(i) * D, D) += dx.row(i);
  }
}

// One weighted log-likelihood term: weight * -log softmax(logits[position] / T)[token].
struct Target {
  int position = 0;
  TokenId token = 0;
  double weight = 1.0;
};

// Sum of weighted NLL terms; fills d(loss)/d(logits) when requested.
template <class T>
double weighted_nll(const Mat<T>& logits, std::span<const Target> targets, double temperature,
                    Mat<T>* dlogits = nullptr) {
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(logits.cols()));
  for (const Target& tg : targets) {
    const auto row = logits.row(tg.position);
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < row.size(); ++j) mx = std::max(mx, static_cast<double>(row(j)) / temperature);
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      const double z = static_cast<double>(row(j)) / temperature;
      prob[static_cast<std::size_t>(j)] = std::isinf(z) ? 0.0 : std::exp(z - mx);
      sum += prob[static_cast<std::size_t>(j)];
    }
    const double logp = static_cast<double>(row(tg.token)) / temperature - mx - std::log(sum);
    total += -tg.weight * logp;
    if (dlogits) {
      for (Eigen::Index j = 0; j < row.size(); ++j) {
        const double pj = prob[static_cast<std::size_t>(j)] / sum;
        const double onehot = j == tg.token ? 1.0 : 0.0;
        (*dlogits)(tg.position, j) += static_cast<T>(tg.weight * (pj - onehot) / temperature);
      }
    }
  }
  return total;
}

// A recorded forward pass plus the scalar loss defined on its logits.
template <class T>
struct LossGraph {
  Tape<T> tape;
  std::vector<Target> targets;
  double temperature = 1.0;

  double value() const { return weighted_nll(tape.logits, std::span<const Target>(targets), temperature); }
};

template <class T>
void backward(const Params<T>& p, const LossGraph<T>& graph, std::span<T> grad) {
  Mat<T> dl;
  weighted_nll(graph.tape.logits, std::span<const Target>(graph.targets), graph.temperature, &dl);
  backward(p, graph.tape, dl, grad);
}

// Exact reverse-mode gradient of the recorded loss.
template <class T>
AlignedVector<T> backward(const Params<T>& p, const LossGraph<T>& graph) {
  AlignedVector<T> grad(p.size(), T(0));
  backward(p, graph, std::span<T>(grad));
  for (T g : grad) {
    if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient");
  }
  return grad;
}

// Keys/values of a committed prefix, per layer [capacity x model_dim].
template <class T>
struct KVCache {
  std::vector<Mat<T>> k, v;
  std::vector<double> times;  // conditioning time of each committed position
  int committed_len = 0;

  KVCache() = default;
  explicit KVCache(const ModelConfig& c) { reset(c); }

  void reset(const ModelConfig& c) {
    k.assign(static_cast<std::size_t>(c.layers), Mat<T>::Zero(c.max_len, c.model_dim));
    v.assign(static_cast<std::size_t>(c.layers), Mat<T>::Zero(c.max_len, c.model_dim));
    times.clear();
    committed_len = 0;
  }

  int capacity() const { return k.empty() ? 0 : static_cast<int>(k.front().rows()); }
};

namespace detail {

// out = x * w. Below a handful of rows, per-row matrix-vector products beat
// the packed GEMM path, whose packing cost does not shrink with the rows.
template <class T, class X, class W>
void rows_product(Mat<T>& out, const X& x, const W& w) {
  constexpr Eigen::Index kRowwiseMax = 6;
  if (x.rows() > kRowwiseMax) {
    out.noalias() = x * w;
    return;
  }
  out.resize(x.rows(), w.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r).noalias() = x.row(r) * w;
}

// Runs a block at positions [committed_len, committed_len + b) attending to
// the cached prefix and bidirectionally within the block. Writes the block's
// keys/values into `kv_out` (per layer, b x D) when given. A non-empty `rows`
// limits the last layer and the output head to those block rows; the other
// rows of the result are left at zero.
template <class T>
Mat<T> run_block(const Params<T>& p, const KVCache<T>& cache, std::span<const TokenId> block, double t,
                 std::vector<std::pair<Mat<T>, Mat<T>>>* kv_out, bool want_logits,
                 std::span<const int> rows = {}) {
  const ModelConfig& c = p.config;
  const ParamLayout& L = p.layout;
  const int b = static_cast<int>(block.size());
  const int start = cache.committed_len;
  const int D = c.model_dim;
  const int H = c.heads;
  const int hd = c.head_dim();
  if (b < 1) throw std::invalid_argument("run_block: empty block");
  if (start + b > c.max_len || start + b > cache.capacity()) {
    throw CacheOverflow("block of " + std::to_string(b) + " at offset " + std::to_string(start) +
                        " exceeds capacity " + std::to_string(c.max_len));
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  Mat<T> x(b, D);
  std::vector<T> temb(static_cast<std::size_t>(D));
  detail::time_embedding(t, D, temb.data());
  for (int r = 0; r < b; ++r) {
    const TokenId tok = block[static_cast<std::size_t>(r)];
    if (tok < 0 || tok >= c.vocab_size) throw UnknownSymbol("forward_cached: token id out of range");
    x.row(r) = p.vec(L.tok_emb + static_cast<std::size_t>(tok) * D, D) +
               p.vec(L.pos_emb + static_cast<std::size_t>(start + r) * D, D) + ConstRowMap<T>(temb.data(), D);
  }
  if (kv_out) kv_out->clear();
  Mat<T> xhat, h, qkv, qrows, att, f, tmp;
  std::vector<T> rstd;
  Mat<T> scores;
  for (int l = 0; l < c.layers; ++l) {
    const LayerLayout& ll = L.layers[static_cast<std::size_t>(l)];
    const Mat<T>& kc = cache.k[static_cast<std::size_t>(l)];
    const Mat<T>& vc = cache.v[static_cast<std::size_t>(l)];
    layernorm(x, p.vec(ll.ln1_g, D), p.vec(ll.ln1_b, D), xhat, rstd, h);
    rows_product(qkv, h, p.mat(ll.w_qkv, D, 3 * D));
    qkv.rowwise() += p.vec(ll.b_qkv, 3 * D);
    if (kv_out) kv_out->emplace_back(qkv.block(0, D, b, D), qkv.block(0, 2 * D, b, D));
    if (!want_logits && l + 1 == c.layers) return {};
    const bool gather = l + 1 == c.layers && !rows.empty();
    if (gather) {
      const std::vector<int> sel(rows.begin(), rows.end());
      qrows = qkv(sel, Eigen::seqN(0, D));
      x = Mat<T>(x(sel, Eigen::all));
    }
    const Mat<T>& qsrc = gather ? qrows : qkv;
    const int nq = static_cast<int>(x.rows());
    att.setZero(nq, D);
    scores.resize(nq, start + b);
    for (int hh = 0; hh < H; ++hh) {
      const auto q = qsrc.block(0, hh * hd, nq, hd);
      const auto kb = qkv.block(0, D + hh * hd, b, hd);
      const auto vb = qkv.block(0, 2 * D + hh * hd, b, hd);
      if (start > 0) {
        scores.leftCols(start).noalias() = (q * kc.block(0, hh * hd, start, hd).transpose()) * scale;
      }
      scores.rightCols(b).noalias() = (q * kb.transpose()) * scale;
      for (int r = 0; r < nq; ++r) {
        const T mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp().matrix();
        scores.row(r) /= scores.row(r).sum();
      }
      auto out = att.block(0, hh * hd, nq, hd);
      if (start > 0) out.noalias() += scores.leftCols(start) * vc.block(0, hh * hd, start, hd);
      out.noalias() += scores.rightCols(b) * vb;
    }
    rows_product(tmp, att, p.mat(ll.w_o, D, D));
    x += tmp;
    x.rowwise() += p.vec(ll.b_o, D);
    layernorm(x, p.vec(ll.ln2_g, D), p.vec(ll.ln2_b, D), xhat, rstd, h);
    rows_product(f, h, p.mat(ll.w_ff1, D, c.ff_dim));
    f.rowwise() += p.vec(ll.b_ff1, c.ff_dim);
    f = gelu(f);
    rows_product(tmp, f, p.mat(ll.w_ff2, c.ff_dim, D));
    x += tmp;
    x.rowwise() += p.vec(ll.b_ff2, D);
  }
  layernorm(x, p.vec(L.lnf_g, D), p.vec(L.lnf_b, D), xhat, rstd, h);
  Mat<T> logits;
  rows_product(logits, h, p.mat(L.w_out, D, c.vocab_size));
  logits.rowwise() += p.vec(L.b_out, c.vocab_size);
  suppress_mask_and_check(logits, c.mask_id);
  if (rows.empty()) return logits;
  Mat<T> full = Mat<T>::Zero(b, c.vocab_size);
  for (std::size_t i = 0; i < rows.size(); ++i) full.row(rows[i]) = logits.row(static_cast<Eigen::Index>(i));
  full.col(c.mask_id).setConstant(-std::numeric_limits<T>::infinity());
  return full;
}

}  // namespace detail

// Logits for a block placed right after the committed prefix. The cache is
// left untouched.
template <class T>
Mat<T> forward_cached(const Params<T>& p, const KVCache<T>& cache, std::span<const TokenId> block, double t) {
  return detail::run_block<T>(p, cache, block, t, nullptr, true);
}

// Same, computing logits only for the given block rows (others are zero).
template <class T>
Mat<T> forward_cached_rows(const Params<T>& p, const KVCache<T>& cache, std::span<const TokenId> block, double t,
                           std::span<const int> rows) {
  for (int r : rows) {
    if (r < 0 || r >= static_cast<int>(block.size())) throw std::out_of_range("forward_cached_rows: row out of range");
  }
  return detail::run_block<T>(p, cache, block, t, nullptr, true, rows);
}

// Appends the block's keys/values to the cache.
template <class T>
void commit_block(const Params<T>& p, KVCache<T>& cache, std::span<const TokenId> block, double t) {
  std::vector<std::pair<Mat<T>, Mat<T>>> kv;
  detail::run_block<T>(p, cache, block, t, &kv, false);
  const int b = static_cast<int>(block.size());
  for (std::size_t l = 0; l < kv.size(); ++l) {
    cache.k[l].block(cache.committed_len, 0, b, p.config.model_dim) = kv[l].first;
    cache.v[l].block(cache.committed_len, 0, b, p.config.model_dim) = kv[l].second;
  }
  cache.times.insert(cache.times.end(), static_cast<std::size_t>(b), t);
  cache.committed_len += b;
}

}  // namespace ddlm
