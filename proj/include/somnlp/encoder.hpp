#pragma once

// Compact post-layer-norm transformer encoder with a tied MLM head.
//
// All math is templated on the scalar type: training runs in float,
// gradient verification instantiates the same code in double. Layer-norm
// statistics, softmax normalizers and the loss accumulate in double.

#include <cmath>
#include <numbers>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "somnlp/error.hpp"
#include "somnlp/mlm_data.hpp"
#include "somnlp/rng.hpp"

namespace somnlp::model {

using tokenizer::TokenId;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::size_t vocab_size = 1000;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff = 512;
  std::size_t max_positions = 128;
  std::size_t type_vocab = 2;
  double dropout = 0.1;
  double ln_eps = 1e-12;

  static ModelConfig desk(std::size_t vocab) { return {vocab, 128, 2, 2, 512, 128, 2, 0.1, 1e-12}; }
  static ModelConfig tiny(std::size_t vocab) { return {vocab, 8, 1, 2, 16, 16, 2, 0.0, 1e-12}; }
  /// 126M-parameter shape (10 layers, 6 heads, 768 hidden, 70k vocabulary). Never trained in tests.
  static ModelConfig production(std::size_t vocab = 70000) { return {vocab, 768, 10, 6, 3072, 512, 2, 0.1, 1e-12}; }

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(tokenizer::kNumSpecials))
      throw ConfigError("model", "vocab_size must exceed the special-token count");
    if (hidden == 0 || layers == 0 || heads == 0 || ff == 0 || max_positions < 3 || type_vocab == 0)
      throw ConfigError("model", "dimensions must be positive (max_positions >= 3)");
    if (hidden % heads != 0)
      throw ConfigError("model", "hidden size " + std::to_string(hidden) + " is not divisible by " +
                                     std::to_string(heads) + " heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model", "dropout must lie in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["ff"] = c.ff;
  j["max_positions"] = c.max_positions;
  j["type_vocab"] = c.type_vocab;
  j["dropout"] = c.dropout;
  j["ln_eps"] = c.ln_eps;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ff = j.at("ff").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.type_vocab = j.value("type_vocab", std::size_t{2});
  c.dropout = j.at("dropout").get<double>();
  c.ln_eps = j.value("ln_eps", 1e-12);
  return c;
}

// ------------------------------------------------------------ parameters

template <typename T>
struct LayerParams {
  Mat<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  Mat<T> ln1_g, ln1_b;
  Mat<T> ff1_w, ff1_b, ff2_w, ff2_b;
  Mat<T> ln2_g, ln2_b;
};

template <typename P>
auto named_tensors(P& p);

template <typename T>
struct EncoderParams {
  using Scalar = T;
  Mat<T> tok_emb, pos_emb, type_emb, emb_ln_g, emb_ln_b;
  std::vector<LayerParams<T>> layers;
  Mat<T> mlm_w, mlm_b, mlm_ln_g, mlm_ln_b, mlm_out_b;

  /// All-zero tensors with the shapes implied by `cfg`.
  static EncoderParams zeros(const ModelConfig& cfg) {
    const auto d = static_cast<Eigen::Index>(cfg.hidden), f = static_cast<Eigen::Index>(cfg.ff);
    const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
    auto z = [](Eigen::Index r, Eigen::Index c) { return Mat<T>::Zero(r, c); };
    EncoderParams p;
    p.tok_emb = z(v, d);
    p.pos_emb = z(static_cast<Eigen::Index>(cfg.max_positions), d);
    p.type_emb = z(static_cast<Eigen::Index>(cfg.type_vocab), d);
    p.emb_ln_g = z(1, d);
    p.emb_ln_b = z(1, d);
    p.layers.resize(cfg.layers);
    for (auto& l : p.layers) {
      l.q_w = z(d, d), l.k_w = z(d, d), l.v_w = z(d, d), l.o_w = z(d, d);
      l.q_b = z(1, d), l.k_b = z(1, d), l.v_b = z(1, d), l.o_b = z(1, d);
      l.ln1_g = z(1, d), l.ln1_b = z(1, d), l.ln2_g = z(1, d), l.ln2_b = z(1, d);
      l.ff1_w = z(d, f), l.ff1_b = z(1, f), l.ff2_w = z(f, d), l.ff2_b = z(1, d);
    }
    p.mlm_w = z(d, d);
    p.mlm_b = z(1, d);
    p.mlm_ln_g = z(1, d);
    p.mlm_ln_b = z(1, d);
    p.mlm_out_b = z(1, v);
    return p;
  }

  template <typename U>
  EncoderParams<U> cast() const {
    EncoderParams<U> out;
    auto src = named_tensors(*this);
    out = EncoderParams<U>::with_layers(layers.size());
    auto dst = named_tensors(out);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }

  static EncoderParams with_layers(std::size_t n) {
    EncoderParams p;
    p.layers.resize(n);
    return p;
  }

  bool operator==(const EncoderParams& o) const {
    auto a = named_tensors(*this);
    auto b = named_tensors(o);
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second->rows() != b[i].second->rows() || a[i].second->cols() != b[i].second->cols() ||
          *a[i].second != *b[i].second)
        return false;
    return true;
  }
};

// Manifest order; checkpoints store tensors in exactly this order.
template <typename P>
auto named_tensors(P& p) {
  using T = typename std::remove_const_t<P>::Scalar;
  using M = std::conditional_t<std::is_const_v<P>, const Mat<T>, Mat<T>>;
  std::vector<std::pair<std::string, M*>> out;
  out.emplace_back("embeddings.token", &p.tok_emb);
  out.emplace_back("embeddings.position", &p.pos_emb);
  out.emplace_back("embeddings.type", &p.type_emb);
  out.emplace_back("embeddings.norm.scale", &p.emb_ln_g);
  out.emplace_back("embeddings.norm.offset", &p.emb_ln_b);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layer." + std::to_string(i) + ".";
    out.emplace_back(pre + "attention.query.weight", &l.q_w);
    out.emplace_back(pre + "attention.query.bias", &l.q_b);
    out.emplace_back(pre + "attention.key.weight", &l.k_w);
    out.emplace_back(pre + "attention.key.bias", &l.k_b);
    out.emplace_back(pre + "attention.value.weight", &l.v_w);
    out.emplace_back(pre + "attention.value.bias", &l.v_b);
    out.emplace_back(pre + "attention.output.weight", &l.o_w);
    out.emplace_back(pre + "attention.output.bias", &l.o_b);
    out.emplace_back(pre + "attention.norm.scale", &l.ln1_g);
    out.emplace_back(pre + "attention.norm.offset", &l.ln1_b);
    out.emplace_back(pre + "ffn.in.weight", &l.ff1_w);
    out.emplace_back(pre + "ffn.in.bias", &l.ff1_b);
    out.emplace_back(pre + "ffn.out.weight", &l.ff2_w);
    out.emplace_back(pre + "ffn.out.bias", &l.ff2_b);
    out.emplace_back(pre + "ffn.norm.scale", &l.ln2_g);
    out.emplace_back(pre + "ffn.norm.offset", &l.ln2_b);
  }
  out.emplace_back("mlm.transform.weight", &p.mlm_w);
  out.emplace_back("mlm.transform.bias", &p.mlm_b);
  out.emplace_back("mlm.norm.scale", &p.mlm_ln_g);
  out.emplace_back("mlm.norm.offset", &p.mlm_ln_b);
  out.emplace_back("mlm.output.bias", &p.mlm_out_b);
  return out;
}

template <typename T>
std::size_t parameter_count(const EncoderParams<T>& p) {
  std::size_t n = 0;
  for (auto& [_, m] : named_tensors(p)) n += static_cast<std::size_t>(m->size());
  return n;
}

inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden;
  const std::size_t layer = 4 * (d * d + d) + 2 * d + (d * c.ff + c.ff) + (c.ff * d + d) + 2 * d;
  return c.vocab_size * d + c.max_positions * d + c.type_vocab * d + 2 * d + c.layers * layer + d * d + d + 2 * d +
         c.vocab_size;
}

inline bool is_norm_scale(const std::string& name) { return name.ends_with("norm.scale"); }

/// Truncated normal (stddev 0.02) for embeddings and weights, zero biases,
/// unit layer-norm scales. Deterministic per seed.
template <typename T = float>
EncoderParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto p = EncoderParams<T>::zeros(cfg);
  Rng rng(seed);
  for (auto& [name, m] : named_tensors(p)) {
    if (is_norm_scale(name)) {
      m->setOnes();
    } else if (name.ends_with(".weight") || (name.starts_with("embeddings.") && !name.ends_with("offset"))) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<T>(rng.truncated_normal(0.02));
    }
  }
  return p;
}

// ------------------------------------------------------------ primitives

namespace ops {

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
struct NormCache {
  Mat<T> xhat;
  std::vector<double> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, double eps, NormCache<T>* cache) {
  const auto n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  std::vector<double> rstd(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = 0;
    for (Eigen::Index k = 0; k < d; ++k) mean += static_cast<double>(x(i, k));
    mean /= static_cast<double>(d);
    double var = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      const double c = static_cast<double>(x(i, k)) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(i)] = r;
    for (Eigen::Index k = 0; k < d; ++k) xhat(i, k) = static_cast<T>((static_cast<double>(x(i, k)) - mean) * r);
  }
  Mat<T> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const NormCache<T>& c, const Mat<T>& g, Mat<T>& dg, Mat<T>& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const auto n = dy.rows(), d = dy.cols();
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    double m1 = 0, m2 = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      m1 += static_cast<double>(dxhat(i, k));
      m2 += static_cast<double>(dxhat(i, k)) * static_cast<double>(c.xhat(i, k));
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    const double r = c.rstd[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < d; ++k)
      dx(i, k) = static_cast<T>(r * (static_cast<double>(dxhat(i, k)) - m1 - static_cast<double>(c.xhat(i, k)) * m2));
  }
  return dx;
}

template <typename T>
Mat<T> affine(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Inverted-dropout mask (entries 0 or 1/(1-p)); empty when inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng) {
  if (!rng || p <= 0.0) return {};
  Mat<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < p ? T(0) : keep;
  return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
  if (mask.size()) x.array() *= mask.array();
}

/// Row-wise softmax accumulated in double; returns log-sum-exp per row.
template <typename T>
void softmax_rows(const Mat<T>& z, Mat<double>& p, std::vector<double>& lse) {
  p.resize(z.rows(), z.cols());
  lse.resize(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double mx = -INFINITY;
    for (Eigen::Index k = 0; k < z.cols(); ++k) mx = std::max(mx, static_cast<double>(z(i, k)));
    double s = 0;
    for (Eigen::Index k = 0; k < z.cols(); ++k) {
      p(i, k) = std::exp(static_cast<double>(z(i, k)) - mx);
      s += p(i, k);
    }
    p.row(i) /= s;
    lse[static_cast<std::size_t>(i)] = mx + std::log(s);
  }
}

}  // namespace ops

// ------------------------------------------------------------- forward

template <typename T>
struct LayerCache {
  Mat<T> input, q, k, v, ctx, attn_drop;
  std::vector<Mat<T>> probs;
  ops::NormCache<T> ln1, ln2;
  Mat<T> h1, ff_pre, ff_act, ff_drop;
};

template <typename T>
struct EncoderCache {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> type_ids;
  Mat<T> emb_drop;
  ops::NormCache<T> emb_ln;
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct HeadCache {
  Mat<T> input, pre, act;
  ops::NormCache<T> ln;
};

namespace detail {

template <typename T>
Mat<T> layer_forward(const LayerParams<T>& l, const ModelConfig& cfg, const Mat<T>& x,
                     std::span<const std::uint8_t> mask, Rng* rng, LayerCache<T>* c) {
  const auto n = x.rows();
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Mat<T> q = ops::affine(x, l.q_w, l.q_b), k = ops::affine(x, l.k_w, l.k_b), v = ops::affine(x, l.v_w, l.v_b);
  Mat<T> ctx(n, x.cols());
  std::vector<Mat<T>> probs;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Mat<T> s(n, n);
    s.noalias() = q.middleCols(off, dh) * k.middleCols(off, dh).transpose();
    s *= scale;
    Mat<T> p(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (Eigen::Index j = 0; j < n; ++j)
        if (mask[static_cast<std::size_t>(j)]) mx = std::max(mx, static_cast<double>(s(i, j)));
      double sum = 0;
      std::vector<double> e(static_cast<std::size_t>(n), 0.0);
      for (Eigen::Index j = 0; j < n; ++j)
        if (mask[static_cast<std::size_t>(j)]) sum += e[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(s(i, j)) - mx);
      for (Eigen::Index j = 0; j < n; ++j) p(i, j) = static_cast<T>(e[static_cast<std::size_t>(j)] / sum);
    }
    ctx.middleCols(off, dh).noalias() = p * v.middleCols(off, dh);
    if (c) probs.push_back(std::move(p));
  }
  Mat<T> a = ops::affine(ctx, l.o_w, l.o_b);
  Mat<T> attn_drop = ops::dropout_mask<T>(a.rows(), a.cols(), cfg.dropout, rng);
  ops::apply_mask(a, attn_drop);
  Mat<T> r1 = x + a;
  ops::NormCache<T> ln1;
  Mat<T> h1 = ops::layer_norm(r1, l.ln1_g, l.ln1_b, cfg.ln_eps, c ? &ln1 : nullptr);
  Mat<T> ff_pre = ops::affine(h1, l.ff1_w, l.ff1_b);
  Mat<T> ff_act = ff_pre.unaryExpr([](T z) { return ops::gelu(z); });
  Mat<T> f = ops::affine(ff_act, l.ff2_w, l.ff2_b);
  Mat<T> ff_drop = ops::dropout_mask<T>(f.rows(), f.cols(), cfg.dropout, rng);
  ops::apply_mask(f, ff_drop);
  Mat<T> r2 = h1 + f;
  ops::NormCache<T> ln2;
  Mat<T> out = ops::layer_norm(r2, l.ln2_g, l.ln2_b, cfg.ln_eps, c ? &ln2 : nullptr);
  if (c) {
    c->input = x;
    c->q = std::move(q), c->k = std::move(k), c->v = std::move(v), c->ctx = std::move(ctx);
    c->probs = std::move(probs);
    c->attn_drop = std::move(attn_drop);
    c->ln1 = std::move(ln1), c->ln2 = std::move(ln2);
    c->h1 = std::move(h1), c->ff_pre = std::move(ff_pre), c->ff_act = std::move(ff_act);
    c->ff_drop = std::move(ff_drop);
  }
  return out;
}

template <typename T>
Mat<T> layer_backward(const LayerParams<T>& l, const ModelConfig& cfg, const LayerCache<T>& c, const Mat<T>& dout,
                      LayerParams<T>& g) {
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Mat<T> dr2 = ops::layer_norm_backward(dout, c.ln2, l.ln2_g, g.ln2_g, g.ln2_b);
  Mat<T> dh1 = dr2;
  Mat<T> df = dr2;
  ops::apply_mask(df, c.ff_drop);
  g.ff2_w.noalias() += c.ff_act.transpose() * df;
  g.ff2_b += df.colwise().sum();
  Mat<T> dact(df.rows(), l.ff2_w.rows());
  dact.noalias() = df * l.ff2_w.transpose();
  Mat<T> dpre = dact.array() * c.ff_pre.unaryExpr([](T z) { return ops::gelu_grad(z); }).array();
  g.ff1_w.noalias() += c.h1.transpose() * dpre;
  g.ff1_b += dpre.colwise().sum();
  dh1.noalias() += dpre * l.ff1_w.transpose();

  Mat<T> dr1 = ops::layer_norm_backward(dh1, c.ln1, l.ln1_g, g.ln1_g, g.ln1_b);
  Mat<T> dx = dr1;
  Mat<T> da = dr1;
  ops::apply_mask(da, c.attn_drop);
  g.o_w.noalias() += c.ctx.transpose() * da;
  g.o_b += da.colwise().sum();
  Mat<T> dctx(da.rows(), da.cols());
  dctx.noalias() = da * l.o_w.transpose();

  Mat<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const Mat<T>& p = c.probs[h];
    const Mat<T> dctx_h = dctx.middleCols(off, dh);
    Mat<T> dp(p.rows(), p.cols());
    dp.noalias() = dctx_h * c.v.middleCols(off, dh).transpose();
    dv.middleCols(off, dh).noalias() = p.transpose() * dctx_h;
    Mat<T> ds(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double dot = 0;
      for (Eigen::Index j = 0; j < p.cols(); ++j) dot += static_cast<double>(dp(i, j)) * static_cast<double>(p(i, j));
      for (Eigen::Index j = 0; j < p.cols(); ++j)
        ds(i, j) = static_cast<T>(static_cast<double>(p(i, j)) * (static_cast<double>(dp(i, j)) - dot));
    }
    ds *= scale;
    dq.middleCols(off, dh).noalias() = ds * c.k.middleCols(off, dh);
    dk.middleCols(off, dh).noalias() = ds.transpose() * c.q.middleCols(off, dh);
  }
  g.q_w.noalias() += c.input.transpose() * dq;
  g.q_b += dq.colwise().sum();
  g.k_w.noalias() += c.input.transpose() * dk;
  g.k_b += dk.colwise().sum();
  g.v_w.noalias() += c.input.transpose() * dv;
  g.v_b += dv.colwise().sum();
  dx.noalias() += dq * l.q_w.transpose();
  dx.noalias() += dk * l.k_w.transpose();
  dx.noalias() += dv * l.v_w.transpose();
  return dx;
}

}  // namespace detail

inline void check_sequence(const ModelConfig& cfg, std::span<const TokenId> ids, std::span<const std::uint8_t> types,
                           std::span<const std::uint8_t> mask) {
  if (ids.empty() || ids.size() > cfg.max_positions)
    throw ConfigError("model", "sequence length " + std::to_string(ids.size()) + " exceeds max_positions " +
                                   std::to_string(cfg.max_positions));
  if (types.size() != ids.size() || mask.size() != ids.size())
    throw ConfigError("model", "shape mismatch between ids, type ids and attention mask");
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw ConfigError("model", "token id " + std::to_string(id) + " outside vocabulary of " +
                                     std::to_string(cfg.vocab_size));
  for (auto t : types)
    if (t >= cfg.type_vocab) throw ConfigError("model", "type id outside type vocabulary");
}

/// Final hidden states (n x hidden) for one sequence. `rng` enables dropout.
template <typename T>
Mat<T> encode_hidden(const EncoderParams<T>& p, const ModelConfig& cfg, std::span<const TokenId> ids,
                     std::span<const std::uint8_t> types, std::span<const std::uint8_t> mask, Rng* rng,
                     EncoderCache<T>* cache) {
  check_sequence(cfg, ids, types, mask);
  const auto n = static_cast<Eigen::Index>(ids.size());
  Mat<T> x(n, static_cast<Eigen::Index>(cfg.hidden));
  for (Eigen::Index i = 0; i < n; ++i)
    x.row(i) = p.tok_emb.row(ids[static_cast<std::size_t>(i)]) + p.pos_emb.row(i) +
               p.type_emb.row(types[static_cast<std::size_t>(i)]);
  ops::NormCache<T> emb_ln;
  Mat<T> h = ops::layer_norm(x, p.emb_ln_g, p.emb_ln_b, cfg.ln_eps, cache ? &emb_ln : nullptr);
  Mat<T> emb_drop = ops::dropout_mask<T>(h.rows(), h.cols(), cfg.dropout, rng);
  ops::apply_mask(h, emb_drop);
  if (cache) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->type_ids.assign(types.begin(), types.end());
    cache->emb_ln = std::move(emb_ln);
    cache->emb_drop = std::move(emb_drop);
    cache->layers.resize(cfg.layers);
  }
  for (std::size_t li = 0; li < cfg.layers; ++li)
    h = detail::layer_forward(p.layers[li], cfg, h, mask, rng, cache ? &cache->layers[li] : nullptr);
  return h;
}

/// Back-propagates dL/d(hidden) through the encoder, accumulating into `g`.
template <typename T>
void backward_hidden(const EncoderParams<T>& p, const ModelConfig& cfg, const EncoderCache<T>& c, Mat<T> dh,
                     EncoderParams<T>& g) {
  for (std::size_t li = cfg.layers; li-- > 0;) dh = detail::layer_backward(p.layers[li], cfg, c.layers[li], dh, g.layers[li]);
  ops::apply_mask(dh, c.emb_drop);
  Mat<T> dx = ops::layer_norm_backward(dh, c.emb_ln, p.emb_ln_g, g.emb_ln_g, g.emb_ln_b);
  for (Eigen::Index i = 0; i < dx.rows(); ++i) {
    g.tok_emb.row(c.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    g.pos_emb.row(i) += dx.row(i);
    g.type_emb.row(c.type_ids[static_cast<std::size_t>(i)]) += dx.row(i);
  }
}

/// MLM transform -> GELU -> layer-norm -> tied projection + output bias.
template <typename T>
Mat<T> mlm_logits(const EncoderParams<T>& p, const ModelConfig& cfg, const Mat<T>& hidden, HeadCache<T>* cache) {
  Mat<T> pre = ops::affine(hidden, p.mlm_w, p.mlm_b);
  Mat<T> act = pre.unaryExpr([](T z) { return ops::gelu(z); });
  ops::NormCache<T> ln;
  Mat<T> u = ops::layer_norm(act, p.mlm_ln_g, p.mlm_ln_b, cfg.ln_eps, cache ? &ln : nullptr);
  Mat<T> z(u.rows(), p.tok_emb.rows());
  z.noalias() = u * p.tok_emb.transpose();
  z.rowwise() += p.mlm_out_b.row(0);
  if (cache) {
    cache->input = hidden;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->ln = std::move(ln);
  }
  return z;
}

template <typename T>
Mat<T> mlm_logits_backward(const EncoderParams<T>& p, const HeadCache<T>& c, const Mat<T>& dz, EncoderParams<T>& g) {
  // u is recomputed from the cache: u = xhat * scale + offset.
  const Mat<T> u = (c.ln.xhat.array().rowwise() * p.mlm_ln_g.row(0).array()).rowwise() + p.mlm_ln_b.row(0).array();
  g.tok_emb.noalias() += dz.transpose() * u;
  g.mlm_out_b += dz.colwise().sum();
  Mat<T> du(dz.rows(), u.cols());
  du.noalias() = dz * p.tok_emb;
  Mat<T> dact = ops::layer_norm_backward(du, c.ln, p.mlm_ln_g, g.mlm_ln_g, g.mlm_ln_b);
  Mat<T> dpre = dact.array() * c.pre.unaryExpr([](T z) { return ops::gelu_grad(z); }).array();
  g.mlm_w.noalias() += c.input.transpose() * dpre;
  g.mlm_b += dpre.colwise().sum();
  Mat<T> dh(dpre.rows(), p.mlm_w.rows());
  dh.noalias() = dpre * p.mlm_w.transpose();
  return dh;
}

template <typename T>
std::string first_non_finite(const EncoderParams<T>& p) {
  for (auto& [name, m] : named_tensors(p))
    if (!m->allFinite()) return name;
  return {};
}

// ------------------------------------------------------ MLM loss / grads

template <typename T>
struct MlmOutput {
  std::vector<Mat<T>> logits;  // per sequence: max_len x vocab
  std::optional<double> loss;  // absent when nothing is labeled
};

/// Logits at every position and mean cross-entropy over labeled positions.
template <typename T>
MlmOutput<T> forward_mlm(const EncoderParams<T>& p, const ModelConfig& cfg, const mlm::MaskedBatch& batch,
                         bool train_mode = false, std::uint64_t dropout_seed = 0) {
  if (batch.labels.size() != batch.inputs.size()) throw ConfigError("model", "labels/inputs size mismatch");
  MlmOutput<T> out;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    const auto& s = batch.inputs[i];
    if (batch.labels[i].size() != s.ids.size()) throw ConfigError("model", "labels/ids length mismatch");
    std::optional<Rng> rng;
    if (train_mode) rng.emplace(derive_seed(dropout_seed, i));
    Mat<T> h = encode_hidden<T>(p, cfg, s.ids, s.type_ids, s.attention_mask, rng ? &*rng : nullptr, nullptr);
    Mat<T> z = mlm_logits<T>(p, cfg, h, nullptr);
    Mat<double> prob;
    std::vector<double> lse;
    ops::softmax_rows(z, prob, lse);
    for (std::size_t pos = 0; pos < s.ids.size(); ++pos) {
      const auto y = batch.labels[i][pos];
      if (y == mlm::kIgnore) continue;
      total += lse[pos] - static_cast<double>(z(static_cast<Eigen::Index>(pos), y));
      ++count;
    }
    out.logits.push_back(std::move(z));
  }
  if (count) out.loss = total / static_cast<double>(count);
  return out;
}

template <typename T>
struct LossAndGrads {
  double loss = 0;
  std::size_t labeled = 0;
  EncoderParams<T> grads;
};

/// Loss over the labeled positions, optionally with exact gradients.
///
/// Only the attended prefix of each sequence is run (padding keys never
/// contribute) and the MLM head is evaluated at labeled rows only. Returns
/// nullopt when the batch has no labeled position.
template <typename T>
std::optional<LossAndGrads<T>> mlm_loss(const EncoderParams<T>& p, const ModelConfig& cfg,
                                        const mlm::MaskedBatch& batch, bool with_grads,
                                        std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  const std::size_t total_labels = batch.num_labels();
  if (total_labels == 0) return std::nullopt;
  LossAndGrads<T> res;
  res.labeled = total_labels;
  if (with_grads) res.grads = EncoderParams<T>::zeros(cfg);
  const double inv = 1.0 / static_cast<double>(total_labels);
  double total = 0;

  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    const auto& s = batch.inputs[i];
    const auto& lab = batch.labels[i];
    const std::size_t n = s.real_length();
    std::vector<Eigen::Index> rows;
    std::vector<TokenId> targets;
    for (std::size_t pos = 0; pos < n; ++pos)
      if (lab[pos] != mlm::kIgnore) rows.push_back(static_cast<Eigen::Index>(pos)), targets.push_back(lab[pos]);
    if (rows.empty()) continue;

    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(derive_seed(*dropout_seed, i));
    EncoderCache<T> cache;
    const std::span<const TokenId> ids(s.ids.data(), n);
    const std::span<const std::uint8_t> types(s.type_ids.data(), n), mask(s.attention_mask.data(), n);
    Mat<T> h = encode_hidden<T>(p, cfg, ids, types, mask, rng ? &*rng : nullptr, with_grads ? &cache : nullptr);
    Mat<T> sel(static_cast<Eigen::Index>(rows.size()), h.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) sel.row(static_cast<Eigen::Index>(r)) = h.row(rows[r]);
    HeadCache<T> hc;
    Mat<T> z = mlm_logits<T>(p, cfg, sel, with_grads ? &hc : nullptr);
    Mat<double> prob;
    std::vector<double> lse;
    ops::softmax_rows(z, prob, lse);
    for (std::size_t r = 0; r < rows.size(); ++r)
      total += lse[r] - static_cast<double>(z(static_cast<Eigen::Index>(r), targets[r]));
    if (!with_grads) continue;

    Mat<T> dz(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      for (Eigen::Index k = 0; k < z.cols(); ++k) dz(r, k) = static_cast<T>(prob(r, k) * inv);
      dz(r, targets[static_cast<std::size_t>(r)]) -= static_cast<T>(inv);
    }
    Mat<T> dsel = mlm_logits_backward<T>(p, hc, dz, res.grads);
    Mat<T> dh = Mat<T>::Zero(h.rows(), h.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) dh.row(rows[r]) = dsel.row(static_cast<Eigen::Index>(r));
    backward_hidden<T>(p, cfg, cache, std::move(dh), res.grads);
  }
  res.loss = total * inv;
  if (!std::isfinite(res.loss)) {
    auto bad = first_non_finite(p);
    throw NonFiniteError("model", bad.empty() ? "mlm.logits" : bad);
  }
  if (with_grads)
    if (auto bad = first_non_finite(res.grads); !bad.empty()) throw NonFiniteError("model", "gradient of " + bad);
  return res;
}

/// Exact gradients of the mean MLM loss (nullopt signals "nothing to learn from").
template <typename T>
std::optional<LossAndGrads<T>> compute_gradients(const EncoderParams<T>& p, const ModelConfig& cfg,
                                                 const mlm::MaskedBatch& batch,
                                                 std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  return mlm_loss<T>(p, cfg, batch, true, dropout_seed);
}

}  // namespace somnlp::model
