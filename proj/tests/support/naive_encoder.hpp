#pragma once

// Straight-loop re-implementation of the encoder forward pass in double.
// Used only as a test oracle: no Eigen products, no caching, no trimming.

#include <cmath>
#include <vector>

#include "somnlp/encoder.hpp"

namespace somnlp::oracle {

using Grid = std::vector<std::vector<double>>;

template <typename M>
double at(const M& m, long i, long j) {
  return static_cast<double>(m(i, j));
}

inline double naive_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <typename M>
Grid naive_linear(const Grid& x, const M& w, const M& b) {
  Grid y(x.size(), std::vector<double>(static_cast<std::size_t>(w.cols()), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (long o = 0; o < w.cols(); ++o) {
      double s = at(b, 0, o);
      for (long k = 0; k < w.rows(); ++k) s += x[i][static_cast<std::size_t>(k)] * at(w, k, o);
      y[i][static_cast<std::size_t>(o)] = s;
    }
  return y;
}

template <typename M>
Grid naive_norm(const Grid& x, const M& g, const M& b, double eps) {
  Grid y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0, var = 0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t k = 0; k < x[i].size(); ++k)
      y[i][k] = (x[i][k] - mean) / std::sqrt(var + eps) * at(g, 0, static_cast<long>(k)) + at(b, 0, static_cast<long>(k));
  }
  return y;
}

/// Final hidden states for one sequence over all positions.
template <typename P>
Grid naive_hidden(const P& p, const model::ModelConfig& cfg, const std::vector<int>& ids,
                  const std::vector<std::uint8_t>& mask) {
  const std::size_t n = ids.size(), d = cfg.hidden, dh = cfg.hidden / cfg.heads;
  Grid x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k)
      x[i][k] = at(p.tok_emb, ids[i], static_cast<long>(k)) + at(p.pos_emb, static_cast<long>(i), static_cast<long>(k)) +
                at(p.type_emb, 0, static_cast<long>(k));
  Grid h = naive_norm(x, p.emb_ln_g, p.emb_ln_b, cfg.ln_eps);
  for (const auto& l : p.layers) {
    Grid q = naive_linear(h, l.q_w, l.q_b), kk = naive_linear(h, l.k_w, l.k_b), v = naive_linear(h, l.v_w, l.v_b);
    Grid ctx(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t off = head * dh;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> w(n, 0.0);
        double mx = -1e300, sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask[j]) continue;
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += q[i][off + c] * kk[j][off + c];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        for (std::size_t j = 0; j < n; ++j) {
          w[j] = mask[j] ? std::exp(w[j] - mx) : 0.0;
          sum += w[j];
        }
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < dh; ++c) ctx[i][off + c] += w[j] / sum * v[j][off + c];
      }
    }
    Grid a = naive_linear(ctx, l.o_w, l.o_b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) a[i][k] += h[i][k];
    Grid h1 = naive_norm(a, l.ln1_g, l.ln1_b, cfg.ln_eps);
    Grid f = naive_linear(h1, l.ff1_w, l.ff1_b);
    for (auto& row : f)
      for (auto& z : row) z = naive_gelu(z);
    Grid f2 = naive_linear(f, l.ff2_w, l.ff2_b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) f2[i][k] += h1[i][k];
    h = naive_norm(f2, l.ln2_g, l.ln2_b, cfg.ln_eps);
  }
  return h;
}

template <typename P>
Grid naive_mlm_logits(const P& p, const model::ModelConfig& cfg, const Grid& h) {
  Grid t = naive_linear(h, p.mlm_w, p.mlm_b);
  for (auto& row : t)
    for (auto& z : row) z = naive_gelu(z);
  Grid u = naive_norm(t, p.mlm_ln_g, p.mlm_ln_b, cfg.ln_eps);
  Grid z(h.size(), std::vector<double>(cfg.vocab_size));
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      double s = at(p.mlm_out_b, 0, static_cast<long>(v));
      for (std::size_t k = 0; k < cfg.hidden; ++k) s += u[i][k] * at(p.tok_emb, static_cast<long>(v), static_cast<long>(k));
      z[i][v] = s;
    }
  return z;
}

/// Mean cross-entropy over labeled positions of a batch.
template <typename P>
double naive_mlm_loss(const P& p, const model::ModelConfig& cfg, const mlm::MaskedBatch& batch) {
  double total = 0;
  int count = 0;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    const auto& s = batch.inputs[b];
    std::vector<int> ids(s.ids.begin(), s.ids.end());
    Grid z = naive_mlm_logits(p, cfg, naive_hidden(p, cfg, ids, s.attention_mask));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int y = batch.labels[b][i];
      if (y < 0) continue;
      double mx = -1e300, sum = 0;
      for (double v : z[i]) mx = std::max(mx, v);
      for (double v : z[i]) sum += std::exp(v - mx);
      total += mx + std::log(sum) - z[i][static_cast<std::size_t>(y)];
      ++count;
    }
  }
  return total / count;
}

}  // namespace somnlp::oracle
