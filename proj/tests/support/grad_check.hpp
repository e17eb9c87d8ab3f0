#pragma once

// Central finite-difference oracle for the MLM loss in double precision.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "somnlp/encoder.hpp"
#include "somnlp/rng.hpp"

namespace somnlp::oracle {

struct GradSample {
  std::string tensor;
  long index;
  double analytic;
  double numeric;
  double rel_error;
};

/// |a - n| / max(|a|, |n|, floor). The floor only matters for coordinates
/// whose true gradient is ~0 (e.g. unused embedding rows).
inline double relative_error(double a, double n, double floor = 1e-7) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Parameters drawn wider than the production init so every path carries
/// non-trivial gradient signal.
inline model::EncoderParams<double> random_params(const model::ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  auto p = model::EncoderParams<double>::zeros(cfg);
  Rng rng(seed);
  for (auto& [name, m] : named_tensors(p))
    for (long i = 0; i < m->size(); ++i)
      m->data()[i] = (model::is_norm_scale(name) ? 1.0 : 0.0) + scale * rng.normal();
  return p;
}

/// Fan-in scaled weights and half-unit embeddings: every activation stays
/// O(1), so central differences at a 1e-3 step see little curvature.
inline model::EncoderParams<double> conditioned_params(const model::ModelConfig& cfg, std::uint64_t seed) {
  auto p = model::EncoderParams<double>::zeros(cfg);
  Rng rng(seed);
  for (auto& [name, m] : named_tensors(p)) {
    double base = 0.0, sd = 0.1;
    if (model::is_norm_scale(name)) base = 1.0;
    else if (name.starts_with("embeddings.") && !name.ends_with("offset")) sd = 0.5;
    else if (name.ends_with(".weight")) sd = 0.5 / std::sqrt(static_cast<double>(m->rows()));
    for (long i = 0; i < m->size(); ++i) m->data()[i] = base + sd * rng.normal();
  }
  return p;
}

/// Random batch with varying real lengths and a guaranteed labeled position per sequence.
inline mlm::MaskedBatch random_batch(const model::ModelConfig& cfg, std::size_t count, std::size_t max_len,
                                     std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<tokenizer::TokenId>> sents;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = 2 + rng.below(max_len - 3);
    std::vector<tokenizer::TokenId> s;
    for (std::size_t k = 0; k < len; ++k)
      s.push_back(static_cast<tokenizer::TokenId>(tokenizer::kNumSpecials + rng.below(cfg.vocab_size - tokenizer::kNumSpecials)));
    sents.push_back(std::move(s));
  }
  mlm::MaskingPolicy pol;
  pol.select_prob = 0.4;
  pol.seed = seed;
  auto batch = mlm::apply_masking(mlm::build_sequences(sents, max_len), pol, cfg.vocab_size);
  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    if (std::any_of(batch.labels[i].begin(), batch.labels[i].end(), [](auto v) { return v != mlm::kIgnore; })) continue;
    batch.labels[i][1] = batch.inputs[i].ids[1];
    batch.inputs[i].ids[1] = tokenizer::kMask;
  }
  return batch;
}

/// Compares analytic gradients with central differences at `per_tensor`
/// random coordinates of every parameter tensor.
inline std::vector<GradSample> finite_difference_check(model::EncoderParams<double> p, const model::ModelConfig& cfg,
                                                       const mlm::MaskedBatch& batch, std::size_t per_tensor,
                                                       std::uint64_t seed, double step = 1e-3) {
  const auto analytic = model::compute_gradients<double>(p, cfg, batch);
  std::vector<GradSample> out;
  Rng rng(seed);
  auto grads = named_tensors(analytic->grads);
  auto params = named_tensors(p);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& m = *params[t].second;
    std::vector<long> order(static_cast<std::size_t>(m.size()));
    std::iota(order.begin(), order.end(), 0L);
    rng.shuffle(order);
    for (std::size_t s = 0; s < std::min(per_tensor, order.size()); ++s) {
      const long idx = order[s];
      const double orig = m.data()[idx];
      m.data()[idx] = orig + step;
      const double up = model::mlm_loss<double>(p, cfg, batch, false)->loss;
      m.data()[idx] = orig - step;
      const double down = model::mlm_loss<double>(p, cfg, batch, false)->loss;
      m.data()[idx] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = grads[t].second->data()[idx];
      out.push_back({params[t].first, idx, a, numeric, relative_error(a, numeric)});
    }
  }
  return out;
}

}  // namespace somnlp::oracle
