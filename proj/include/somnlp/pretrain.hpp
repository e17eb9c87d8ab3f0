#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "somnlp/adam.hpp"
#include "somnlp/checkpoint.hpp"
#include "somnlp/encoder.hpp"
#include "somnlp/mlm_data.hpp"
#include "somnlp/rng.hpp"

namespace somnlp::model {

struct Schedule {
  std::uint64_t steps = 200;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  std::uint64_t log_every = 10;
};

struct LogEntry {
  std::uint64_t step;
  double loss;
  double lr;
};

inline nlohmann::ordered_json to_json(const LogEntry& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["loss"] = e.loss;
  j["lr"] = e.lr;
  return j;
}

struct PretrainResult {
  EncoderCheckpoint checkpoint;
  std::vector<LogEntry> history;  // one entry per optimizer step
  std::uint64_t skipped_batches = 0;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::uint64_t step, EncoderCheckpoint last_good)
      : Error("pretrain", "loss became non-finite at step " + std::to_string(step)),
        step_(step),
        last_good_(std::move(last_good)) {}

  std::uint64_t step() const noexcept { return step_; }
  const EncoderCheckpoint& last_good() const noexcept { return last_good_; }

 private:
  std::uint64_t step_;
  EncoderCheckpoint last_good_;
};

/// Linear warmup over the first warmup_frac of steps, then linear decay to zero.
inline double learning_rate(const Schedule& s, std::uint64_t step) {
  const auto warmup = static_cast<std::uint64_t>(std::llround(s.warmup_frac * static_cast<double>(s.steps)));
  if (step < warmup) return s.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const auto remaining = s.steps - warmup;
  if (remaining == 0) return s.lr;
  return s.lr * static_cast<double>(s.steps - step) / static_cast<double>(remaining);
}

/// Mean loss of the first and last `window` steps.
inline std::pair<double, double> smoothed_endpoints(const std::vector<LogEntry>& h, std::size_t window) {
  if (h.empty()) return {0.0, 0.0};
  window = std::max<std::size_t>(1, std::min(window, h.size()));
  auto mean = [&](auto begin, auto end) {
    double s = 0;
    for (auto it = begin; it != end; ++it) s += it->loss;
    return s / static_cast<double>(window);
  };
  return {mean(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(window)),
          mean(h.end() - static_cast<std::ptrdiff_t>(window), h.end())};
}

/// Masked-batch training with Adam. Batches walk seeded per-epoch
/// permutations of the corpus; masking and dropout for step t use streams
/// derived from (seed, t). Deterministic per seed.
inline PretrainResult pretrain(const std::vector<mlm::InputSequence>& corpus, const ModelConfig& cfg,
                               const mlm::MaskingPolicy& policy, const Schedule& schedule, std::uint64_t seed,
                               std::string vocab_fingerprint,
                               const std::function<void(const LogEntry&)>& on_log = {}) {
  cfg.validate();
  policy.validate();
  if (corpus.empty() && schedule.steps > 0) throw ConfigError("pretrain", "empty training corpus");
  if (schedule.batch_size == 0) throw ConfigError("pretrain", "batch_size must be positive");
  for (const auto& s : corpus)
    if (s.length() > cfg.max_positions) throw ConfigError("pretrain", "sequence longer than max_positions");

  PretrainResult res;
  res.checkpoint.config = cfg;
  res.checkpoint.params = init_model<float>(cfg, derive_seed(seed, 0));
  res.checkpoint.vocab_fingerprint = std::move(vocab_fingerprint);
  res.checkpoint.meta = {0, 0.0, seed};

  AdamState<float> adam;
  adam.config.lr = schedule.lr;
  adam.config.weight_decay = schedule.weight_decay;

  std::vector<std::size_t> order;
  std::uint64_t epoch = 0;
  std::size_t cursor = 0;
  auto next_index = [&] {
    if (cursor == order.size()) {
      order.resize(corpus.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(seed, 1, epoch++));
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  for (std::uint64_t step = 0; step < schedule.steps; ++step) {
    std::vector<mlm::InputSequence> seqs;
    seqs.reserve(schedule.batch_size);
    for (std::size_t b = 0; b < schedule.batch_size; ++b) seqs.push_back(corpus[next_index()]);
    auto step_policy = policy;
    step_policy.seed = derive_seed(policy.seed, seed, step);
    const auto batch = mlm::apply_masking(std::move(seqs), step_policy, cfg.vocab_size);

    std::optional<LossAndGrads<float>> lg;
    try {
      lg = compute_gradients<float>(res.checkpoint.params, cfg, batch, derive_seed(seed, 3, step));
    } catch (const NonFiniteError&) {
      throw TrainingDiverged(step, res.checkpoint);
    }
    if (!lg) {
      ++res.skipped_batches;
      continue;
    }
    const double lr = learning_rate(schedule, step);
    auto before = res.checkpoint.params;
    adam_step(res.checkpoint.params, lg->grads, adam, lr);
    if (!first_non_finite(res.checkpoint.params).empty()) {
      res.checkpoint.params = std::move(before);
      throw TrainingDiverged(step, res.checkpoint);
    }
    res.checkpoint.meta.steps = step + 1;
    res.checkpoint.meta.final_loss = lg->loss;
    LogEntry e{step, lg->loss, lr};
    res.history.push_back(e);
    if (on_log && schedule.log_every && (step % schedule.log_every == 0 || step + 1 == schedule.steps)) on_log(e);
  }
  return res;
}

}  // namespace somnlp::model
