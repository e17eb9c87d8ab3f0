#pragma once

// Fixed-length model inputs and masked-language-model corruption.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "somnlp/error.hpp"
#include "somnlp/rng.hpp"
#include "somnlp/tokenizer.hpp"

namespace somnlp::mlm {

using tokenizer::TokenId;

inline constexpr TokenId kIgnore = -1;

struct InputSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::uint8_t> type_ids;

  std::size_t length() const noexcept { return ids.size(); }

  /// Number of attended positions ([CLS] .. [SEP]); attended positions form a prefix.
  std::size_t real_length() const noexcept {
    std::size_t n = 0;
    while (n < attention_mask.size() && attention_mask[n]) ++n;
    return n;
  }

  bool operator==(const InputSequence&) const = default;
};

struct MaskingPolicy {
  double select_prob = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(select_prob >= 0.0 && select_prob <= 1.0)) throw ConfigError("mlm", "select_prob must lie in [0,1]");
    if (mask_frac < 0 || random_frac < 0 || keep_frac < 0) throw ConfigError("mlm", "fractions must be non-negative");
    if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9)
      throw ConfigError("mlm", "mask/random/keep fractions must sum to 1");
  }
};

struct MaskedBatch {
  std::vector<InputSequence> inputs;
  std::vector<std::vector<TokenId>> labels;

  std::size_t num_labels() const {
    std::size_t n = 0;
    for (const auto& l : labels)
      for (auto v : l) n += v != kIgnore;
    return n;
  }

  bool operator==(const MaskedBatch&) const = default;
};

/// [CLS] + ids (truncated to max_len-2) + [SEP] + [PAD]...
inline InputSequence build_sequence(std::span<const TokenId> sentence, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("mlm", "max_len must be at least 3");
  const std::size_t keep = std::min(sentence.size(), max_len - 2);
  InputSequence s;
  s.ids.assign(max_len, tokenizer::kPad);
  s.attention_mask.assign(max_len, 0);
  s.type_ids.assign(max_len, 0);
  s.ids[0] = tokenizer::kCls;
  std::copy_n(sentence.begin(), keep, s.ids.begin() + 1);
  s.ids[keep + 1] = tokenizer::kSep;
  std::fill_n(s.attention_mask.begin(), keep + 2, 1);
  return s;
}

inline std::vector<InputSequence> build_sequences(const std::vector<std::vector<TokenId>>& sentences,
                                                  std::size_t max_len) {
  if (max_len < 3) throw ConfigError("mlm", "max_len must be at least 3");
  std::vector<InputSequence> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(build_sequence(s, max_len));
  return out;
}

/// Eligible for corruption: attended and not one of the five specials.
inline bool eligible(const InputSequence& s, std::size_t pos) {
  return s.attention_mask[pos] && !tokenizer::is_special(s.ids[pos]);
}

/// Corrupts one sequence using the stream for (policy.seed, index).
/// Draw order per eligible position: selection, then branch, then (random
/// branch only) the replacement id.
inline void mask_sequence(InputSequence& seq, std::vector<TokenId>& labels, const MaskingPolicy& policy,
                          std::size_t vocab_size, std::uint64_t index) {
  labels.assign(seq.ids.size(), kIgnore);
  Rng rng(derive_seed(policy.seed, index));
  const auto non_special = vocab_size > static_cast<std::size_t>(tokenizer::kNumSpecials)
                               ? vocab_size - static_cast<std::size_t>(tokenizer::kNumSpecials)
                               : 0;
  for (std::size_t p = 0; p < seq.ids.size(); ++p) {
    if (!eligible(seq, p)) continue;
    if (!rng.bernoulli(policy.select_prob)) continue;
    labels[p] = seq.ids[p];
    const double u = rng.uniform();
    if (u < policy.mask_frac) {
      seq.ids[p] = tokenizer::kMask;
    } else if (u < policy.mask_frac + policy.random_frac) {
      if (non_special > 0)
        seq.ids[p] = static_cast<TokenId>(tokenizer::kNumSpecials + static_cast<TokenId>(rng.below(non_special)));
    }
  }
}

/// Applies masking to every sequence; sequence i uses sub-seed (seed, i), so
/// the result does not depend on processing order.
inline MaskedBatch apply_masking(std::vector<InputSequence> seqs, const MaskingPolicy& policy,
                                 std::size_t vocab_size) {
  policy.validate();
  MaskedBatch batch;
  batch.labels.resize(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) mask_sequence(seqs[i], batch.labels[i], policy, vocab_size, i);
  batch.inputs = std::move(seqs);
  return batch;
}

/// Uncorrupted batch with no labels (inference input).
inline MaskedBatch unlabeled(std::vector<InputSequence> seqs) {
  MaskedBatch b;
  for (const auto& s : seqs) b.labels.emplace_back(s.ids.size(), kIgnore);
  b.inputs = std::move(seqs);
  return b;
}

inline nlohmann::ordered_json to_json(const MaskedBatch& b) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < b.inputs.size(); ++i) {
    nlohmann::ordered_json s;
    s["ids"] = b.inputs[i].ids;
    s["attention_mask"] = b.inputs[i].attention_mask;
    s["type_ids"] = b.inputs[i].type_ids;
    s["labels"] = b.labels[i];
    j.push_back(std::move(s));
  }
  return j;
}

inline MaskedBatch batch_from_json(const nlohmann::json& j) {
  MaskedBatch b;
  for (const auto& s : j) {
    InputSequence seq;
    seq.ids = s.at("ids").get<std::vector<TokenId>>();
    seq.attention_mask = s.at("attention_mask").get<std::vector<std::uint8_t>>();
    seq.type_ids = s.at("type_ids").get<std::vector<std::uint8_t>>();
    b.labels.push_back(s.at("labels").get<std::vector<TokenId>>());
    b.inputs.push_back(std::move(seq));
  }
  return b;
}

}  // namespace somnlp::mlm
