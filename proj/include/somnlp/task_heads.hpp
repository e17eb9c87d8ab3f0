#pragma once

// Classification heads on top of a pretrained encoder: [CLS] pooling,
// dropout, one linear layer. Binary and multiclass tasks use softmax
// cross-entropy; multilabel tasks use per-label sigmoid BCE.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "somnlp/adam.hpp"
#include "somnlp/checkpoint.hpp"
#include "somnlp/corpus.hpp"
#include "somnlp/encoder.hpp"
#include "somnlp/error.hpp"
#include "somnlp/mlm_data.hpp"
#include "somnlp/rng.hpp"
#include "somnlp/tokenizer.hpp"

namespace somnlp::task {

using model::EncoderParams;
using model::Mat;
using model::ModelConfig;
using tokenizer::TokenId;

enum class TaskKind { binary, multiclass, multilabel };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::binary: return "binary";
    case TaskKind::multiclass: return "multiclass";
    case TaskKind::multilabel: return "multilabel";
  }
  return "?";
}

inline TaskKind kind_from_string(const std::string& s) {
  if (s == "binary") return TaskKind::binary;
  if (s == "multiclass") return TaskKind::multiclass;
  if (s == "multilabel") return TaskKind::multilabel;
  throw ConfigError("task", "unknown task kind \"" + s + "\" (binary, multiclass, multilabel)");
}

/// Stage-2 toxicity categories. The stage-1 "toxic" flag is not one of them.
inline const std::vector<std::string>& toxicity_categories() {
  static const std::vector<std::string> c{"abuse", "obscene", "insult", "identity-hate", "severe-toxic", "threat"};
  return c;
}

struct TaskSpec {
  TaskKind kind = TaskKind::binary;
  std::vector<std::string> labels;
  double threshold = 0.5;

  static TaskSpec multilabel_toxicity() { return {TaskKind::multilabel, toxicity_categories(), 0.5}; }

  std::size_t size() const noexcept { return labels.size(); }

  void validate() const {
    if (labels.size() < 2) throw ConfigError("task", "a task needs at least two labels");
    if (kind == TaskKind::binary && labels.size() != 2)
      throw ConfigError("task", "binary tasks take exactly two labels, got " + std::to_string(labels.size()));
    if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size())
      throw ConfigError("task", "label names must be unique");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("task", "threshold must lie in (0,1)");
  }

  std::size_t index_of(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw ValidationError("task", "label \"" + label + "\" is not in the task label set");
    return static_cast<std::size_t>(it - labels.begin());
  }

  bool operator==(const TaskSpec&) const = default;
};

inline nlohmann::ordered_json to_json(const TaskSpec& s) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(s.kind);
  j["labels"] = s.labels;
  j["threshold"] = s.threshold;
  return j;
}

inline TaskSpec spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  try {
    s.kind = kind_from_string(j.at("kind").get<std::string>());
    s.labels = j.at("labels").get<std::vector<std::string>>();
    s.threshold = j.value("threshold", 0.5);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task", std::string("bad task spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ------------------------------------------------------------ datasets

/// One labeled text. Single-label tasks carry exactly one entry in `labels`.
struct LabeledExample {
  std::string id;
  std::string text;
  std::vector<std::string> labels;

  bool operator==(const LabeledExample&) const = default;
};

/// JSONL with {"id","text","label"} or {"id","text","labels":[...]}.
inline std::vector<LabeledExample> parse_examples(const std::string& data) {
  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  for (const auto& line : corpus::detail::split_lines(data)) {
    ++line_no;
    if (corpus::detail::is_blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw RecordError("task", line_no, "invalid JSON");
    }
    if (!j.is_object()) throw RecordError("task", line_no, "record is not an object");
    LabeledExample e;
    try {
      e.id = j.at("id").get<std::string>();
      e.text = j.at("text").get<std::string>();
      const bool one = j.contains("label"), many = j.contains("labels");
      if (one == many) throw RecordError("task", line_no, "exactly one of \"label\" or \"labels\" is required");
      if (one)
        e.labels = {j["label"].get<std::string>()};
      else
        e.labels = j["labels"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
      throw RecordError("task", line_no, std::string("bad field: ") + ex.what());
    }
    if (e.id.empty()) throw RecordError("task", line_no, "empty id");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<LabeledExample> load_examples(const std::filesystem::path& path) {
  return parse_examples(corpus::detail::read_file(path));
}

inline nlohmann::ordered_json to_json(const LabeledExample& e, bool as_set) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["text"] = e.text;
  if (as_set)
    j["labels"] = e.labels;
  else
    j["label"] = e.labels.at(0);
  return j;
}

inline std::string examples_jsonl(const std::vector<LabeledExample>& examples, bool as_set) {
  std::string out;
  for (const auto& e : examples) out += to_json(e, as_set).dump() + "\n";
  return out;
}

/// Checks every example against the spec; throws ValidationError naming the id.
inline void check_examples(const TaskSpec& spec, std::span<const LabeledExample> examples) {
  for (const auto& e : examples) {
    if (spec.kind != TaskKind::multilabel && e.labels.size() != 1)
      throw ValidationError("task", "example " + e.id + " must carry exactly one label");
    std::set<std::string> seen;
    for (const auto& l : e.labels) {
      if (!seen.insert(l).second) throw ValidationError("task", "example " + e.id + " repeats label " + l);
      try {
        spec.index_of(l);
      } catch (const ValidationError&) {
        throw ValidationError("task", "example " + e.id + " has label \"" + l + "\" outside the task label set");
      }
    }
  }
}

/// Multi-hot target over the spec's label order.
inline std::vector<std::uint8_t> target_of(const TaskSpec& spec, const LabeledExample& e) {
  std::vector<std::uint8_t> t(spec.size(), 0);
  for (const auto& l : e.labels) t[spec.index_of(l)] = 1;
  return t;
}

struct EncodedExample {
  mlm::InputSequence seq;
  std::vector<std::uint8_t> target;  // empty when unlabeled
};

/// Normalizes and WordPiece-encodes `text` into a [CLS] ... [SEP] sequence.
inline mlm::InputSequence encode_text(const std::string& text, const tokenizer::Vocabulary& vocab, std::size_t max_len) {
  const auto ids = tokenizer::encode(corpus::normalize_text(text), vocab);
  return mlm::build_sequence(ids, max_len);
}

inline std::vector<EncodedExample> encode_examples(const TaskSpec& spec, std::span<const LabeledExample> examples,
                                                   const tokenizer::Vocabulary& vocab, std::size_t max_len) {
  check_examples(spec, examples);
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({encode_text(e.text, vocab, max_len), target_of(spec, e)});
  return out;
}

// ------------------------------------------------------------ parameters

template <typename T>
struct TaskParams {
  using Scalar = T;
  EncoderParams<T> encoder;
  Mat<T> cls_w;  // hidden x K
  Mat<T> cls_b;  // 1 x K

  static TaskParams zeros(const ModelConfig& cfg, std::size_t k) {
    return {EncoderParams<T>::zeros(cfg), Mat<T>::Zero(static_cast<Eigen::Index>(cfg.hidden), static_cast<Eigen::Index>(k)),
            Mat<T>::Zero(1, static_cast<Eigen::Index>(k))};
  }

  template <typename U>
  TaskParams<U> cast() const {
    return {encoder.template cast<U>(), cls_w.template cast<U>(), cls_b.template cast<U>()};
  }

  bool operator==(const TaskParams& o) const {
    return encoder == o.encoder && cls_w.rows() == o.cls_w.rows() && cls_w.cols() == o.cls_w.cols() &&
           cls_w == o.cls_w && cls_b == o.cls_b;
  }
};

template <typename P>
  requires requires(P& p) { p.cls_w; }
auto named_tensors(P& p) {
  auto out = model::named_tensors(p.encoder);
  out.emplace_back("classifier.weight", &p.cls_w);
  out.emplace_back("classifier.bias", &p.cls_b);
  return out;
}

struct FineTuneMeta {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 when never trained
  double best_metric = 0;
  std::uint64_t seed = 0;

  bool operator==(const FineTuneMeta&) const = default;
};

struct TaskModel {
  ModelConfig config;
  std::string vocab_fingerprint;
  model::TrainingMeta pretrain_meta;
  TaskSpec spec;
  TaskParams<float> params;
  FineTuneMeta finetune;

  bool operator==(const TaskModel&) const = default;
};

/// Copies the encoder and draws a fresh head: truncated-normal(0.02)
/// weights, zero bias.
inline TaskModel attach_head(const model::EncoderCheckpoint& ckpt, const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  ckpt.config.validate();
  TaskModel m;
  m.config = ckpt.config;
  m.vocab_fingerprint = ckpt.vocab_fingerprint;
  m.pretrain_meta = ckpt.meta;
  m.spec = spec;
  m.params.encoder = ckpt.params;
  m.params.cls_w.resize(static_cast<Eigen::Index>(ckpt.config.hidden), static_cast<Eigen::Index>(spec.size()));
  m.params.cls_b = Mat<float>::Zero(1, static_cast<Eigen::Index>(spec.size()));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < m.params.cls_w.size(); ++i)
    m.params.cls_w.data()[i] = static_cast<float>(rng.truncated_normal(0.02));
  m.finetune.seed = seed;
  return m;
}

// ------------------------------------------------------------ forward / loss

template <typename T>
struct PoolTrace {
  model::EncoderCache<T> enc;
  Mat<T> pooled;  // after dropout
  Mat<T> drop;
  Eigen::Index rows = 0;
};

/// Logits (1 x K) for one sequence. Only the attended prefix is encoded.
template <typename T>
Mat<T> sequence_logits(const TaskParams<T>& p, const ModelConfig& cfg, const mlm::InputSequence& s, Rng* rng,
                       PoolTrace<T>* trace) {
  const std::size_t n = s.real_length();
  if (n == 0) throw ConfigError("task", "sequence has no attended positions");
  const std::span<const TokenId> ids(s.ids.data(), n);
  const std::span<const std::uint8_t> types(s.type_ids.data(), n), mask(s.attention_mask.data(), n);
  Mat<T> h = model::encode_hidden<T>(p.encoder, cfg, ids, types, mask, rng, trace ? &trace->enc : nullptr);
  Mat<T> pooled = h.row(0);
  Mat<T> drop = model::ops::dropout_mask<T>(1, pooled.cols(), cfg.dropout, rng);
  model::ops::apply_mask(pooled, drop);
  Mat<T> z = model::ops::affine(pooled, p.cls_w, p.cls_b);
  if (trace) {
    trace->pooled = std::move(pooled);
    trace->drop = std::move(drop);
    trace->rows = h.rows();
  }
  return z;
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// Probabilities from one logit row: softmax, or elementwise sigmoid for multilabel.
template <typename T>
std::vector<double> probabilities(TaskKind kind, const Mat<T>& z) {
  std::vector<double> p(static_cast<std::size_t>(z.cols()));
  if (kind == TaskKind::multilabel) {
    for (Eigen::Index k = 0; k < z.cols(); ++k) p[static_cast<std::size_t>(k)] = sigmoid(static_cast<double>(z(0, k)));
    return p;
  }
  Mat<double> prob;
  std::vector<double> lse;
  model::ops::softmax_rows(z, prob, lse);
  for (Eigen::Index k = 0; k < z.cols(); ++k) p[static_cast<std::size_t>(k)] = prob(0, k);
  return p;
}

template <typename T>
struct ClassifyLoss {
  double loss = 0;
  TaskParams<T> grads;
};

/// Mean loss over the batch: cross-entropy for single-label tasks, mean
/// per-label binary cross-entropy for multilabel. With `dropout_seed`,
/// example i draws its masks from derive_seed(seed, i).
template <typename T>
ClassifyLoss<T> classify_loss(const TaskParams<T>& p, const ModelConfig& cfg, TaskKind kind,
                              std::span<const EncodedExample> batch, bool with_grads,
                              std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  if (batch.empty()) throw ConfigError("task", "empty batch");
  const auto k = static_cast<std::size_t>(p.cls_w.cols());
  ClassifyLoss<T> res;
  if (with_grads) res.grads = TaskParams<T>::zeros(cfg, k);
  const double scale = kind == TaskKind::multilabel ? 1.0 / static_cast<double>(batch.size() * k)
                                                    : 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    if (ex.target.size() != k) throw ConfigError("task", "target width does not match the head");
    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(derive_seed(*dropout_seed, i));
    PoolTrace<T> tr;
    Mat<T> z = sequence_logits<T>(p, cfg, ex.seq, rng ? &*rng : nullptr, with_grads ? &tr : nullptr);
    Mat<T> dz(1, z.cols());
    if (kind == TaskKind::multilabel) {
      for (std::size_t c = 0; c < k; ++c) {
        const double zc = static_cast<double>(z(0, static_cast<Eigen::Index>(c)));
        const double y = ex.target[c];
        total += std::max(zc, 0.0) - zc * y + std::log1p(std::exp(-std::abs(zc)));
        dz(0, static_cast<Eigen::Index>(c)) = static_cast<T>((sigmoid(zc) - y) * scale);
      }
    } else {
      const auto y = static_cast<Eigen::Index>(std::find(ex.target.begin(), ex.target.end(), 1) - ex.target.begin());
      if (y >= z.cols()) throw ConfigError("task", "single-label target has no positive class");
      Mat<double> prob;
      std::vector<double> lse;
      model::ops::softmax_rows(z, prob, lse);
      total += lse[0] - static_cast<double>(z(0, y));
      for (Eigen::Index c = 0; c < z.cols(); ++c) dz(0, c) = static_cast<T>((prob(0, c) - (c == y ? 1.0 : 0.0)) * scale);
    }
    if (!with_grads) continue;
    auto& g = res.grads;
    g.cls_w.noalias() += tr.pooled.transpose() * dz;
    g.cls_b += dz;
    Mat<T> dpooled(1, p.cls_w.rows());
    dpooled.noalias() = dz * p.cls_w.transpose();
    model::ops::apply_mask(dpooled, tr.drop);
    Mat<T> dh = Mat<T>::Zero(tr.rows, p.cls_w.rows());
    dh.row(0) = dpooled;
    model::backward_hidden<T>(p.encoder, cfg, tr.enc, std::move(dh), g.encoder);
  }
  res.loss = total * scale;
  return res;
}

/// Per-example probabilities in evaluation mode (no dropout).
inline std::vector<std::vector<double>> forward_classify(const TaskModel& m,
                                                         std::span<const mlm::InputSequence> seqs) {
  std::vector<std::vector<double>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    auto p = probabilities(m.spec.kind, sequence_logits<float>(m.params, m.config, s, nullptr, nullptr));
    for (double v : p)
      if (!std::isfinite(v)) throw NonFiniteError("task", "classifier probabilities");
    out.push_back(std::move(p));
  }
  return out;
}

inline void check_vocabulary(const TaskModel& m, const tokenizer::Vocabulary& vocab) {
  model::io::check_fingerprint(m.vocab_fingerprint, vocab.fingerprint());
}

/// Encodes raw texts with `vocab` (refusing a vocabulary other than the
/// model's) and returns per-text probabilities.
inline std::vector<std::vector<double>> forward_classify(const TaskModel& m, const tokenizer::Vocabulary& vocab,
                                                         std::span<const std::string> texts, std::size_t max_len) {
  check_vocabulary(m, vocab);
  std::vector<mlm::InputSequence> seqs;
  for (const auto& t : texts) seqs.push_back(encode_text(t, vocab, std::min(max_len, m.config.max_positions)));
  return forward_classify(m, seqs);
}

/// Argmax label (first in spec order on ties), or every label whose
/// probability reaches the threshold.
inline std::vector<std::string> predict_from_probs(const TaskSpec& spec, std::span<const double> probs) {
  if (probs.size() != spec.size()) throw ConfigError("task", "probability width does not match the label set");
  if (spec.kind == TaskKind::multilabel) {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < probs.size(); ++k)
      if (probs[k] >= spec.threshold) out.push_back(spec.labels[k]);
    return out;
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[best]) best = k;
  return {spec.labels[best]};
}

inline std::vector<std::vector<std::string>> predict(const TaskModel& m, const tokenizer::Vocabulary& vocab,
                                                     std::span<const std::string> texts, std::size_t max_len) {
  std::vector<std::vector<std::string>> out;
  for (const auto& p : forward_classify(m, vocab, texts, max_len)) out.push_back(predict_from_probs(m.spec, p));
  return out;
}

/// Accuracy for single-label tasks, mean per-label accuracy for multilabel.
inline double task_metric(const TaskSpec& spec, const std::vector<std::vector<double>>& probs,
                          std::span<const EncodedExample> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& y = data[i].target;
    if (spec.kind == TaskKind::multilabel) {
      for (std::size_t k = 0; k < y.size(); ++k) hits += (probs[i][k] >= spec.threshold) == (y[k] == 1);
      total += y.size();
    } else {
      const auto pred = spec.index_of(predict_from_probs(spec, probs[i]).front());
      hits += y[pred] == 1;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

inline double evaluate_metric(const TaskModel& m, std::span<const EncodedExample> data) {
  std::vector<mlm::InputSequence> seqs;
  for (const auto& e : data) seqs.push_back(e.seq);
  return task_metric(m.spec, forward_classify(m, seqs), data);
}

// ------------------------------------------------------------ fine-tuning

struct FineTuneConfig {
  double lr = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  double dropout_prob = 0.1;
  std::size_t patience = 0;  // 0 disables early stopping
  std::size_t max_len = 64;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("task", "lr must be positive");
    if (batch_size == 0) throw ConfigError("task", "batch_size must be positive");
    if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("task", "dropout_prob must lie in [0,1)");
    if (max_len < 3) throw ConfigError("task", "max_len must be at least 3");
    if (weight_decay < 0) throw ConfigError("task", "weight_decay must be non-negative");
  }

  bool operator==(const FineTuneConfig&) const = default;
};

inline nlohmann::ordered_json to_json(const FineTuneConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["dropout_prob"] = c.dropout_prob;
  j["patience"] = c.patience;
  j["max_len"] = c.max_len;
  j["weight_decay"] = c.weight_decay;
  return j;
}

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double train_loss;  // mean over the epoch's batches
  double metric;      // on validation data, or training data when none is given
  bool best;

  bool operator==(const EpochRecord&) const = default;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["metric"] = r.metric;
  j["best"] = r.best;
  return j;
}

struct FineTuneResult {
  TaskModel model;
  std::vector<EpochRecord> history;
  bool metric_on_train = false;
};

class FineTuneDiverged : public NonFiniteError {
 public:
  FineTuneDiverged(std::size_t epoch, std::size_t batch, const std::string& tensor)
      : NonFiniteError("task", tensor + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

/// Adam over every weight, per-epoch metric, best-metric weights returned.
/// Batches follow per-epoch permutations from (seed, epoch); dropout masks
/// for global step t come from (seed, t). When `val` is empty the metric
/// is measured on the training set.
inline FineTuneResult finetune(const TaskModel& start, std::span<const EncodedExample> train,
                               std::span<const EncodedExample> val, const FineTuneConfig& cfg,
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  start.spec.validate();
  if (train.empty()) throw ConfigError("task", "empty training set");
  FineTuneResult res;
  res.model = start;
  res.metric_on_train = val.empty();
  if (cfg.epochs == 0) return res;

  auto tcfg = start.config;
  tcfg.dropout = cfg.dropout_prob;
  auto params = start.params;
  model::AdamState<float> adam;
  adam.config.lr = cfg.lr;
  adam.config.weight_decay = cfg.weight_decay;
  const auto monitor = val.empty() ? train : val;

  std::optional<double> best;
  std::size_t since_best = 0;
  std::uint64_t step = 0;
  TaskModel probe = start;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, 1, epoch));
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size, ++step) {
      std::vector<EncodedExample> batch;
      for (std::size_t i = off; i < std::min(order.size(), off + cfg.batch_size); ++i) batch.push_back(train[order[i]]);
      auto lg = classify_loss<float>(params, tcfg, start.spec.kind, batch, true, derive_seed(cfg.seed, 2, step));
      if (!std::isfinite(lg.loss)) {
        auto bad = model::first_non_finite(params.encoder);
        throw FineTuneDiverged(epoch, batches, "loss" + (bad.empty() ? std::string() : " (first bad tensor " + bad + ")"));
      }
      auto p = model::tensor_list(params);
      auto g = model::tensor_list(std::as_const(lg.grads));
      model::adam_step<float>(std::span<Mat<float>* const>(p), std::span<const Mat<float>* const>(g), adam);
      for (auto& [name, t] : named_tensors(params))
        if (!t->allFinite()) throw FineTuneDiverged(epoch, batches, name);
      loss_sum += lg.loss;
      ++batches;
    }
    probe.params = params;
    const double metric = evaluate_metric(probe, monitor);
    const bool improved = !best || metric > *best;
    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), metric, improved};
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (improved) {
      best = metric;
      since_best = 0;
      res.model.params = params;
      res.model.finetune.best_epoch = epoch;
      res.model.finetune.best_metric = metric;
    } else if (cfg.patience && ++since_best >= cfg.patience) {
      break;
    }
  }
  res.model.finetune.epochs_run = res.history.size();
  res.model.finetune.seed = cfg.seed;
  return res;
}

// ------------------------------------------------------------ splits

struct Split {
  std::vector<LabeledExample> train, val, test;
};

/// Stratification key: the label for single-label tasks, the toxic flag
/// (non-empty label set) for multilabel.
inline std::string strata_key(const TaskSpec& spec, const LabeledExample& e) {
  if (spec.kind == TaskKind::multilabel) return e.labels.empty() ? "non-toxic" : "toxic";
  return e.labels.at(0);
}

/// Deterministic per seed. Each class (or the whole set when not
/// stratified) is shuffled and cut at round-half-up counts; members keep
/// their input order within each part.
inline Split split_dataset(const TaskSpec& spec, const std::vector<LabeledExample>& examples,
                           std::array<double, 3> ratios, std::uint64_t seed, bool stratify = true) {
  for (double r : ratios)
    if (!(r >= 0.0)) throw ConfigError("task", "split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("task", "split ratios must sum to 1");
  const auto parts = static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) groups[stratify ? strata_key(spec, examples[i]) : ""].push_back(i);

  std::vector<int> part_of(examples.size(), 0);
  std::uint64_t g = 0;
  for (auto& [key, members] : groups) {
    if (stratify && members.size() < parts)
      throw ConfigError("task", "class \"" + key + "\" has " + std::to_string(members.size()) +
                                    " examples, fewer than the " + std::to_string(parts) + " split parts");
    Rng rng(derive_seed(seed, g++));
    rng.shuffle(members);
    const double n = static_cast<double>(members.size());
    const auto n_train = std::min(members.size(), static_cast<std::size_t>(std::floor(n * ratios[0] + 0.5)));
    const auto n_val =
        std::min(members.size() - n_train, static_cast<std::size_t>(std::floor(n * ratios[1] + 0.5)));
    const auto n_test = ratios[2] > 0 ? members.size() - n_train - n_val : 0;
    // Without a test share any rounding remainder goes to train.
    const auto extra = members.size() - n_train - n_val - n_test;
    for (std::size_t i = 0; i < members.size(); ++i)
      part_of[members[i]] = i < n_train + extra ? 0 : i < n_train + extra + n_val ? 1 : 2;
  }
  Split s;
  for (std::size_t i = 0; i < examples.size(); ++i)
    (part_of[i] == 0 ? s.train : part_of[i] == 1 ? s.val : s.test).push_back(examples[i]);
  return s;
}

// ------------------------------------------------------------ search

struct SearchSpace {
  double lr_min = 1e-5;
  double lr_max = 1e-3;
  std::vector<std::size_t> batch_sizes{8, 16, 32};
  std::vector<std::size_t> epochs{2, 3, 4};

  void validate() const {
    if (!(lr_min > 0 && lr_max >= lr_min)) throw ConfigError("task", "learning-rate range must satisfy 0 < min <= max");
    if (batch_sizes.empty() || epochs.empty()) throw ConfigError("task", "batch-size and epoch sets must be non-empty");
  }
};

struct Trial {
  std::size_t index;
  FineTuneConfig config;
  std::optional<double> metric;  // absent when the trial diverged
  std::string error;
};

inline nlohmann::ordered_json to_json(const Trial& t) {
  nlohmann::ordered_json j;
  j["trial"] = t.index;
  j["config"] = to_json(t.config);
  j["metric"] = t.metric ? nlohmann::ordered_json(*t.metric) : nlohmann::ordered_json(nullptr);
  if (!t.error.empty()) j["error"] = t.error;
  return j;
}

struct SearchResult {
  std::size_t best_trial;
  FineTuneConfig best;
  std::vector<Trial> log;
};

class SearchFailed : public Error {
 public:
  explicit SearchFailed(std::vector<Trial> log)
      : Error("task", "all " + std::to_string(log.size()) + " search trials diverged"), log_(std::move(log)) {}

  const std::vector<Trial>& log() const noexcept { return log_; }

 private:
  std::vector<Trial> log_;
};

/// Trial i samples from derive_seed(seed, i): lr log-uniform, batch size
/// and epochs uniform over their sets; the trial's fine-tuning seed is the
/// same derived value. Highest metric wins, earliest trial on ties.
inline FineTuneConfig sample_config(const SearchSpace& space, const FineTuneConfig& base, std::uint64_t seed,
                                    std::size_t trial) {
  auto c = base;
  c.seed = derive_seed(seed, trial);
  Rng rng(c.seed);
  c.lr = std::exp(rng.uniform(std::log(space.lr_min), std::log(space.lr_max)));
  c.batch_size = space.batch_sizes[rng.below(space.batch_sizes.size())];
  c.epochs = space.epochs[rng.below(space.epochs.size())];
  return c;
}

inline SearchResult random_search(const SearchSpace& space, std::size_t trials, std::uint64_t seed,
                                  const FineTuneConfig& base,
                                  const std::function<double(const FineTuneConfig&)>& objective,
                                  std::size_t workers = 1) {
  space.validate();
  if (trials == 0) throw ConfigError("task", "random search needs at least one trial");
  std::vector<Trial> log(trials);
  for (std::size_t i = 0; i < trials; ++i) log[i] = {i, sample_config(space, base, seed, i), std::nullopt, {}};

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < trials;) {
      try {
        const double m = objective(log[i].config);
        if (std::isfinite(m))
          log[i].metric = m;
        else
          log[i].error = "non-finite objective";
      } catch (const NonFiniteError& e) {
        log[i].error = e.what();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, trials);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < trials; ++i)
    if (log[i].metric && (!best || *log[i].metric > *log[*best].metric)) best = i;
  if (!best) throw SearchFailed(std::move(log));
  return {*best, log[*best].config, std::move(log)};
}

/// Random search whose objective is the validation metric of finetune().
inline SearchResult random_search(const TaskModel& start, std::span<const EncodedExample> train,
                                  std::span<const EncodedExample> val, const SearchSpace& space, std::size_t trials,
                                  std::uint64_t seed, const FineTuneConfig& base = {}, std::size_t workers = 1) {
  return random_search(
      space, trials, seed, base,
      [&](const FineTuneConfig& c) { return finetune(start, train, val, c).model.finetune.best_metric; }, workers);
}

// ------------------------------------------------------------ persistence

/// Encoder checkpoint layout plus "classifier.weight"/"classifier.bias"
/// tensors and "task"/"finetune" header entries.
inline void save_task_model(const TaskModel& m, const std::filesystem::path& path) {
  model::EncoderCheckpoint enc{m.config, m.params.encoder, m.vocab_fingerprint, m.pretrain_meta};
  auto header = model::checkpoint_header(enc);
  header["task"] = to_json(m.spec);
  header["finetune"] = {{"epochs_run", m.finetune.epochs_run},
                        {"best_epoch", m.finetune.best_epoch},
                        {"best_metric", m.finetune.best_metric},
                        {"seed", m.finetune.seed}};
  model::io::NamedTensors tensors;
  for (auto& [name, t] : named_tensors(m.params)) tensors.emplace_back(name, t);
  model::io::write_file(path, model::io::encode(std::move(header), tensors));
}

inline TaskModel load_task_model(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_fingerprint = std::nullopt) {
  const auto d = model::io::decode(model::io::read_file(path));
  if (!d.header.contains("task")) throw FormatError("task", path.string() + " is an encoder checkpoint without a task head");
  model::EncoderCheckpoint enc;
  std::size_t next = model::checkpoint_from_decoded(d, enc);
  TaskModel m;
  m.config = enc.config;
  m.vocab_fingerprint = enc.vocab_fingerprint;
  m.pretrain_meta = enc.meta;
  m.spec = spec_from_json(d.header["task"]);
  m.params.encoder = std::move(enc.params);
  try {
    const auto& f = d.header.at("finetune");
    m.finetune = {f.at("epochs_run").get<std::size_t>(), f.at("best_epoch").get<std::size_t>(),
                  f.at("best_metric").get<double>(), f.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task", std::string("bad finetune header: ") + e.what());
  }
  const auto d_model = static_cast<Eigen::Index>(m.config.hidden), k = static_cast<Eigen::Index>(m.spec.size());
  auto take = [&](const char* name, Eigen::Index rows, Eigen::Index cols) {
    if (next >= d.tensors.size()) throw FormatError("task", std::string("missing tensor ") + name);
    const auto& [got, t] = d.tensors[next++];
    if (got != name) throw FormatError("task", "manifest entry " + got + " where " + name + " expected");
    if (t.rows() != rows || t.cols() != cols) throw FormatError("task", std::string("tensor ") + name + " has the wrong shape");
    return t;
  };
  m.params.cls_w = take("classifier.weight", d_model, k);
  m.params.cls_b = take("classifier.bias", 1, k);
  if (next != d.tensors.size()) throw FormatError("task", "unexpected extra tensors after the classifier");
  model::io::check_fingerprint(m.vocab_fingerprint, expected_fingerprint);
  return m;
}

}  // namespace somnlp::task
