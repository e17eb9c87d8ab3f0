#pragma once

// Scores a fine-tuned task model on labeled examples.

#include <span>
#include <string>
#include <vector>

#include "somnlp/metrics.hpp"
#include "somnlp/task_heads.hpp"

namespace somnlp::task {

struct Evaluation {
  eval::MetricsReport metrics;
  std::vector<std::vector<std::string>> predictions;  // one label set per example
};

/// Single-label tasks go through the confusion matrix; multilabel tasks
/// through per-label binary confusions (accuracy = exact set match).
inline Evaluation evaluate_examples(const TaskModel& m, const tokenizer::Vocabulary& vocab,
                                    std::span<const LabeledExample> data, std::size_t max_len) {
  check_examples(m.spec, data);
  std::vector<std::string> texts;
  std::vector<std::vector<std::string>> gold;
  for (const auto& e : data) {
    texts.push_back(e.text);
    gold.push_back(e.labels);
  }
  Evaluation ev;
  ev.predictions = predict(m, vocab, texts, max_len);
  if (m.spec.kind == TaskKind::multilabel) {
    ev.metrics = eval::multilabel_metrics(gold, ev.predictions, m.spec.labels);
  } else {
    std::vector<std::string> g, p;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      g.push_back(gold[i].front());
      p.push_back(ev.predictions[i].front());
    }
    ev.metrics = eval::metrics_from_confusion(eval::confusion_matrix(g, p, m.spec.labels));
  }
  return ev;
}

}  // namespace somnlp::task
