#pragma once

// Classification metrics and comparison tables.
//
// Every reported value is the correctly rounded double of an exact
// rational: single ratios are one integer division, macro means are summed
// as exact rationals first.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "json.hpp"
#include "somnlp/error.hpp"

namespace somnlp::eval {

using Rational = boost::multiprecision::cpp_rational;

/// n / d as a double, 0 when d == 0.
inline double ratio(std::uint64_t n, std::uint64_t d) {
  return d == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(d);
}

inline Rational exact_ratio(std::uint64_t n, std::uint64_t d) {
  return d == 0 ? Rational(0) : Rational(boost::multiprecision::cpp_int(n), boost::multiprecision::cpp_int(d));
}

struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::uint64_t>> counts;  // [gold][pred]

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : counts)
      for (auto c : r) t += c;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) t += counts[k][k];
    return t;
  }
  std::uint64_t tp(std::size_t k) const { return counts[k][k]; }
  std::uint64_t fp(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t g = 0; g < counts.size(); ++g) s += g == k ? 0 : counts[g][k];
    return s;
  }
  std::uint64_t fn(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < counts.size(); ++p) s += p == k ? 0 : counts[k][p];
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

namespace detail {

inline std::map<std::string, std::size_t> label_index(const std::vector<std::string>& label_set) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < label_set.size(); ++i)
    if (!idx.emplace(label_set[i], i).second) throw ConfigError("eval", "duplicate label \"" + label_set[i] + "\"");
  return idx;
}

inline std::size_t lookup(const std::map<std::string, std::size_t>& idx, const std::string& l) {
  auto it = idx.find(l);
  if (it == idx.end()) throw ValidationError("eval", "unknown label \"" + l + "\"");
  return it->second;
}

}  // namespace detail

inline ConfusionMatrix confusion_matrix(std::span<const std::string> gold, std::span<const std::string> pred,
                                        const std::vector<std::string>& label_set) {
  if (gold.size() != pred.size())
    throw ValidationError("eval", "gold has " + std::to_string(gold.size()) + " labels, predictions " +
                                      std::to_string(pred.size()));
  if (gold.empty()) throw ValidationError("eval", "nothing to evaluate");
  const auto idx = detail::label_index(label_set);
  ConfusionMatrix cm{label_set, std::vector<std::vector<std::uint64_t>>(label_set.size(),
                                                                        std::vector<std::uint64_t>(label_set.size(), 0))};
  for (std::size_t i = 0; i < gold.size(); ++i) ++cm.counts[detail::lookup(idx, gold[i])][detail::lookup(idx, pred[i])];
  return cm;
}

struct ClassMetrics {
  std::string label;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;
  double accuracy = 0;  // (tp + tn) / n, one-vs-rest
  std::uint64_t support = 0;

  bool operator==(const ClassMetrics&) const = default;
};

struct Aggregate {
  double precision = 0, recall = 0, f1 = 0;
  bool operator==(const Aggregate&) const = default;
};

struct MetricsReport {
  std::size_t examples = 0;
  double accuracy = 0;  // subset accuracy for multilabel
  std::vector<ClassMetrics> per_class;
  Aggregate macro, micro;
  std::optional<double> subset_accuracy;      // multilabel only
  std::optional<double> mean_label_accuracy;  // multilabel only

  bool operator==(const MetricsReport&) const = default;
};

namespace detail {

inline ClassMetrics class_metrics(std::string label, std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                  std::uint64_t tn) {
  ClassMetrics c{std::move(label), tp, fp, fn, tn};
  c.precision = ratio(tp, tp + fp);
  c.recall = ratio(tp, tp + fn);
  // Equal to the harmonic mean of precision and recall whenever both are
  // non-zero, and 0 otherwise.
  c.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  c.accuracy = ratio(tp + tn, tp + fp + fn + tn);
  c.support = tp + fn;
  return c;
}

inline void fill_aggregates(MetricsReport& r) {
  Rational p = 0, rc = 0, f = 0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (const auto& c : r.per_class) {
    p += exact_ratio(c.tp, c.tp + c.fp);
    rc += exact_ratio(c.tp, c.tp + c.fn);
    f += exact_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    tp += c.tp, fp += c.fp, fn += c.fn;
  }
  const Rational k(static_cast<std::uint64_t>(r.per_class.size()));
  r.macro = {static_cast<double>(p / k), static_cast<double>(rc / k), static_cast<double>(f / k)};
  r.micro = {ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(2 * tp, 2 * tp + fp + fn)};
}

}  // namespace detail

/// Accuracy, per-class P/R/F1 (0 when a denominator is 0), unweighted macro
/// means and pooled micro values. For single-label data micro-F1 equals
/// accuracy exactly.
inline MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw ValidationError("eval", "empty confusion matrix");
  MetricsReport r;
  r.examples = n;
  r.accuracy = ratio(cm.trace(), n);
  for (std::size_t k = 0; k < cm.labels.size(); ++k) {
    const auto tp = cm.tp(k), fp = cm.fp(k), fn = cm.fn(k);
    r.per_class.push_back(detail::class_metrics(cm.labels[k], tp, fp, fn, n - tp - fp - fn));
  }
  detail::fill_aggregates(r);
  return r;
}

/// Per-label binary confusion for set-valued labels, plus subset accuracy
/// and the mean of per-label accuracies.
inline MetricsReport multilabel_metrics(std::span<const std::vector<std::string>> gold,
                                        std::span<const std::vector<std::string>> pred,
                                        const std::vector<std::string>& label_set) {
  if (gold.size() != pred.size()) throw ValidationError("eval", "gold and prediction counts differ");
  if (gold.empty()) throw ValidationError("eval", "nothing to evaluate");
  const auto idx = detail::label_index(label_set);
  const std::size_t k = label_set.size();
  std::vector<std::uint64_t> tp(k), fp(k), fn(k), tn(k);
  std::uint64_t exact = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::vector<bool> g(k), p(k);
    for (const auto& l : gold[i]) g[detail::lookup(idx, l)] = true;
    for (const auto& l : pred[i]) p[detail::lookup(idx, l)] = true;
    exact += g == p;
    for (std::size_t c = 0; c < k; ++c) {
      if (g[c] && p[c]) ++tp[c];
      else if (p[c]) ++fp[c];
      else if (g[c]) ++fn[c];
      else ++tn[c];
    }
  }
  MetricsReport r;
  r.examples = gold.size();
  r.subset_accuracy = r.accuracy = ratio(exact, gold.size());
  Rational acc = 0;
  for (std::size_t c = 0; c < k; ++c) {
    r.per_class.push_back(detail::class_metrics(label_set[c], tp[c], fp[c], fn[c], tn[c]));
    acc += exact_ratio(tp[c] + tn[c], gold.size());
  }
  r.mean_label_accuracy = static_cast<double>(acc / Rational(static_cast<std::uint64_t>(k)));
  detail::fill_aggregates(r);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["examples"] = r.examples;
  j["accuracy"] = r.accuracy;
  if (r.subset_accuracy) j["subset_accuracy"] = *r.subset_accuracy;
  if (r.mean_label_accuracy) j["mean_label_accuracy"] = *r.mean_label_accuracy;
  j["macro"] = {{"precision", r.macro.precision}, {"recall", r.macro.recall}, {"f1", r.macro.f1}};
  j["micro"] = {{"precision", r.micro.precision}, {"recall", r.micro.recall}, {"f1", r.micro.f1}};
  auto& pc = j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& c : r.per_class)
    pc.push_back({{"label", c.label},
                  {"precision", c.precision},
                  {"recall", c.recall},
                  {"f1", c.f1},
                  {"accuracy", c.accuracy},
                  {"support", c.support},
                  {"tp", c.tp},
                  {"fp", c.fp},
                  {"fn", c.fn},
                  {"tn", c.tn}});
  return j;
}

// ------------------------------------------------------------ averages

/// Percentages are handled in integer micro-units so that ties such as
/// 86.175 round half-up exactly.
inline std::int64_t to_micro(double v) {
  if (!std::isfinite(v) || std::abs(v) > 1e12) throw ValidationError("eval", "accuracy value out of range");
  return std::llround(v * 1e6);
}

/// Arithmetic mean rounded half-up to 2 decimals.
inline double average_accuracy(std::span<const double> values) {
  if (values.empty()) throw ValidationError("eval", "average of an empty list");
  std::int64_t sum = 0;
  for (double v : values) sum += to_micro(v);
  const auto n = static_cast<std::int64_t>(values.size());
  // floor((sum / n + 0.005) * 100) in micro-units: floor((2*sum + n*1e4) / (2*n*1e4)).
  const std::int64_t num = 2 * sum + n * 10000, den = 2 * n * 10000;
  std::int64_t q = num / den;
  if ((num % den != 0) && ((num < 0) != (den < 0))) --q;
  return static_cast<double>(q) / 100.0;
}

// ------------------------------------------------------------ reports

struct ReportRow {
  std::string model;
  std::string size;
  std::vector<double> scores;  // one per task column

  bool operator==(const ReportRow&) const = default;
};

struct ComparisonTable {
  std::vector<std::string> tasks;
  std::vector<ReportRow> rows;
  std::vector<std::string> footnotes;

  void validate() const {
    if (tasks.empty()) throw ValidationError("eval", "report needs at least one task column");
    for (const auto& r : rows)
      if (r.scores.size() != tasks.size())
        throw ValidationError("eval", "row \"" + r.model + "\" has " + std::to_string(r.scores.size()) +
                                          " scores for " + std::to_string(tasks.size()) + " task columns");
  }

  std::vector<double> averages() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(average_accuracy(r.scores));
    return out;
  }

  bool operator==(const ComparisonTable&) const = default;
};

/// Builds a table from model -> task -> accuracy. Columns follow `tasks`
/// when given, otherwise sorted task names; rows keep the map's order.
inline ComparisonTable table_from_map(const std::map<std::string, std::map<std::string, double>>& entries,
                                      std::vector<std::string> tasks = {}) {
  if (tasks.empty()) {
    std::set<std::string> all;
    for (const auto& [_, m] : entries)
      for (const auto& [t, __] : m) all.insert(t);
    tasks.assign(all.begin(), all.end());
  }
  ComparisonTable t;
  t.tasks = tasks;
  for (const auto& [model, m] : entries) {
    if (m.size() != tasks.size()) throw ValidationError("eval", "row \"" + model + "\" does not cover every task column");
    ReportRow r{model, "", {}};
    for (const auto& task : tasks) {
      auto it = m.find(task);
      if (it == m.end()) throw ValidationError("eval", "row \"" + model + "\" lacks task \"" + task + "\"");
      r.scores.push_back(it->second);
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

enum class ReportFormat { markdown, csv };

namespace detail {

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Markdown bolds every cell equal to its column maximum (ties all bold);
/// CSV writes shortest round-trip numbers. The average column is appended.
inline std::string render_report(const ComparisonTable& t, ReportFormat format) {
  t.validate();
  const auto avg = t.averages();
  const std::size_t cols = t.tasks.size() + 1;
  auto cell = [&](std::size_t r, std::size_t c) { return c < t.tasks.size() ? t.rows[r].scores[c] : avg[r]; };
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    out << "model,size";
    for (const auto& task : t.tasks) out << ',' << detail::csv_field(task);
    out << ",Average\n";
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      out << detail::csv_field(t.rows[r].model) << ',' << detail::csv_field(t.rows[r].size);
      for (std::size_t c = 0; c < cols; ++c) out << ',' << detail::shortest(cell(r, c));
      out << '\n';
    }
    return out.str();
  }
  std::vector<double> best(cols, -INFINITY);
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) best[c] = std::max(best[c], cell(r, c));
  out << "| Model | Model Size |";
  for (const auto& task : t.tasks) out << ' ' << task << " |";
  out << " Average |\n|---|---|";
  for (std::size_t c = 0; c < cols; ++c) out << "---:|";
  out << '\n';
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out << "| " << t.rows[r].model << " | " << t.rows[r].size << " |";
    for (std::size_t c = 0; c < cols; ++c) {
      const auto s = detail::fixed2(cell(r, c));
      out << ' ' << (cell(r, c) == best[c] ? "**" + s + "**" : s) << " |";
    }
    out << '\n';
  }
  for (std::size_t i = 0; i < t.footnotes.size(); ++i) out << (i == 0 ? "\n" : "") << "[" << i + 1 << "] " << t.footnotes[i] << '\n';
  return out.str();
}

namespace detail {

inline std::vector<std::string> csv_row(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') out.back() += '"', ++i;
      else if (c == '"') quoted = false;
      else out.back() += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

inline double parse_number(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("eval", "not a number: \"" + s + "\"");
  return v;
}

}  // namespace detail

/// Reads a table written by render_report(..., csv). The Average column is
/// recomputed, not trusted; a mismatch is a format error.
inline ComparisonTable parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("eval", "empty report");
  const auto head = detail::csv_row(line);
  if (head.size() < 4 || head[0] != "model" || head[1] != "size" || head.back() != "Average")
    throw FormatError("eval", "report header must be model,size,<tasks...>,Average");
  ComparisonTable t;
  t.tasks.assign(head.begin() + 2, head.end() - 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::csv_row(line);
    if (f.size() != head.size()) throw RecordError("eval", line_no, "wrong number of fields");
    ReportRow r{f[0], f[1], {}};
    for (std::size_t c = 2; c + 1 < f.size(); ++c) r.scores.push_back(detail::parse_number(f[c]));
    if (detail::parse_number(f.back()) != average_accuracy(r.scores))
      throw RecordError("eval", line_no, "Average column disagrees with the task scores");
    t.rows.push_back(std::move(r));
  }
  return t;
}

}  // namespace somnlp::eval
