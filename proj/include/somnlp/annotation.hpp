#pragma once

// Two-annotator, two-stage labeling campaigns. Stage 1 is a binary judgment
// (fake/real or toxic/non-toxic); stage 2 assigns toxicity categories to
// items judged toxic. Submissions go to an append-only JSONL log that is
// replayed on open.

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "somnlp/corpus.hpp"
#include "somnlp/error.hpp"
#include "somnlp/task_heads.hpp"

namespace somnlp::annotation {

enum class Task { fakenews, toxicity };

inline std::string to_string(Task t) { return t == Task::fakenews ? "fakenews" : "toxicity"; }

inline Task task_from_string(const std::string& s) {
  if (s == "fakenews") return Task::fakenews;
  if (s == "toxicity") return Task::toxicity;
  throw ValidationError("annotation", "unknown task \"" + s + "\" (fakenews, toxicity)");
}

/// Stage-1 labels; the first entry is the positive class.
inline const std::array<std::string, 2>& stage1_labels(Task t) {
  static const std::array<std::string, 2> fake{"fake", "real"}, tox{"toxic", "non-toxic"};
  return t == Task::fakenews ? fake : tox;
}

struct AnnotationItem {
  std::string id;
  std::string text;
  Task task = Task::fakenews;
  std::string source;

  bool operator==(const AnnotationItem&) const = default;
};

inline nlohmann::ordered_json to_json(const AnnotationItem& item) {
  return {{"id", item.id}, {"text", item.text}, {"task", to_string(item.task)}, {"source", item.source}};
}

/// JSONL with {"id","text","task","source"}; "source" may be omitted.
inline std::vector<AnnotationItem> parse_items(const std::string& data) {
  std::vector<AnnotationItem> out;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  for (const auto& line : corpus::detail::split_lines(data)) {
    ++line_no;
    if (corpus::detail::is_blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw RecordError("annotation", line_no, "invalid JSON");
    }
    if (!j.is_object()) throw RecordError("annotation", line_no, "record is not an object");
    AnnotationItem item;
    try {
      item.id = j.at("id").get<std::string>();
      item.text = j.at("text").get<std::string>();
      item.task = task_from_string(j.at("task").get<std::string>());
      if (j.contains("source") && !j["source"].is_null()) item.source = j["source"].get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw RecordError("annotation", line_no, std::string("bad field: ") + ex.what());
    } catch (const ValidationError& ex) {
      throw RecordError("annotation", line_no, ex.what());
    }
    if (item.id.empty()) throw RecordError("annotation", line_no, "empty id");
    if (corpus::detail::is_blank(item.text)) throw RecordError("annotation", line_no, "empty text");
    if (!ids.insert(item.id).second) throw RecordError("annotation", line_no, "duplicate item id " + item.id);
    out.push_back(std::move(item));
  }
  return out;
}

inline std::vector<AnnotationItem> load_items(const std::filesystem::path& path) {
  return parse_items(corpus::detail::read_file(path));
}

struct AnnotationRecord {
  std::string item_id;
  std::string annotator_id;
  std::string stage1;
  std::optional<std::vector<std::string>> stage2;
  std::string timestamp;

  bool operator==(const AnnotationRecord&) const = default;
};

inline nlohmann::ordered_json to_json(const AnnotationRecord& r) {
  nlohmann::ordered_json j{{"item_id", r.item_id}, {"annotator_id", r.annotator_id}, {"stage1", r.stage1}};
  if (r.stage2) j["stage2"] = *r.stage2;
  j["timestamp"] = r.timestamp;
  return j;
}

/// Shape check only; the protocol rules live in `check_record`.
inline AnnotationRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("annotation", "record is not an object");
  AnnotationRecord r;
  try {
    r.item_id = j.at("item_id").get<std::string>();
    r.annotator_id = j.at("annotator_id").get<std::string>();
    r.stage1 = j.at("stage1").get<std::string>();
    if (j.contains("stage2") && !j["stage2"].is_null()) r.stage2 = j["stage2"].get<std::vector<std::string>>();
    if (j.contains("timestamp") && !j["timestamp"].is_null()) r.timestamp = j["timestamp"].get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError("annotation", std::string("bad record field: ") + ex.what());
  }
  return r;
}

/// Stage-1 label in the item's task set; stage 2 only on toxic toxicity
/// items, drawn from the six categories without repeats.
inline void check_record(const AnnotationItem& item, const AnnotationRecord& r) {
  const auto& allowed = stage1_labels(item.task);
  if (r.stage1 != allowed[0] && r.stage1 != allowed[1])
    throw ValidationError("annotation", "stage1 \"" + r.stage1 + "\" is not a " + to_string(item.task) + " label");
  if (!r.stage2) return;
  if (item.task != Task::toxicity) throw ValidationError("annotation", "stage2 is only defined for toxicity items");
  if (r.stage1 != "toxic") {
    if (!r.stage2->empty()) throw ValidationError("annotation", "stage2 requires stage1 = toxic");
    return;
  }
  const auto& cats = task::toxicity_categories();
  std::set<std::string> seen;
  for (const auto& c : *r.stage2) {
    if (std::find(cats.begin(), cats.end(), c) == cats.end())
      throw ValidationError("annotation", "unknown toxicity category \"" + c + "\"");
    if (!seen.insert(c).second) throw ValidationError("annotation", "stage2 repeats \"" + c + "\"");
  }
}

/// UTC, millisecond resolution, e.g. 2024-05-01T12:00:00.123Z.
inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  const auto n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms % 1000));
  return buf;
}

struct AnnotatorProgress {
  std::string annotator;
  std::size_t labeled = 0;
  std::size_t remaining = 0;

  bool operator==(const AnnotatorProgress&) const = default;
};

struct Progress {
  std::size_t total = 0;
  std::size_t complete = 0;  // items labeled by both annotators
  std::vector<AnnotatorProgress> annotators;

  bool operator==(const Progress&) const = default;
};

inline nlohmann::ordered_json to_json(const Progress& p) {
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& x : p.annotators) a[x.annotator] = {{"labeled", x.labeled}, {"remaining", x.remaining}};
  return {{"total", p.total}, {"complete", p.complete}, {"annotators", a}};
}

/// Items, the two annotators, and every accepted record. Thread-safe:
/// submissions take an exclusive lock and reach the log before the
/// in-memory state changes; reads share a lock.
class Campaign {
 public:
  Campaign(std::vector<AnnotationItem> items, std::vector<std::string> annotators,
           std::optional<std::filesystem::path> log = std::nullopt)
      : items_(std::move(items)), log_path_(std::move(log)) {
    if (items_.empty()) throw ConfigError("annotation", "a campaign needs at least one item");
    if (annotators.size() != 2)
      throw ConfigError("annotation", "a campaign needs exactly two annotators, got " + std::to_string(annotators.size()));
    if (annotators[0].empty() || annotators[1].empty()) throw ConfigError("annotation", "empty annotator id");
    if (annotators[0] == annotators[1]) throw ConfigError("annotation", "the two annotators must differ");
    annotators_ = {annotators[0], annotators[1]};
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (!index_.emplace(items_[i].id, i).second)
        throw ConfigError("annotation", "duplicate item id " + items_[i].id);
      if (corpus::detail::is_blank(items_[i].text)) throw ConfigError("annotation", "item " + items_[i].id + " has empty text");
    }
    for (auto& v : done_) v.assign(items_.size(), std::nullopt);
    if (log_path_) replay();
  }

  Campaign(const Campaign&) = delete;
  Campaign& operator=(const Campaign&) = delete;

  const std::vector<AnnotationItem>& items() const noexcept { return items_; }
  const std::array<std::string, 2>& annotators() const noexcept { return annotators_; }
  const std::optional<std::filesystem::path>& log_path() const noexcept { return log_path_; }

  const AnnotationItem& item(const std::string& id) const { return items_[item_index(id)]; }

  /// Lowest-ordinal item the annotator has not labeled yet.
  std::optional<AnnotationItem> next_item(const std::string& annotator) const {
    std::shared_lock lock(mu_);
    const auto a = annotator_index(annotator);
    for (std::size_t i = cursor_[a]; i < items_.size(); ++i)
      if (!done_[a][i]) return items_[i];
    return std::nullopt;
  }

  /// Validates, logs and stores. An empty timestamp is filled in.
  /// ConflictError for a second record on the same (item, annotator).
  AnnotationRecord submit(AnnotationRecord r) {
    std::unique_lock lock(mu_);
    accept(r);
    if (r.timestamp.empty()) r.timestamp = utc_timestamp();
    if (log_) {
      *log_ << to_json(r).dump() << '\n';
      log_->flush();
      if (!*log_) throw IoError("annotation", "cannot append to " + log_path_->string());
    }
    store(r);
    return r;
  }

  /// Accepted records in submission order.
  std::vector<AnnotationRecord> records() const {
    std::shared_lock lock(mu_);
    return records_;
  }

  Progress progress() const {
    std::shared_lock lock(mu_);
    Progress p;
    p.total = items_.size();
    for (std::size_t i = 0; i < items_.size(); ++i) p.complete += done_[0][i] && done_[1][i];
    for (std::size_t a = 0; a < 2; ++a) p.annotators.push_back({annotators_[a], labeled_[a], items_.size() - labeled_[a]});
    return p;
  }

 private:
  std::size_t item_index(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("annotation", "unknown item " + id);
    return it->second;
  }

  std::size_t annotator_index(const std::string& id) const {
    if (id == annotators_[0]) return 0;
    if (id == annotators_[1]) return 1;
    throw ValidationError("annotation", "unknown annotator " + id);
  }

  void accept(const AnnotationRecord& r) const {
    const auto a = annotator_index(r.annotator_id);
    const auto i = item_index(r.item_id);
    check_record(items_[i], r);
    if (done_[a][i]) throw ConflictError("annotation", r.annotator_id + " already labeled " + r.item_id);
  }

  void store(const AnnotationRecord& r) {
    const auto a = annotator_index(r.annotator_id);
    const auto i = item_index(r.item_id);
    done_[a][i] = records_.size();
    records_.push_back(r);
    ++labeled_[a];
    while (cursor_[a] < items_.size() && done_[a][cursor_[a]]) ++cursor_[a];
  }

  /// A torn final line (no trailing newline) is a crash mid-append; it is
  /// cut off before new records are written. Any other bad line is an error.
  void replay() {
    std::string data;
    if (std::filesystem::exists(*log_path_)) {
      data = corpus::detail::read_file(*log_path_);
      const auto keep = data.empty() || data.back() == '\n' ? data.size() : data.rfind('\n') + 1;
      if (keep != data.size()) {
        data.resize(keep);
        std::filesystem::resize_file(*log_path_, keep);
      }
    }
    std::size_t line_no = 0;
    for (const auto& line : corpus::detail::split_lines(data)) {
      ++line_no;
      if (corpus::detail::is_blank(line)) continue;
      try {
        auto r = record_from_json(nlohmann::json::parse(line));
        accept(r);
        store(r);
      } catch (const nlohmann::json::parse_error&) {
        throw RecordError("annotation", line_no, "invalid JSON in " + log_path_->string());
      } catch (const Error& ex) {
        throw RecordError("annotation", line_no, ex.what());
      }
    }
    log_.emplace(*log_path_, std::ios::binary | std::ios::app);
    if (!*log_) throw IoError("annotation", "cannot open " + log_path_->string());
  }

  std::vector<AnnotationItem> items_;
  std::array<std::string, 2> annotators_;
  std::unordered_map<std::string, std::size_t> index_;
  std::array<std::vector<std::optional<std::size_t>>, 2> done_;  // record index per item
  std::array<std::size_t, 2> cursor_{0, 0};
  std::array<std::size_t, 2> labeled_{0, 0};
  std::vector<AnnotationRecord> records_;
  std::optional<std::filesystem::path> log_path_;
  std::optional<std::ofstream> log_;
  mutable std::shared_mutex mu_;
};

/// Records of a campaign log, in file order, without campaign checks.
/// A torn final line is ignored.
inline std::vector<AnnotationRecord> read_log(const std::filesystem::path& path) {
  auto data = corpus::detail::read_file(path);
  if (!data.empty() && data.back() != '\n') data.resize(data.rfind('\n') == std::string::npos ? 0 : data.rfind('\n') + 1);
  std::vector<AnnotationRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : corpus::detail::split_lines(data)) {
    ++line_no;
    if (corpus::detail::is_blank(line)) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error&) {
      throw RecordError("annotation", line_no, "invalid JSON in " + path.string());
    } catch (const ValidationError& ex) {
      throw RecordError("annotation", line_no, ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- resolution

enum class Status { retained, discarded };

inline std::string to_string(Status s) { return s == Status::retained ? "retained" : "discarded"; }

struct ResolvedLabel {
  std::string item_id;
  Task task = Task::fakenews;
  Status status = Status::discarded;
  std::array<std::string, 2> stage1;  // per annotator, ascending annotator id
  std::optional<std::string> label;
  std::optional<std::vector<std::string>> categories;  // retained toxic items only

  bool operator==(const ResolvedLabel&) const = default;
};

struct Resolution {
  std::vector<ResolvedLabel> resolved;  // item order
  std::vector<std::string> incomplete;  // items without exactly two records from distinct annotators
  std::size_t retained = 0;
  std::size_t discarded = 0;
  std::size_t total = 0;
};

inline nlohmann::ordered_json to_json(const ResolvedLabel& r) {
  nlohmann::ordered_json j{{"item_id", r.item_id}, {"task", to_string(r.task)}, {"status", to_string(r.status)},
                           {"stage1", r.stage1}};
  if (r.label) j["label"] = *r.label;
  if (r.categories) j["categories"] = *r.categories;
  return j;
}

/// Agreement on stage 1 retains the item with that label; disagreement
/// discards it. Retained toxic items get the intersection of the two
/// category sets, in canonical category order.
inline Resolution resolve_agreement(const std::vector<AnnotationItem>& items, const std::vector<AnnotationRecord>& records) {
  std::unordered_map<std::string, std::vector<const AnnotationRecord*>> by_item;
  for (const auto& it : items) by_item[it.id];
  for (const auto& r : records) {
    auto f = by_item.find(r.item_id);
    if (f == by_item.end()) throw ValidationError("annotation", "record for unknown item " + r.item_id);
    f->second.push_back(&r);
  }
  Resolution out;
  out.total = items.size();
  const auto& cats = task::toxicity_categories();
  for (const auto& item : items) {
    auto recs = by_item[item.id];
    if (recs.size() != 2 || recs[0]->annotator_id == recs[1]->annotator_id) {
      out.incomplete.push_back(item.id);
      continue;
    }
    std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) { return a->annotator_id < b->annotator_id; });
    ResolvedLabel res{item.id, item.task, Status::discarded, {recs[0]->stage1, recs[1]->stage1}, {}, {}};
    if (recs[0]->stage1 == recs[1]->stage1) {
      res.status = Status::retained;
      res.label = recs[0]->stage1;
      if (item.task == Task::toxicity && *res.label == "toxic") {
        const auto s0 = recs[0]->stage2.value_or(std::vector<std::string>{});
        const auto s1 = recs[1]->stage2.value_or(std::vector<std::string>{});
        res.categories.emplace();
        for (const auto& c : cats)
          if (std::count(s0.begin(), s0.end(), c) && std::count(s1.begin(), s1.end(), c)) res.categories->push_back(c);
      }
      ++out.retained;
    } else {
      ++out.discarded;
    }
    out.resolved.push_back(std::move(res));
  }
  return out;
}

// ---------------------------------------------------------------- agreement

struct AgreementStats {
  std::size_t items = 0;
  std::size_t agreed = 0;
  double raw_agreement_rate = 0;
  double p_e = 0;
  std::optional<double> cohen_kappa;  // nullopt when p_e = 1
};

/// Cohen's kappa over stage-1 labels of the resolved pairs. Rater 1 is the
/// lexicographically smaller annotator id on every item.
inline AgreementStats agreement_stats(const std::vector<ResolvedLabel>& pairs) {
  if (pairs.empty()) throw ValidationError("annotation", "agreement needs at least one double-labeled item");
  std::map<std::string, std::array<std::size_t, 2>> marginal;
  AgreementStats s;
  s.items = pairs.size();
  for (const auto& p : pairs) {
    s.agreed += p.stage1[0] == p.stage1[1];
    ++marginal[p.stage1[0]][0];
    ++marginal[p.stage1[1]][1];
  }
  const auto n = static_cast<double>(s.items);
  std::size_t expected = 0;  // sum over labels of n1k * n2k
  for (const auto& [label, m] : marginal) expected += m[0] * m[1];
  s.raw_agreement_rate = static_cast<double>(s.agreed) / n;
  s.p_e = static_cast<double>(expected) / (n * n);
  if (expected != s.items * s.items) s.cohen_kappa = (s.raw_agreement_rate - s.p_e) / (1.0 - s.p_e);
  return s;
}

inline AgreementStats agreement_stats(const std::vector<AnnotationItem>& items, const std::vector<AnnotationRecord>& records) {
  return agreement_stats(resolve_agreement(items, records).resolved);
}

inline nlohmann::ordered_json to_json(const AgreementStats& s) {
  nlohmann::ordered_json j{{"items", s.items}, {"agreed", s.agreed}, {"raw_agreement_rate", s.raw_agreement_rate},
                           {"expected_agreement", s.p_e}};
  j["cohen_kappa"] = s.cohen_kappa ? nlohmann::ordered_json(*s.cohen_kappa) : nlohmann::ordered_json(nullptr);
  j["kappa_defined"] = s.cohen_kappa.has_value();
  return j;
}

/// Summary counts, per-task and overall agreement, and the per-item pairs.
inline nlohmann::ordered_json agreement_report(const std::vector<AnnotationItem>& items,
                                               const std::vector<AnnotationRecord>& records,
                                               std::vector<std::string> annotators) {
  const auto res = resolve_agreement(items, records);
  nlohmann::ordered_json j{{"total", res.total}, {"retained", res.retained}, {"discarded", res.discarded},
                           {"incomplete", res.incomplete.size()}};
  auto stats_or_null = [](const std::vector<ResolvedLabel>& v) {
    return v.empty() ? nlohmann::ordered_json(nullptr) : to_json(agreement_stats(v));
  };
  j["overall"] = stats_or_null(res.resolved);
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (Task t : {Task::fakenews, Task::toxicity}) {
    std::vector<ResolvedLabel> sub;
    for (const auto& r : res.resolved)
      if (r.task == t) sub.push_back(r);
    per[to_string(t)] = stats_or_null(sub);
  }
  j["by_task"] = per;
  std::sort(annotators.begin(), annotators.end());
  j["annotators"] = annotators;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& r : res.resolved) j["pairs"].push_back(to_json(r));
  return j;
}

inline nlohmann::ordered_json agreement_report(const Campaign& c) {
  const auto& a = c.annotators();
  return agreement_report(c.items(), c.records(), {a[0], a[1]});
}

// ---------------------------------------------------------------- export

struct ExportFiles {
  std::vector<task::LabeledExample> binary;
  std::vector<task::LabeledExample> multilabel;  // toxicity only: toxic items with their categories
};

/// Retained items of one task, sorted by item id.
inline ExportFiles export_dataset(const std::vector<AnnotationItem>& items, const Resolution& res, Task t) {
  std::unordered_map<std::string, const AnnotationItem*> by_id;
  for (const auto& it : items) by_id[it.id] = &it;
  std::vector<const ResolvedLabel*> kept;
  for (const auto& r : res.resolved)
    if (r.task == t && r.status == Status::retained) kept.push_back(&r);
  std::sort(kept.begin(), kept.end(), [](auto* a, auto* b) { return a->item_id < b->item_id; });
  ExportFiles out;
  for (const auto* r : kept) {
    auto f = by_id.find(r->item_id);
    if (f == by_id.end()) throw ValidationError("annotation", "resolved label for unknown item " + r->item_id);
    out.binary.push_back({r->item_id, f->second->text, {*r->label}});
    if (r->categories) out.multilabel.push_back({r->item_id, f->second->text, *r->categories});
  }
  return out;
}

inline ExportFiles export_dataset(const Campaign& c, Task t) {
  return export_dataset(c.items(), resolve_agreement(c.items(), c.records()), t);
}

/// Task spec matching an export's binary file.
inline task::TaskSpec export_spec(Task t) {
  const auto& l = stage1_labels(t);
  return {task::TaskKind::binary, {l[0], l[1]}, 0.5};
}

}  // namespace somnlp::annotation
