// somnlp: command-line driver for the corpus -> tokenizer -> pretrain ->
// finetune -> evaluate -> report pipeline and the annotation service.
//
// Every subcommand prints one JSON summary on stdout; progress goes to
// stderr. Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "somnlp/annotation.hpp"
#include "somnlp/annotation_service.hpp"
#include "somnlp/checkpoint.hpp"
#include "somnlp/corpus.hpp"
#include "somnlp/evaluation.hpp"
#include "somnlp/metrics.hpp"
#include "somnlp/mlm_data.hpp"
#include "somnlp/pretrain.hpp"
#include "somnlp/task_heads.hpp"
#include "somnlp/tokenizer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace somnlp;

namespace {

// ------------------------------------------------------------------ config

/// TOML through CLI11's own reader; a file whose first character is '{' is
/// read as JSON, with nested objects acting as [section] headers.
class TomlOrJson : public CLI::ConfigBase {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream s(text);
      return CLI::ConfigBase::from_config(s);
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw CLI::ConversionError(std::string("config: ") + e.what());
    }
    std::vector<CLI::ConfigItem> out;
    flatten(j, {}, out);
    return out;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const nlohmann::json& j, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, v] : j.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        flatten(v, p, out);
        continue;
      }
      if (v.is_null()) continue;
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (v.is_array())
        for (const auto& x : v) item.inputs.push_back(scalar(x));
      else
        item.inputs.push_back(scalar(v));
      out.push_back(std::move(item));
    }
  }
};

// ------------------------------------------------------------------ output

bool g_quiet = false;

void log(const std::string& msg) {
  if (!g_quiet) std::cerr << "somnlp: " << msg << '\n';
}

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IoError("cli", "cannot write " + p.string());
}

// ------------------------------------------------------------------ inputs

bool known_extension(const fs::path& p) {
  const auto e = p.extension().string();
  return e == ".jsonl" || e == ".txt" || e == ".csv";
}

/// Files as given; directories expand to their corpus files in name order.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& s : inputs) {
    const fs::path p(s);
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && known_extension(e.path())) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      out.insert(out.end(), files.begin(), files.end());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw IoError("cli", "no such input " + s);
    }
  }
  return out;
}

struct IngestFlags {
  std::string on_error = "abort";
  std::string plain_text_mode = "block";
};

corpus::IngestOptions ingest_options(const IngestFlags& f) {
  corpus::IngestOptions o;
  o.on_error = f.on_error == "skip" ? corpus::OnError::skip : corpus::OnError::abort;
  o.plain_text_mode = f.plain_text_mode == "file" ? corpus::PlainTextMode::file : corpus::PlainTextMode::block;
  return o;
}

std::vector<std::vector<corpus::Document>> read_sources(const std::vector<fs::path>& files, const IngestFlags& f,
                                                        corpus::IngestReport* report) {
  std::vector<std::vector<corpus::Document>> sources;
  for (const auto& p : files) {
    sources.push_back(corpus::ingest_source(p, corpus::format_from_extension(p), p.stem().string(),
                                            ingest_options(f), report));
    log("read " + std::to_string(sources.back().size()) + " documents from " + p.string());
  }
  return sources;
}

/// Sentences of every document, segmenting where the file carries none.
std::vector<std::string> corpus_sentences(const std::vector<std::string>& inputs) {
  std::vector<std::string> out;
  for (auto& docs : read_sources(expand_inputs(inputs), {}, nullptr))
    for (auto& d : docs) {
      auto s = d.sentences.empty() ? corpus::segment_sentences(d.text) : d.sentences;
      for (auto& x : s)
        if (!corpus::detail::is_blank(x)) out.push_back(std::move(x));
    }
  return out;
}

std::vector<mlm::InputSequence> corpus_sequences(const std::vector<std::string>& inputs,
                                                 const tokenizer::Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::vector<tokenizer::TokenId>> ids;
  for (const auto& s : corpus_sentences(inputs)) ids.push_back(tokenizer::encode(s, vocab));
  return mlm::build_sequences(ids, max_len);
}

// ------------------------------------------------------------------ corpus

struct CorpusIngest {
  std::vector<std::string> inputs;
  std::string out, stats_out;
  IngestFlags flags;
  bool sentence_dedup = false, keep_case = false;
  unsigned workers = 1;
};

json run_corpus_ingest(const CorpusIngest& o) {
  const auto files = expand_inputs(o.inputs);
  corpus::IngestReport report;
  auto sources = read_sources(files, o.flags, &report);
  json per_source = json::array();
  for (std::size_t i = 0; i < files.size(); ++i)
    per_source.push_back({{"source", files[i].stem().string()}, {"path", files[i].string()},
                          {"raw", corpus::to_json(corpus::corpus_stats(sources[i]))}});

  corpus::PipelineOptions popts;
  popts.sentence_dedup = o.sentence_dedup;
  popts.workers = o.workers;
  popts.norm.lowercase = !o.keep_case;
  auto res = corpus::clean_corpus(corpus::merge_corpora(std::move(sources)), popts);

  // Vocabulary growth as sources are merged in order.
  std::unordered_set<std::string> seen;
  std::map<std::string, std::vector<const corpus::Document*>> by_source;
  for (const auto& d : res.documents) by_source[d.source].push_back(&d);
  for (auto& s : per_source) {
    std::vector<corpus::Document> docs;
    for (const auto* d : by_source[s["source"].get<std::string>()]) docs.push_back(*d);
    for (const auto& d : docs)
      for (auto w : corpus::whitespace_words(d.text)) seen.emplace(w);
    s["clean"] = corpus::to_json(corpus::corpus_stats(docs));
    s["cumulative_unique_words"] = seen.size();
  }

  ensure_parent(o.out);
  std::ofstream out(o.out, std::ios::binary);
  corpus::write_jsonl(res.documents, out);
  if (!out) throw IoError("cli", "cannot write " + o.out);

  const auto stats = corpus::corpus_stats(res.documents);
  json j{{"command", "corpus ingest"},
         {"out", o.out},
         {"documents", res.documents.size()},
         {"dropped_empty", res.dropped_empty},
         {"dropped_duplicates", res.dropped_duplicates},
         {"skipped_records", report.errors.size()},
         {"stats", corpus::to_json(stats)},
         {"sources", per_source}};
  if (!report.errors.empty()) j["errors"] = report.errors;
  if (!o.stats_out.empty()) write_text(o.stats_out, j.dump(2) + "\n");
  log(corpus::stats_table(stats));
  return j;
}

struct CorpusStatsCmd {
  std::vector<std::string> inputs;
  IngestFlags flags;
};

json run_corpus_stats(const CorpusStatsCmd& o) {
  const auto files = expand_inputs(o.inputs);
  auto sources = read_sources(files, o.flags, nullptr);
  std::vector<corpus::Document> all;
  json per = json::array();
  for (std::size_t i = 0; i < files.size(); ++i) {
    per.push_back({{"source", files[i].stem().string()}, {"stats", corpus::to_json(corpus::corpus_stats(sources[i]))}});
    all.insert(all.end(), sources[i].begin(), sources[i].end());
  }
  json j = corpus::to_json(corpus::corpus_stats(all));
  j["sources"] = per;
  return j;
}

// --------------------------------------------------------------- tokenizer

struct TokTrain {
  std::vector<std::string> corpus;
  std::string out;
  std::size_t vocab_size = 1000;
  std::uint64_t min_pair_frequency = 1;
  std::size_t max_word_length = 64;
};

json run_tokenizer_train(const TokTrain& o) {
  tokenizer::WordCounts counts;
  const auto sentences = corpus_sentences(o.corpus);
  for (const auto& s : sentences) tokenizer::count_words(s, counts);
  log("training on " + std::to_string(counts.size()) + " distinct words");
  const auto vocab = tokenizer::train_wordpiece(counts, {o.vocab_size, o.min_pair_frequency, o.max_word_length});
  ensure_parent(o.out);
  tokenizer::save_vocab(vocab, o.out);
  return {{"command", "tokenizer train"}, {"out", o.out},           {"vocab_size", vocab.size()},
          {"fingerprint", vocab.fingerprint()}, {"sentences", sentences.size()}, {"distinct_words", counts.size()}};
}

struct TokEncode {
  std::string vocab, input;
  std::vector<std::string> texts;
  std::size_t max_len = 0;
  bool raw = false;
};

json run_tokenizer_encode(const TokEncode& o) {
  const auto vocab = tokenizer::load_vocab(o.vocab);
  auto texts = o.texts;
  if (!o.input.empty())
    for (auto& l : corpus::detail::split_lines(corpus::detail::read_file(o.input)))
      if (!corpus::detail::is_blank(l)) texts.push_back(std::move(l));
  json enc = json::array();
  std::size_t unk = 0;
  for (const auto& t : texts) {
    const auto ids = tokenizer::encode(o.raw ? t : corpus::normalize_text(t), vocab);
    json pieces = json::array();
    for (auto id : ids) {
      pieces.push_back(vocab.piece(id));
      unk += id == tokenizer::kUnk;
    }
    json e{{"text", t}, {"ids", ids}, {"pieces", pieces}, {"decoded", tokenizer::decode(ids, vocab)}};
    if (o.max_len) {
      const auto seq = mlm::build_sequence(ids, o.max_len);
      e["input_ids"] = seq.ids;
      e["attention_mask"] = seq.attention_mask;
    }
    enc.push_back(std::move(e));
  }
  return {{"command", "tokenizer encode"}, {"vocab_fingerprint", vocab.fingerprint()}, {"unknown_tokens", unk},
          {"encodings", enc}};
}

// --------------------------------------------------------------------- mlm

struct MlmSample {
  std::vector<std::string> corpus;
  std::string vocab, out;
  std::size_t max_len = 64;
  double select_prob = 0.15;
};

json run_mlm_sample(const MlmSample& o, std::uint64_t seed) {
  const auto vocab = tokenizer::load_vocab(o.vocab);
  auto seqs = corpus_sequences(o.corpus, vocab, o.max_len);
  mlm::MaskingPolicy policy;
  policy.select_prob = o.select_prob;
  policy.seed = seed;
  const auto originals = seqs;
  const auto batch = mlm::apply_masking(std::move(seqs), policy, vocab.size());
  std::size_t eligible = 0, masked = 0, random = 0, kept = 0;
  for (std::size_t i = 0; i < batch.inputs.size(); ++i)
    for (std::size_t p = 0; p < batch.inputs[i].ids.size(); ++p) {
      eligible += mlm::eligible(originals[i], p);
      if (batch.labels[i][p] == mlm::kIgnore) continue;
      const auto id = batch.inputs[i].ids[p];
      if (id == tokenizer::kMask) ++masked;
      else if (id == batch.labels[i][p]) ++kept;
      else ++random;
    }
  const auto selected = batch.num_labels();
  if (!o.out.empty()) write_text(o.out, mlm::to_json(batch).dump() + "\n");
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  return {{"command", "mlm sample"},
          {"sequences", batch.inputs.size()},
          {"eligible_positions", eligible},
          {"selected", selected},
          {"selected_fraction", frac(selected, eligible)},
          {"mask_fraction", frac(masked, selected)},
          {"random_fraction", frac(random, selected)},
          {"keep_fraction", frac(kept, selected)},
          {"out", o.out}};
}

// ---------------------------------------------------------------- pretrain

struct ModelFlags {
  std::string preset = "desk";
  std::optional<std::size_t> hidden, layers, heads, ff, max_positions;
  std::optional<double> dropout;
};

model::ModelConfig model_config(const ModelFlags& f, std::size_t vocab) {
  model::ModelConfig c;
  if (f.preset == "desk") c = model::ModelConfig::desk(vocab);
  else if (f.preset == "tiny") c = model::ModelConfig::tiny(vocab);
  else c = model::ModelConfig::production(vocab);
  if (f.hidden) c.hidden = *f.hidden;
  if (f.layers) c.layers = *f.layers;
  if (f.heads) c.heads = *f.heads;
  if (f.ff) c.ff = *f.ff;
  if (f.max_positions) c.max_positions = *f.max_positions;
  if (f.dropout) c.dropout = *f.dropout;
  c.validate();
  return c;
}

struct Pretrain {
  std::vector<std::string> corpus;
  std::string vocab, out, log_out;
  ModelFlags model;
  model::Schedule schedule;
  std::size_t max_len = 64;
  double select_prob = 0.15;
  std::size_t smooth_window = 20;
};

json run_pretrain(const Pretrain& o, std::uint64_t seed) {
  const auto vocab = tokenizer::load_vocab(o.vocab);
  const auto cfg = model_config(o.model, vocab.size());
  if (o.max_len > cfg.max_positions) throw ConfigError("cli", "--max-len exceeds the model's max_positions");
  const auto seqs = corpus_sequences(o.corpus, vocab, o.max_len);
  log("pretraining on " + std::to_string(seqs.size()) + " sequences for " + std::to_string(o.schedule.steps) +
      " steps");
  mlm::MaskingPolicy policy;
  policy.select_prob = o.select_prob;
  auto on_log = [](const model::LogEntry& e) {
    log("step " + std::to_string(e.step) + " loss " + std::to_string(e.loss) + " lr " + std::to_string(e.lr));
  };
  model::PretrainResult res;
  try {
    res = model::pretrain(seqs, cfg, policy, o.schedule, seed, vocab.fingerprint(), on_log);
  } catch (const model::TrainingDiverged& e) {
    ensure_parent(o.out);
    model::save_checkpoint(e.last_good(), o.out);
    throw;
  }
  ensure_parent(o.out);
  model::save_checkpoint(res.checkpoint, o.out);
  if (!o.log_out.empty()) {
    std::string lines;
    for (const auto& e : res.history) lines += model::to_json(e).dump() + "\n";
    write_text(o.log_out, lines);
  }
  const auto [first, last] = model::smoothed_endpoints(res.history, o.smooth_window);
  return {{"command", "pretrain"},
          {"out", o.out},
          {"sequences", seqs.size()},
          {"steps", res.checkpoint.meta.steps},
          {"skipped_batches", res.skipped_batches},
          {"initial_loss", first},
          {"final_loss", last},
          {"loss_reduction", first > 0 ? 1.0 - last / first : 0.0},
          {"vocab_fingerprint", vocab.fingerprint()},
          {"config",
           {{"vocab_size", cfg.vocab_size},
            {"hidden", cfg.hidden},
            {"layers", cfg.layers},
            {"heads", cfg.heads},
            {"ff", cfg.ff},
            {"max_positions", cfg.max_positions},
            {"dropout", cfg.dropout}}}};
}

// ---------------------------------------------------------------- finetune

struct Finetune {
  std::string checkpoint, vocab, train, val, out, history_out, split_out, kind;
  std::vector<std::string> labels;
  std::vector<double> split;
  double threshold = 0.5;
  task::FineTuneConfig cfg;
  std::size_t search_trials = 0, workers = 1;
  task::SearchSpace space{1e-5, 1e-3, {8, 16}, {3, 5}};
};

task::TaskSpec infer_spec(const Finetune& o, const std::vector<task::LabeledExample>& data) {
  bool multi = o.kind == "multilabel";
  if (o.kind.empty())
    for (const auto& e : data) multi |= e.labels.size() != 1;
  task::TaskSpec spec;
  spec.threshold = o.threshold;
  if (multi) {
    spec.kind = task::TaskKind::multilabel;
    spec.labels = o.labels.empty() ? task::toxicity_categories() : o.labels;
  } else {
    spec.labels = o.labels;
    if (spec.labels.empty()) {
      std::set<std::string> all;
      for (const auto& e : data) all.insert(e.labels.begin(), e.labels.end());
      spec.labels.assign(all.begin(), all.end());
    }
    spec.kind = o.kind.empty() ? (spec.labels.size() == 2 ? task::TaskKind::binary : task::TaskKind::multiclass)
                               : task::kind_from_string(o.kind);
  }
  spec.validate();
  return spec;
}

json run_finetune(const Finetune& o, std::uint64_t seed) {
  const auto vocab = tokenizer::load_vocab(o.vocab);
  const auto ckpt = model::load_checkpoint(o.checkpoint, vocab.fingerprint());
  auto train = task::load_examples(o.train);
  std::vector<task::LabeledExample> val, test;
  const auto spec = infer_spec(o, train);
  if (!o.val.empty()) val = task::load_examples(o.val);
  if (!o.split.empty()) {
    if (o.split.size() != 3) throw ConfigError("cli", "--split takes three ratios: train val test");
    auto parts = task::split_dataset(spec, train, {o.split[0], o.split[1], o.split[2]}, seed);
    train = std::move(parts.train);
    if (o.val.empty()) val = std::move(parts.val);
    test = std::move(parts.test);
    if (!o.split_out.empty()) {
      const bool as_set = spec.kind == task::TaskKind::multilabel;
      write_text(fs::path(o.split_out) / "train.jsonl", task::examples_jsonl(train, as_set));
      write_text(fs::path(o.split_out) / "val.jsonl", task::examples_jsonl(val, as_set));
      write_text(fs::path(o.split_out) / "test.jsonl", task::examples_jsonl(test, as_set));
    }
  }
  const auto enc_train = task::encode_examples(spec, train, vocab, o.cfg.max_len);
  const auto enc_val = task::encode_examples(spec, val, vocab, o.cfg.max_len);
  const auto start = task::attach_head(ckpt, spec, derive_seed(seed, 7));

  auto cfg = o.cfg;
  cfg.seed = seed;
  json search = nullptr;
  if (o.search_trials > 0) {
    const auto sr = task::random_search(start, enc_train, enc_val, o.space, o.search_trials, seed, cfg, o.workers);
    search = json::array();
    for (const auto& t : sr.log) search.push_back(task::to_json(t));
    cfg = sr.best;
    log("search picked trial " + std::to_string(sr.best_trial));
  }
  log("fine-tuning " + task::to_string(spec.kind) + " head on " + std::to_string(train.size()) + " examples");
  const auto res = task::finetune(start, enc_train, enc_val, cfg, [](const task::EpochRecord& r) {
    log("epoch " + std::to_string(r.epoch) + " loss " + std::to_string(r.train_loss) + " metric " +
        std::to_string(r.metric) + (r.best ? " *" : ""));
  });
  ensure_parent(o.out);
  task::save_task_model(res.model, o.out);
  json history = json::array();
  for (const auto& r : res.history) history.push_back(task::to_json(r));
  if (!o.history_out.empty()) {
    std::string lines;
    for (const auto& h : history) lines += h.dump() + "\n";
    write_text(o.history_out, lines);
  }
  json j{{"command", "finetune"},
         {"out", o.out},
         {"task", task::to_json(spec)},
         {"config", task::to_json(cfg)},
         {"train_examples", train.size()},
         {"val_examples", val.size()},
         {"test_examples", test.size()},
         {"metric_on", res.metric_on_train ? "train" : "val"},
         {"best_epoch", res.model.finetune.best_epoch},
         {"best_metric", res.model.finetune.best_metric},
         {"history", history}};
  if (!search.is_null()) j["search"] = search;
  return j;
}

// ---------------------------------------------------------------- evaluate

struct Evaluate {
  std::string model, vocab, data, out, name = "model", task_name;
  std::size_t max_len = 64;
};

std::size_t parameter_count(const task::TaskModel& m) {
  std::size_t n = 0;
  for (const auto& [_, t] : task::named_tensors(m.params)) n += static_cast<std::size_t>(t->size());
  return n;
}

/// 2104321 -> "2.1M".
std::string size_label(std::size_t params) {
  char buf[32];
  if (params >= 1000000) std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(params) / 1e6);
  else std::snprintf(buf, sizeof buf, "%.1fK", static_cast<double>(params) / 1e3);
  return buf;
}

json run_evaluate(const Evaluate& o) {
  const auto vocab = tokenizer::load_vocab(o.vocab);
  const auto m = task::load_task_model(o.model, vocab.fingerprint());
  const auto data = task::load_examples(o.data);
  const auto ev = task::evaluate_examples(m, vocab, data, o.max_len);
  json j{{"command", "evaluate"},
         {"model", o.name},
         {"task", o.task_name.empty() ? fs::path(o.data).stem().string() : o.task_name},
         {"kind", task::to_string(m.spec.kind)},
         {"parameters", parameter_count(m)},
         {"data", o.data}};
  const auto metrics = eval::to_json(ev.metrics);
  for (const auto& [k, v] : metrics.items()) j[k] = v;
  if (!o.out.empty()) write_text(o.out, j.dump(2) + "\n");
  return j;
}

// ------------------------------------------------------------------ report

struct Report {
  std::vector<std::string> metrics, tasks, sizes, footnotes;
  std::string table, out, format = "markdown";
};

json run_report(const Report& o) {
  eval::ComparisonTable t;
  if (!o.table.empty()) {
    t = eval::parse_report_csv(corpus::detail::read_file(o.table));
  } else {
    if (o.metrics.empty()) throw ConfigError("cli", "report needs --metrics files or a --table CSV");
    std::map<std::string, std::map<std::string, double>> entries;
    std::map<std::string, std::string> sizes;
    std::vector<std::string> order;
    for (const auto& f : o.metrics) {
      const auto j = nlohmann::json::parse(corpus::detail::read_file(f));
      const auto model = j.at("model").get<std::string>(), task_name = j.at("task").get<std::string>();
      if (!entries.count(model)) order.push_back(model);
      if (j.contains("parameters")) sizes[model] = size_label(j["parameters"].get<std::size_t>());
      if (!entries[model].emplace(task_name, 100.0 * j.at("accuracy").get<double>()).second)
        throw ValidationError("cli", "two metrics files for " + model + " / " + task_name);
    }
    const auto sorted = eval::table_from_map(entries, o.tasks);
    t.tasks = sorted.tasks;
    for (const auto& m : order)  // first-seen row order
      for (const auto& r : sorted.rows)
        if (r.model == m) t.rows.push_back(r);
    for (auto& r : t.rows) r.size = sizes[r.model];
  }
  for (const auto& s : o.sizes) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("cli", "--size expects MODEL=SIZE");
    for (auto& r : t.rows)
      if (r.model == s.substr(0, eq)) r.size = s.substr(eq + 1);
  }
  t.footnotes.insert(t.footnotes.end(), o.footnotes.begin(), o.footnotes.end());
  const auto text = eval::render_report(t, o.format == "csv" ? eval::ReportFormat::csv : eval::ReportFormat::markdown);
  if (!o.out.empty()) write_text(o.out, text);
  log("\n" + text);
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"model", r.model}, {"size", r.size}, {"scores", r.scores}, {"average", eval::average_accuracy(r.scores)}});
  return {{"command", "report"}, {"out", o.out}, {"format", o.format}, {"tasks", t.tasks}, {"rows", rows}};
}

// ---------------------------------------------------------------- annotate

struct AnnotateServe {
  std::string items, log_path, host = "127.0.0.1";
  std::vector<std::string> annotators;
  int port = 8080;
};

int run_annotate_serve(const AnnotateServe& o) {
  // Block the stop signals before any thread starts; one thread waits for them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  annotation::Campaign campaign(annotation::load_items(o.items), o.annotators, fs::path(o.log_path));
  annotation::Service service(campaign);
  const int port = o.port == 0 ? service.bind_any_port(o.host) : (service.server().bind_to_port(o.host, o.port) ? o.port : -1);
  if (port < 0) throw IoError("annotation", "cannot bind " + o.host + ":" + std::to_string(o.port));
  const auto p = campaign.progress();
  emit({{"command", "annotate serve"}, {"host", o.host}, {"port", port}, {"items", p.total},
        {"records_replayed", campaign.records().size()}, {"log", o.log_path}});
  std::jthread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    log("signal " + std::to_string(sig) + ", shutting down");
    service.stop();
  });
  service.listen_after_bind();
  pthread_kill(waiter.native_handle(), SIGTERM);  // releases the waiter after a non-signal stop
  return 0;
}

struct AnnotateResolve {
  std::string items, log_path, out;
};

json run_annotate_resolve(const AnnotateResolve& o) {
  const auto items = annotation::load_items(o.items);
  const auto records = annotation::read_log(o.log_path);
  std::set<std::string> who;
  for (const auto& r : records) who.insert(r.annotator_id);
  auto j = annotation::agreement_report(items, records, {who.begin(), who.end()});
  if (!o.out.empty()) {
    std::string lines;
    for (const auto& r : annotation::resolve_agreement(items, records).resolved) lines += annotation::to_json(r).dump() + "\n";
    write_text(o.out, lines);
  }
  json out{{"command", "annotate resolve"}, {"out", o.out}};
  for (const auto& [k, v] : j.items())
    if (k != "pairs") out[k] = v;
  return out;
}

struct AnnotateExport {
  std::string items, log_path, task, out_dir;
};

json run_annotate_export(const AnnotateExport& o) {
  const auto items = annotation::load_items(o.items);
  const auto records = annotation::read_log(o.log_path);
  const auto t = annotation::task_from_string(o.task);
  const auto files = annotation::export_dataset(items, annotation::resolve_agreement(items, records), t);
  json written = json::object();
  const auto base = fs::path(o.out_dir);
  write_text(base / (o.task + ".jsonl"), task::examples_jsonl(files.binary, false));
  written[o.task] = {{"path", (base / (o.task + ".jsonl")).string()}, {"examples", files.binary.size()}};
  if (t == annotation::Task::toxicity) {
    write_text(base / "toxicity_multilabel.jsonl", task::examples_jsonl(files.multilabel, true));
    written["toxicity_multilabel"] = {{"path", (base / "toxicity_multilabel.jsonl").string()},
                                      {"examples", files.multilabel.size()}};
  }
  return {{"command", "annotate export"}, {"task", o.task}, {"files", written}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Somali language-model toolkit: corpus, tokenizer, pretraining, fine-tuning, evaluation, annotation");
  app.config_formatter(std::make_shared<TomlOrJson>());
  app.set_config("--config", "", "TOML or JSON file; [section] names follow subcommands, flags override it");
  std::uint64_t seed = 42;
  app.add_option("--seed", seed, "Global seed")->capture_default_str();
  app.add_flag("-q,--quiet", g_quiet, "No progress on stderr");
  app.require_subcommand(1);

  const auto checked_file = CLI::ExistingFile;
  const auto checked_path = CLI::ExistingPath;

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Merge, clean and describe raw corpora");
  corpus_cmd->require_subcommand(1);
  CorpusIngest ingest;
  auto* ingest_cmd = corpus_cmd->add_subcommand("ingest", "Merge sources, normalize, deduplicate, write JSONL");
  ingest_cmd->add_option("-i,--input", ingest.inputs, "Source files or directories (.jsonl, .txt, .csv)")
      ->required()->check(checked_path);
  ingest_cmd->add_option("-o,--out", ingest.out, "Cleaned corpus JSONL")->required();
  ingest_cmd->add_option("--stats-out", ingest.stats_out, "Also write the summary here");
  ingest_cmd->add_option("--on-error", ingest.flags.on_error, "Bad records: abort or skip")
      ->check(CLI::IsMember({"abort", "skip"}))->capture_default_str();
  ingest_cmd->add_option("--plain-text-mode", ingest.flags.plain_text_mode, "Text files: one document per file or per block")
      ->check(CLI::IsMember({"file", "block"}))->capture_default_str();
  ingest_cmd->add_flag("--sentence-dedup", ingest.sentence_dedup, "Deduplicate sentences rather than documents");
  ingest_cmd->add_flag("--keep-case", ingest.keep_case, "Skip lower-casing");
  ingest_cmd->add_option("--workers", ingest.workers, "Normalization threads")->capture_default_str();

  CorpusStatsCmd cstats;
  auto* stats_cmd = corpus_cmd->add_subcommand("stats", "Items, sentences, tokens and unique words per source");
  stats_cmd->add_option("-i,--input", cstats.inputs, "Corpus files or directories")->check(checked_path);
  stats_cmd->add_option("--plain-text-mode", cstats.flags.plain_text_mode, "file or block")
      ->check(CLI::IsMember({"file", "block"}))->capture_default_str();

  // tokenizer
  auto* tok_cmd = app.add_subcommand("tokenizer", "WordPiece vocabulary");
  tok_cmd->require_subcommand(1);
  TokTrain ttrain;
  auto* ttrain_cmd = tok_cmd->add_subcommand("train", "Train a WordPiece vocabulary");
  ttrain_cmd->add_option("-c,--corpus", ttrain.corpus, "Corpus files or directories")->required()->check(checked_path);
  ttrain_cmd->add_option("-o,--out", ttrain.out, "Vocabulary file, one piece per line")->required();
  ttrain_cmd->add_option("--vocab-size", ttrain.vocab_size, "Target size including specials (70000 at full scale)")
      ->capture_default_str();
  ttrain_cmd->add_option("--min-pair-frequency", ttrain.min_pair_frequency)->capture_default_str();
  ttrain_cmd->add_option("--max-word-length", ttrain.max_word_length)->capture_default_str();

  TokEncode tenc;
  auto* tenc_cmd = tok_cmd->add_subcommand("encode", "Encode text with a vocabulary");
  tenc_cmd->add_option("-v,--vocab", tenc.vocab)->required()->check(checked_file);
  tenc_cmd->add_option("-t,--text", tenc.texts, "Text to encode (repeatable)");
  tenc_cmd->add_option("-i,--input", tenc.input, "File with one text per line")->check(checked_file);
  tenc_cmd->add_option("--max-len", tenc.max_len, "Also emit padded [CLS] ... [SEP] input ids");
  tenc_cmd->add_flag("--raw", tenc.raw, "Skip the corpus normalization (lower-casing, filtering)");

  // mlm
  auto* mlm_cmd = app.add_subcommand("mlm", "Masked-language-model data");
  mlm_cmd->require_subcommand(1);
  MlmSample msample;
  auto* msample_cmd = mlm_cmd->add_subcommand("sample", "Build and mask sequences; report masking statistics");
  msample_cmd->add_option("-c,--corpus", msample.corpus)->required()->check(checked_path);
  msample_cmd->add_option("-v,--vocab", msample.vocab)->required()->check(checked_file);
  msample_cmd->add_option("-o,--out", msample.out, "Masked batch JSON");
  msample_cmd->add_option("--max-len", msample.max_len)->capture_default_str();
  msample_cmd->add_option("--select-prob", msample.select_prob)->capture_default_str();

  // pretrain
  Pretrain pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Masked-LM pretraining of the encoder");
  pre_cmd->add_option("-c,--corpus", pre.corpus)->required()->check(checked_path);
  pre_cmd->add_option("-v,--vocab", pre.vocab)->required()->check(checked_file);
  pre_cmd->add_option("-o,--out", pre.out, "Encoder checkpoint")->required();
  pre_cmd->add_option("--log-out", pre.log_out, "Per-step loss JSONL");
  pre_cmd->add_option("--preset", pre.model.preset, "desk, tiny or production shape")
      ->check(CLI::IsMember({"desk", "tiny", "production"}))->capture_default_str();
  pre_cmd->add_option("--hidden", pre.model.hidden);
  pre_cmd->add_option("--layers", pre.model.layers);
  pre_cmd->add_option("--heads", pre.model.heads);
  pre_cmd->add_option("--ff", pre.model.ff);
  pre_cmd->add_option("--max-positions", pre.model.max_positions);
  pre_cmd->add_option("--dropout", pre.model.dropout);
  pre_cmd->add_option("--steps", pre.schedule.steps)->capture_default_str();
  pre_cmd->add_option("--batch-size", pre.schedule.batch_size)->capture_default_str();
  pre_cmd->add_option("--lr", pre.schedule.lr)->capture_default_str();
  pre_cmd->add_option("--warmup-frac", pre.schedule.warmup_frac)->capture_default_str();
  pre_cmd->add_option("--weight-decay", pre.schedule.weight_decay)->capture_default_str();
  pre_cmd->add_option("--log-every", pre.schedule.log_every)->capture_default_str();
  pre_cmd->add_option("--max-len", pre.max_len, "Sequence length including [CLS] and [SEP]")->capture_default_str();
  pre_cmd->add_option("--select-prob", pre.select_prob)->capture_default_str();
  pre_cmd->add_option("--smooth-window", pre.smooth_window, "Steps averaged for the loss summary")->capture_default_str();

  // finetune
  Finetune ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Attach a classification head and fine-tune");
  ft_cmd->add_option("-m,--checkpoint", ft.checkpoint, "Pretrained encoder")->required()->check(checked_file);
  ft_cmd->add_option("-v,--vocab", ft.vocab)->required()->check(checked_file);
  ft_cmd->add_option("--train", ft.train, "Labeled JSONL")->required()->check(checked_file);
  ft_cmd->add_option("--val", ft.val, "Validation JSONL")->check(checked_file);
  ft_cmd->add_option("--split", ft.split, "train val test ratios applied to --train")->expected(3);
  ft_cmd->add_option("--split-out", ft.split_out, "Directory for the split files");
  ft_cmd->add_option("-o,--out", ft.out, "Task model")->required();
  ft_cmd->add_option("--history-out", ft.history_out, "Per-epoch JSONL");
  ft_cmd->add_option("--kind", ft.kind, "binary, multiclass or multilabel (inferred when omitted)")
      ->check(CLI::IsMember({"binary", "multiclass", "multilabel"}));
  ft_cmd->add_option("--labels", ft.labels, "Label order (default: sorted labels, or the six toxicity categories)");
  ft_cmd->add_option("--threshold", ft.threshold, "Multilabel decision threshold")->capture_default_str();
  ft_cmd->add_option("--lr", ft.cfg.lr)->capture_default_str();
  ft_cmd->add_option("--batch-size", ft.cfg.batch_size)->capture_default_str();
  ft_cmd->add_option("--epochs", ft.cfg.epochs)->capture_default_str();
  ft_cmd->add_option("--patience", ft.cfg.patience, "Epochs without improvement before stopping; 0 = off")
      ->capture_default_str();
  ft_cmd->add_option("--dropout", ft.cfg.dropout_prob)->capture_default_str();
  ft_cmd->add_option("--max-len", ft.cfg.max_len)->capture_default_str();
  ft_cmd->add_option("--weight-decay", ft.cfg.weight_decay)->capture_default_str();
  ft_cmd->add_option("--search-trials", ft.search_trials, "Random hyperparameter search trials; 0 = off")
      ->capture_default_str();
  ft_cmd->add_option("--search-lr-min", ft.space.lr_min)->capture_default_str();
  ft_cmd->add_option("--search-lr-max", ft.space.lr_max)->capture_default_str();
  ft_cmd->add_option("--search-batch-sizes", ft.space.batch_sizes);
  ft_cmd->add_option("--search-epochs", ft.space.epochs);
  ft_cmd->add_option("--workers", ft.workers, "Parallel search trials")->capture_default_str();

  // evaluate
  Evaluate ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Accuracy, precision, recall and F1 of a task model");
  ev_cmd->add_option("-m,--model", ev.model)->required()->check(checked_file);
  ev_cmd->add_option("-v,--vocab", ev.vocab)->required()->check(checked_file);
  ev_cmd->add_option("-d,--data", ev.data, "Labeled JSONL")->required()->check(checked_file);
  ev_cmd->add_option("-o,--out", ev.out, "Metrics JSON");
  ev_cmd->add_option("--name", ev.name, "Model name for reports")->capture_default_str();
  ev_cmd->add_option("--task-name", ev.task_name, "Task column for reports (default: data file stem)");
  ev_cmd->add_option("--max-len", ev.max_len)->capture_default_str();

  // report
  Report rep;
  auto* rep_cmd = app.add_subcommand("report", "Model-by-task accuracy table with an average column");
  rep_cmd->add_option("--metrics", rep.metrics, "Metrics JSON files from evaluate")->check(checked_file);
  rep_cmd->add_option("--table", rep.table, "Existing report CSV instead of metrics files")->check(checked_file);
  rep_cmd->add_option("--tasks", rep.tasks, "Column order");
  rep_cmd->add_option("--size", rep.sizes, "MODEL=SIZE labels");
  rep_cmd->add_option("--footnote", rep.footnotes);
  rep_cmd->add_option("--format", rep.format)->check(CLI::IsMember({"markdown", "csv"}))->capture_default_str();
  rep_cmd->add_option("-o,--out", rep.out);

  // annotate
  auto* ann_cmd = app.add_subcommand("annotate", "Two-annotator labeling campaigns");
  ann_cmd->require_subcommand(1);
  AnnotateServe serve;
  auto* serve_cmd = ann_cmd->add_subcommand("serve", "HTTP service for annotators");
  serve_cmd->add_option("--items", serve.items, "Campaign JSONL")->required()->check(checked_file);
  serve_cmd->add_option("--annotators", serve.annotators, "Exactly two annotator ids")->required();
  serve_cmd->add_option("--log", serve.log_path, "Append-only record log")->required();
  serve_cmd->add_option("--host", serve.host)->capture_default_str();
  serve_cmd->add_option("--port", serve.port, "0 picks a free port")->capture_default_str();

  AnnotateResolve resolve;
  auto* resolve_cmd = ann_cmd->add_subcommand("resolve", "Apply the agreement rule; report counts and kappa");
  resolve_cmd->add_option("--items", resolve.items)->required()->check(checked_file);
  resolve_cmd->add_option("--log", resolve.log_path)->required()->check(checked_file);
  resolve_cmd->add_option("-o,--out", resolve.out, "Resolved labels JSONL");

  AnnotateExport exp;
  auto* export_cmd = ann_cmd->add_subcommand("export", "Write fine-tuning datasets from agreed labels");
  export_cmd->add_option("--items", exp.items)->required()->check(checked_file);
  export_cmd->add_option("--log", exp.log_path)->required()->check(checked_file);
  export_cmd->add_option("--task", exp.task)->required()->check(CLI::IsMember({"fakenews", "toxicity"}));
  export_cmd->add_option("-o,--out-dir", exp.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (ingest_cmd->parsed()) emit(run_corpus_ingest(ingest));
    else if (stats_cmd->parsed()) emit(run_corpus_stats(cstats));
    else if (ttrain_cmd->parsed()) emit(run_tokenizer_train(ttrain));
    else if (tenc_cmd->parsed()) emit(run_tokenizer_encode(tenc));
    else if (msample_cmd->parsed()) emit(run_mlm_sample(msample, seed));
    else if (pre_cmd->parsed()) emit(run_pretrain(pre, seed));
    else if (ft_cmd->parsed()) emit(run_finetune(ft, seed));
    else if (ev_cmd->parsed()) emit(run_evaluate(ev));
    else if (rep_cmd->parsed()) emit(run_report(rep));
    else if (serve_cmd->parsed()) return run_annotate_serve(serve);
    else if (resolve_cmd->parsed()) emit(run_annotate_resolve(resolve));
    else if (export_cmd->parsed()) emit(run_annotate_export(exp));
  } catch (const somnlp::Error& e) {
    std::cerr << "somnlp: error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "somnlp: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
