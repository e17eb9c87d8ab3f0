#pragma once

// Corpus ingestion and cleaning: format adapters, the title-text-url
// document template, normalization, sentence segmentation, dedup, merging
// and corpus statistics.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <vector>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/ustring.h>

#include "json.hpp"
#include "somnlp/error.hpp"

namespace somnlp::corpus {

struct Document {
  std::string id;
  std::optional<std::string> title;
  std::string text;
  std::optional<std::string> url;
  std::string source;
  // Normalized sentences, filled by the pipeline (segmentation runs on the
  // raw text, before normalization). Empty means "not segmented yet".
  std::vector<std::string> sentences;

  bool operator==(const Document&) const = default;
};

struct NormConfig {
  bool lowercase = true;
  bool collapse_whitespace = true;
  bool unicode_normalization = true;
  // Punctuation kept in addition to letters, combining marks, digits and whitespace.
  std::u32string allowed_punctuation = U".,;:!?'\"()-";
};

struct CorpusStats {
  std::size_t items = 0;
  std::size_t sentences = 0;
  std::size_t tokens = 0;
  std::size_t unique_words = 0;

  bool operator==(const CorpusStats&) const = default;
};

enum class Format { jsonl, plain_text, csv };
enum class OnError { skip, abort };
enum class PlainTextMode { file, block };

struct IngestOptions {
  OnError on_error = OnError::abort;
  PlainTextMode plain_text_mode = PlainTextMode::file;
};

/// Per-record problems collected when `OnError::skip` is in effect.
struct IngestReport {
  std::vector<std::string> errors;
};

// ---------------------------------------------------------------- ingest

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("corpus", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("corpus", "read failure on " + path.string());
  return ss.str();
}

inline std::vector<std::string> split_lines(const std::string& data) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < data.size()) {
    auto end = data.find('\n', start);
    if (end == std::string::npos) end = data.size();
    std::string line = data.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw std::invalid_argument(std::string("field \"") + key + "\" is not a string");
  return it->get<std::string>();
}

/// RFC 4180 CSV: quoted fields, doubled quotes, embedded newlines.
/// Returns rows with the 1-based line number each row starts on.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> parse_csv(const std::string& data) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1, row_line = 1;
  auto end_row = [&] {
    if (field_started || !row.empty()) {
      row.push_back(std::move(field));
      rows.emplace_back(row_line, std::move(row));
    }
    row.clear();
    field.clear();
    field_started = false;
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    char c = data[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        quoted = true;
        field_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        end_row();
        ++line;
        row_line = line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (quoted) throw FormatError("corpus", "unterminated quoted CSV field starting on line " + std::to_string(row_line));
  end_row();
  return rows;
}

}  // namespace detail

/// Guesses the format from the file extension (.jsonl/.json, .csv, else plain text).
inline Format format_from_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jsonl" || ext == ".json") return Format::jsonl;
  if (ext == ".csv") return Format::csv;
  return Format::plain_text;
}

/// Reads one source file into Documents, preserving input order.
///
/// JSONL records need a string "text"; "id" defaults to the line number.
/// CSV needs a header row with a "text" column. Plain text yields one
/// document per file or per blank-line-separated block.
inline std::vector<Document> ingest_source(const std::filesystem::path& path, Format format,
                                           const std::string& source, const IngestOptions& opts = {},
                                           IngestReport* report = nullptr) {
  const std::string data = detail::read_file(path);
  std::vector<Document> docs;

  auto fail = [&](std::size_t line, const std::string& what) {
    RecordError err("corpus", line, path.filename().string() + ": " + what);
    if (opts.on_error == OnError::abort) throw err;
    if (report) report->errors.emplace_back(err.what());
  };

  switch (format) {
    case Format::jsonl: {
      auto lines = detail::split_lines(data);
      for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t lineno = i + 1;
        if (detail::is_blank(lines[i])) continue;
        try {
          auto j = nlohmann::json::parse(lines[i]);
          if (!j.is_object()) throw std::invalid_argument("record is not an object");
          auto text = detail::optional_string(j, "text");
          if (!text) throw std::invalid_argument("missing \"text\" field");
          Document d;
          if (auto it = j.find("id"); it != j.end() && !it->is_null())
            d.id = it->is_string() ? it->get<std::string>() : it->dump();
          else
            d.id = std::to_string(lineno);
          d.title = detail::optional_string(j, "title");
          d.text = std::move(*text);
          d.url = detail::optional_string(j, "url");
          d.source = detail::optional_string(j, "source").value_or(source);
          if (!source.empty()) d.source = source;
          if (auto it = j.find("sentences"); it != j.end() && it->is_array())
            d.sentences = it->get<std::vector<std::string>>();
          docs.push_back(std::move(d));
        } catch (const nlohmann::json::exception& e) {
          fail(lineno, std::string("malformed JSON: ") + e.what());
        } catch (const std::invalid_argument& e) {
          fail(lineno, e.what());
        }
      }
      break;
    }
    case Format::csv: {
      auto rows = detail::parse_csv(data);
      if (rows.empty()) break;
      const auto& header = rows.front().second;
      auto column = [&](std::string_view name) -> std::optional<std::size_t> {
        for (std::size_t c = 0; c < header.size(); ++c)
          if (header[c] == name) return c;
        return std::nullopt;
      };
      auto text_col = column("text");
      if (!text_col) throw FormatError("corpus", path.string() + ": CSV header has no \"text\" column");
      auto id_col = column("id"), title_col = column("title"), url_col = column("url");
      for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& [lineno, row] = rows[r];
        if (row.size() != header.size()) {
          fail(lineno, "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(row.size()));
          continue;
        }
        Document d;
        d.id = id_col && !row[*id_col].empty() ? row[*id_col] : std::to_string(r);
        if (title_col && !row[*title_col].empty()) d.title = row[*title_col];
        d.text = row[*text_col];
        if (url_col && !row[*url_col].empty()) d.url = row[*url_col];
        d.source = source;
        docs.push_back(std::move(d));
      }
      break;
    }
    case Format::plain_text: {
      const std::string stem = path.stem().string();
      if (opts.plain_text_mode == PlainTextMode::file) {
        if (!detail::is_blank(data)) docs.push_back(Document{stem, std::nullopt, data, std::nullopt, source, {}});
        break;
      }
      std::string block;
      std::size_t n = 0;
      auto flush = [&] {
        if (!detail::is_blank(block))
          docs.push_back(Document{stem + "#" + std::to_string(++n), std::nullopt, block, std::nullopt, source, {}});
        block.clear();
      };
      for (auto& line : detail::split_lines(data)) {
        if (detail::is_blank(line)) {
          flush();
        } else {
          if (!block.empty()) block.push_back('\n');
          block += line;
        }
      }
      flush();
      break;
    }
  }
  return docs;
}

// --------------------------------------------------------- normalization

namespace detail {

inline bool is_allowed(UChar32 c, const NormConfig& cfg) {
  if (u_isUWhiteSpace(c)) return true;
  const auto cat = u_charType(c);
  switch (cat) {
    case U_UPPERCASE_LETTER:
    case U_LOWERCASE_LETTER:
    case U_TITLECASE_LETTER:
    case U_MODIFIER_LETTER:
    case U_OTHER_LETTER:
    case U_NON_SPACING_MARK:
    case U_COMBINING_SPACING_MARK:
    case U_DECIMAL_DIGIT_NUMBER:
      return true;
    default:
      return cfg.allowed_punctuation.find(static_cast<char32_t>(c)) != std::u32string::npos;
  }
}

inline icu::UnicodeString nfc(const icu::UnicodeString& s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("corpus", "ICU NFC normalizer unavailable");
  auto out = norm->normalize(s, status);
  if (U_FAILURE(status)) throw Error("corpus", "ICU normalization failed");
  return out;
}

}  // namespace detail

/// Cleans one text: NFC, lowercase, disallowed characters replaced by a
/// space, whitespace runs collapsed, ends trimmed. Idempotent.
inline std::string normalize_text(std::string_view text, const NormConfig& cfg = {}) {
  auto u = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  if (cfg.unicode_normalization) u = detail::nfc(u);
  if (cfg.lowercase) {
    u.toLower(icu::Locale::getRoot());
    if (cfg.unicode_normalization) u = detail::nfc(u);
  }

  icu::UnicodeString filtered;
  bool last_space = true;  // trims leading whitespace
  for (int32_t i = 0; i < u.length();) {
    UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    const bool space = !detail::is_allowed(c, cfg) || u_isUWhiteSpace(c);
    if (space) {
      if (cfg.collapse_whitespace) {
        if (!last_space) filtered.append(static_cast<UChar>(' '));
      } else {
        filtered.append(detail::is_allowed(c, cfg) ? c : static_cast<UChar32>(' '));
      }
      last_space = true;
    } else {
      filtered.append(c);
      last_space = false;
    }
  }
  std::string out;
  filtered.toUTF8String(out);
  auto end = out.find_last_not_of(" \t\n\r\f\v");
  out.erase(end == std::string::npos ? 0 : end + 1);
  auto begin = out.find_first_not_of(" \t\n\r\f\v");
  out.erase(0, begin == std::string::npos ? out.size() : begin);
  return out;
}

inline Document normalize_document(Document doc, const NormConfig& cfg = {}) {
  doc.text = normalize_text(doc.text, cfg);
  if (doc.title) doc.title = normalize_text(*doc.title, cfg);
  std::vector<std::string> sentences;
  for (auto& s : doc.sentences) {
    auto n = normalize_text(s, cfg);
    if (!n.empty()) sentences.push_back(std::move(n));
  }
  doc.sentences = std::move(sentences);
  return doc;
}

// ------------------------------------------------------------ segmenting

/// Splits on '.', '!' or '?' followed by whitespace. The terminator stays
/// with its sentence; a trailing unterminated fragment is its own sentence.
inline std::vector<std::string> segment_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push = [&](std::string_view s) {
    auto b = s.find_first_not_of(" \t\n\r\f\v");
    if (b == std::string_view::npos) return;
    auto e = s.find_last_not_of(" \t\n\r\f\v");
    out.emplace_back(s.substr(b, e - b + 1));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() &&
        std::isspace(static_cast<unsigned char>(text[i + 1]))) {
      push(text.substr(start, i + 1 - start));
      start = i + 1;
    }
  }
  if (start < text.size()) push(text.substr(start));
  return out;
}

// ------------------------------------------------------ dedup and merging

/// Keeps the first occurrence of each distinct text. Input must be normalized.
inline std::vector<Document> dedup(std::vector<Document> docs) {
  std::unordered_set<std::string> seen;
  std::vector<Document> out;
  out.reserve(docs.size());
  for (auto& d : docs)
    if (seen.insert(d.text).second) out.push_back(std::move(d));
  return out;
}

/// Sentence-level variant: drops sentences already seen anywhere earlier in
/// the corpus, rebuilds each text from its survivors, drops emptied documents.
inline std::vector<Document> dedup_sentences(std::vector<Document> docs) {
  std::unordered_set<std::string> seen;
  std::vector<Document> out;
  for (auto& d : docs) {
    std::vector<std::string> kept;
    for (auto& s : d.sentences)
      if (seen.insert(s).second) kept.push_back(std::move(s));
    if (kept.empty()) continue;
    std::string text;
    for (const auto& s : kept) {
      if (!text.empty()) text.push_back(' ');
      text += s;
    }
    d.text = std::move(text);
    d.sentences = std::move(kept);
    out.push_back(std::move(d));
  }
  return out;
}

/// Concatenates sources in order, qualifying ids as "<source>:<id>".
inline std::vector<Document> merge_corpora(std::vector<std::vector<Document>> sources) {
  std::vector<Document> out;
  std::unordered_set<std::string> ids;
  for (auto& src : sources) {
    for (auto& d : src) {
      d.id = d.source + ":" + d.id;
      if (!ids.insert(d.id).second) throw Error("corpus", "duplicate qualified document id " + d.id);
      out.push_back(std::move(d));
    }
  }
  return out;
}

// ----------------------------------------------------------------- stats

inline std::vector<std::string_view> whitespace_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.push_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

inline CorpusStats corpus_stats(const std::vector<Document>& docs) {
  CorpusStats st;
  std::unordered_set<std::string_view> unique;
  for (const auto& d : docs) {
    ++st.items;
    st.sentences += d.sentences.empty() ? segment_sentences(d.text).size() : d.sentences.size();
    for (auto w : whitespace_words(d.text)) {
      ++st.tokens;
      unique.insert(w);
    }
  }
  st.unique_words = unique.size();
  return st;
}

// -------------------------------------------------------------- pipeline

struct PipelineOptions {
  NormConfig norm;
  bool sentence_dedup = false;
  unsigned workers = 1;
};

struct PipelineResult {
  std::vector<Document> documents;
  std::size_t dropped_empty = 0;
  std::size_t dropped_duplicates = 0;
};

/// segment -> normalize -> drop empty -> dedup. The per-document map may run
/// on several workers; the output is identical for any worker count.
inline PipelineResult clean_corpus(std::vector<Document> docs, const PipelineOptions& opts = {}) {
  auto prepare = [&](Document& d) {
    if (d.sentences.empty()) d.sentences = segment_sentences(d.text);
    d = normalize_document(std::move(d), opts.norm);
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(docs.size())));
  if (workers <= 1) {
    for (auto& d : docs) prepare(d);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < docs.size(); i += workers) prepare(docs[i]);
      });
  }

  PipelineResult res;
  std::vector<Document> kept;
  kept.reserve(docs.size());
  for (auto& d : docs) {
    if (d.text.empty()) {
      ++res.dropped_empty;
      continue;
    }
    kept.push_back(std::move(d));
  }
  const auto before = kept.size();
  res.documents = opts.sentence_dedup ? dedup_sentences(std::move(kept)) : dedup(std::move(kept));
  res.dropped_duplicates = before - res.documents.size();
  return res;
}

// ------------------------------------------------------------------ JSON

inline nlohmann::json to_json(const Document& d) {
  nlohmann::ordered_json j;
  j["id"] = d.id;
  j["title"] = d.title ? nlohmann::json(*d.title) : nlohmann::json(nullptr);
  j["text"] = d.text;
  j["url"] = d.url ? nlohmann::json(*d.url) : nlohmann::json(nullptr);
  j["source"] = d.source;
  if (!d.sentences.empty()) j["sentences"] = d.sentences;
  return j;
}

inline nlohmann::ordered_json to_json(const CorpusStats& s) {
  nlohmann::ordered_json j;
  j["items"] = s.items;
  j["sentences"] = s.sentences;
  j["tokens"] = s.tokens;
  j["unique_words"] = s.unique_words;
  return j;
}

inline void write_jsonl(const std::vector<Document>& docs, std::ostream& out) {
  for (const auto& d : docs) out << to_json(d).dump() << '\n';
}

/// Right-aligned two-column table, one row per statistic.
inline std::string stats_table(const CorpusStats& s) {
  const std::pair<const char*, std::size_t> rows[] = {
      {"items", s.items}, {"sentences", s.sentences}, {"tokens", s.tokens}, {"unique_words", s.unique_words}};
  std::size_t width = 0;
  for (auto& [_, v] : rows) width = std::max(width, std::to_string(v).size());
  std::ostringstream out;
  for (auto& [k, v] : rows) {
    std::string num = std::to_string(v);
    out << k << std::string(14 - std::string_view(k).size(), ' ') << std::string(width - num.size(), ' ') << num
        << '\n';
  }
  return out.str();
}

}  // namespace somnlp::corpus
