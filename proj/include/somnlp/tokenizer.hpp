#pragma once

// WordPiece vocabulary training and greedy longest-match segmentation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "somnlp/error.hpp"
#include "somnlp/hash.hpp"
#include "somnlp/utf8.hpp"

namespace somnlp::tokenizer {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kNumSpecials = 5;
inline constexpr std::string_view kSpecials[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
inline constexpr std::string_view kContinuation = "##";

inline bool is_continuation(std::string_view piece) { return piece.starts_with(kContinuation); }
inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }

class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : kSpecials) add(std::string(s));
  }

  /// Builds from an ordered piece list; the first five must be the specials.
  static Vocabulary from_pieces(const std::vector<std::string>& pieces) {
    if (pieces.size() < kNumSpecials) throw FormatError("tokenizer", "vocabulary lacks the five special tokens");
    for (TokenId i = 0; i < kNumSpecials; ++i)
      if (pieces[i] != kSpecials[i])
        throw FormatError("tokenizer", "line " + std::to_string(i + 1) + " must be " + std::string(kSpecials[i]));
    Vocabulary v;
    for (std::size_t i = kNumSpecials; i < pieces.size(); ++i) {
      if (pieces[i].empty()) throw FormatError("tokenizer", "empty piece on line " + std::to_string(i + 1));
      if (v.contains(pieces[i]))
        throw FormatError("tokenizer", "duplicate piece \"" + pieces[i] + "\" on line " + std::to_string(i + 1));
      v.add(pieces[i]);
    }
    return v;
  }

  std::size_t size() const noexcept { return pieces_.size(); }
  const std::vector<std::string>& pieces() const noexcept { return pieces_; }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& p) const { return id_of_.count(p) != 0; }

  std::optional<TokenId> find(const std::string& p) const {
    auto it = id_of_.find(p);
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }

  /// Adds a piece if absent and returns its id.
  TokenId add(std::string p) {
    if (auto it = id_of_.find(p); it != id_of_.end()) return it->second;
    const auto id = static_cast<TokenId>(pieces_.size());
    max_chars_ = std::max(max_chars_, utf8::length(p));
    id_of_.emplace(p, id);
    pieces_.push_back(std::move(p));
    return id;
  }

  /// Longest piece in code points (continuation prefix included).
  std::size_t max_piece_chars() const noexcept { return max_chars_; }

  /// One piece per line, LF-terminated. Also the input of fingerprint().
  std::string serialize() const {
    std::string out;
    for (const auto& p : pieces_) {
      out += p;
      out.push_back('\n');
    }
    return out;
  }

  std::string fingerprint() const { return hex64(fnv1a64(serialize())); }

  bool operator==(const Vocabulary& o) const { return pieces_ == o.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> id_of_;
  std::size_t max_chars_ = 0;
};

struct TrainerConfig {
  std::size_t vocab_size = 1000;
  std::uint64_t min_pair_frequency = 1;
  std::size_t max_word_length = 64;

  static TrainerConfig production() { return {70000, 1, 64}; }
};

// ------------------------------------------------------- pre-tokenizing

namespace detail {

inline char32_t decode_at(std::string_view s, std::size_t& i) {
  UChar32 c;
  int32_t idx = static_cast<int32_t>(i);
  U8_NEXT(reinterpret_cast<const uint8_t*>(s.data()), idx, static_cast<int32_t>(s.size()), c);
  i = static_cast<std::size_t>(idx);
  return c < 0 ? 0xFFFD : static_cast<char32_t>(c);
}

// Apostrophes belong to words in Somali orthography, so they are not split off.
inline bool is_split_punct(char32_t c) { return c != U'\'' && u_ispunct(static_cast<UChar32>(c)); }

inline bool is_space(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)); }

}  // namespace detail

/// Splits on whitespace, then splits punctuation characters into standalone words.
inline std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    const char32_t c = detail::decode_at(text, i);
    if (detail::is_space(c)) {
      flush();
    } else if (detail::is_split_punct(c)) {
      flush();
      words.emplace_back(text.substr(start, i - start));
    } else {
      cur.append(text.substr(start, i - start));
    }
  }
  flush();
  return words;
}

/// The form decode() reproduces: pre-tokenized words joined by single spaces.
inline std::string canonical_spacing(std::string_view text) {
  std::string out;
  for (const auto& w : pretokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

using WordCounts = std::map<std::string, std::uint64_t>;

inline void count_words(std::string_view text, WordCounts& counts) {
  for (auto& w : pretokenize(text)) ++counts[std::move(w)];
}

// -------------------------------------------------------------- training

/// Result of training: the vocabulary plus the ordered merged strings
/// (one per merge round, including rounds that produced an existing piece).
struct TrainResult {
  Vocabulary vocab;
  std::vector<std::string> merges;
};

namespace detail {

inline std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

inline std::string merged_piece(const std::string& left, const std::string& right) {
  return left + (is_continuation(right) ? right.substr(kContinuation.size()) : right);
}

}  // namespace detail

/// Trains a WordPiece vocabulary.
///
/// Seed: the five specials, every observed character, and its "##"
/// continuation form. Each round merges the adjacent pair with the highest
/// freq(pair) / (freq(left) * freq(right)); ties go to the lexicographically
/// smallest merged string. Stops at vocab_size or when no pair reaches
/// min_pair_frequency.
inline TrainResult train_wordpiece_traced(const WordCounts& corpus, const TrainerConfig& cfg) {
  if (cfg.min_pair_frequency < 1) throw ConfigError("tokenizer", "min_pair_frequency must be >= 1");

  struct Word {
    std::vector<TokenId> pieces;
    std::uint64_t freq;
  };
  std::vector<std::pair<std::vector<std::string>, std::uint64_t>> split;
  std::vector<std::string> alphabet;
  {
    std::unordered_set<std::string> seen;
    for (const auto& [word, freq] : corpus) {
      if (freq == 0 || word.empty()) continue;
      if (utf8::length(word) > cfg.max_word_length) continue;
      std::vector<std::string> chars;
      for (auto c : utf8::split_chars(word)) {
        chars.emplace_back(c);
        if (seen.insert(std::string(c)).second) alphabet.emplace_back(c);
      }
      split.emplace_back(std::move(chars), freq);
    }
  }
  if (split.empty()) throw Error("tokenizer", "cannot train on an empty corpus");
  std::sort(alphabet.begin(), alphabet.end());

  TrainResult res;
  Vocabulary& vocab = res.vocab;
  for (const auto& c : alphabet) vocab.add(c);
  for (const auto& c : alphabet) vocab.add(std::string(kContinuation) + c);
  if (cfg.vocab_size < vocab.size())
    throw ConfigError("tokenizer", "vocab_size " + std::to_string(cfg.vocab_size) + " is smaller than the seed set (" +
                                       std::to_string(vocab.size()) + ")");

  std::vector<Word> words;
  words.reserve(split.size());
  for (auto& [chars, freq] : split) {
    Word w{{}, freq};
    for (std::size_t i = 0; i < chars.size(); ++i)
      w.pieces.push_back(*vocab.find(i == 0 ? chars[i] : std::string(kContinuation) + chars[i]));
    words.push_back(std::move(w));
  }

  std::vector<std::uint64_t> piece_freq(vocab.size(), 0);
  std::unordered_map<std::uint64_t, std::uint64_t> pair_freq;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> pair_words;

  auto account = [&](std::size_t wi, bool add) {
    const Word& w = words[wi];
    for (std::size_t i = 0; i < w.pieces.size(); ++i) {
      auto& pf = piece_freq[static_cast<std::size_t>(w.pieces[i])];
      pf = add ? pf + w.freq : pf - w.freq;
      if (i + 1 < w.pieces.size()) {
        const auto key = detail::pair_key(w.pieces[i], w.pieces[i + 1]);
        auto& f = pair_freq[key];
        if (add) {
          f += w.freq;
          pair_words[key].push_back(wi);
        } else {
          f -= w.freq;
          if (f == 0) pair_freq.erase(key);
        }
      }
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, true);

  std::vector<std::size_t> stamp(words.size(), 0);
  std::size_t round = 0;
  while (vocab.size() < cfg.vocab_size) {
    // Pick the best pair. Scores compare exactly via cross-multiplication.
    std::uint64_t best_key = 0, best_f = 0;
    unsigned __int128 best_den = 1;
    std::string best_str;
    bool found = false;
    for (const auto& [key, f] : pair_freq) {
      if (f < cfg.min_pair_frequency) continue;
      const auto a = static_cast<TokenId>(key >> 32), b = static_cast<TokenId>(key & 0xFFFFFFFFu);
      const unsigned __int128 den = static_cast<unsigned __int128>(piece_freq[static_cast<std::size_t>(a)]) *
                                    piece_freq[static_cast<std::size_t>(b)];
      if (found) {
        const unsigned __int128 lhs = static_cast<unsigned __int128>(f) * best_den;
        const unsigned __int128 rhs = static_cast<unsigned __int128>(best_f) * den;
        if (lhs < rhs) continue;
        if (lhs == rhs) {
          auto s = detail::merged_piece(vocab.piece(a), vocab.piece(b));
          if (s >= best_str) continue;
          best_str = std::move(s);
          best_key = key, best_f = f, best_den = den;
          continue;
        }
      }
      found = true;
      best_key = key, best_f = f, best_den = den;
      best_str = detail::merged_piece(vocab.piece(a), vocab.piece(b));
    }
    if (!found) break;

    const auto a = static_cast<TokenId>(best_key >> 32), b = static_cast<TokenId>(best_key & 0xFFFFFFFFu);
    const TokenId merged = vocab.add(best_str);
    if (piece_freq.size() < vocab.size()) piece_freq.resize(vocab.size(), 0);
    res.merges.push_back(best_str);
    ++round;

    auto affected = std::move(pair_words[best_key]);
    pair_words.erase(best_key);
    for (std::size_t wi : affected) {
      if (stamp[wi] == round) continue;
      stamp[wi] = round;
      Word& w = words[wi];
      bool has = false;
      for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i)
        if (w.pieces[i] == a && w.pieces[i + 1] == b) has = true;
      if (!has) continue;
      account(wi, false);
      std::vector<TokenId> next;
      next.reserve(w.pieces.size());
      for (std::size_t i = 0; i < w.pieces.size(); ++i) {
        if (i + 1 < w.pieces.size() && w.pieces[i] == a && w.pieces[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.pieces[i]);
        }
      }
      w.pieces = std::move(next);
      account(wi, true);
    }
  }
  return res;
}

inline Vocabulary train_wordpiece(const WordCounts& corpus, const TrainerConfig& cfg) {
  return train_wordpiece_traced(corpus, cfg).vocab;
}

// -------------------------------------------------------------- encoding

/// Reference greedy longest-match-first segmentation of one word.
/// Returns {[UNK]} when any remainder cannot be matched.
inline std::vector<TokenId> encode_word(std::string_view word, const Vocabulary& vocab,
                                        std::size_t max_word_length = 64) {
  const auto chars = utf8::split_chars(word);
  if (chars.empty()) return {};
  if (chars.size() > max_word_length) return {kUnk};
  std::vector<TokenId> out;
  std::size_t start = 0;
  const std::size_t max_len = vocab.max_piece_chars();
  while (start < chars.size()) {
    std::optional<TokenId> hit;
    std::size_t end = std::min(chars.size(), start + max_len);
    for (; end > start; --end) {
      std::string cand = start > 0 ? std::string(kContinuation) : std::string();
      for (std::size_t k = start; k < end; ++k) cand += chars[k];
      if (auto id = vocab.find(cand); id && !is_special(*id)) {
        hit = id;
        break;
      }
    }
    if (!hit) return {kUnk};
    out.push_back(*hit);
    start = end;
  }
  return out;
}

inline std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab, std::size_t max_word_length = 64) {
  std::vector<TokenId> ids;
  for (const auto& w : pretokenize(text)) {
    auto piece_ids = encode_word(w, vocab, max_word_length);
    ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
  }
  return ids;
}

/// Byte trie over the vocabulary with separate roots for word-initial and
/// continuation pieces. Output-equivalent to encode_word().
class TrieMatcher {
 public:
  explicit TrieMatcher(const Vocabulary& vocab) {
    nodes_.resize(2);
    for (TokenId id = kNumSpecials; id < static_cast<TokenId>(vocab.size()); ++id) {
      std::string_view p = vocab.piece(id);
      int node = 0;
      if (is_continuation(p) && p.size() > kContinuation.size()) {
        node = 1;
        p.remove_prefix(kContinuation.size());
      }
      for (unsigned char c : p) {
        auto [it, inserted] = nodes_[static_cast<std::size_t>(node)].next.try_emplace(c, 0);
        if (inserted) {
          it->second = static_cast<int>(nodes_.size());
          nodes_.emplace_back();
        }
        node = it->second;
      }
      nodes_[static_cast<std::size_t>(node)].id = id;
    }
  }

  std::vector<TokenId> encode_word(std::string_view word, std::size_t max_word_length = 64) const {
    if (word.empty()) return {};
    if (utf8::length(word) > max_word_length) return {kUnk};
    std::vector<TokenId> out;
    std::size_t start = 0;
    while (start < word.size()) {
      int node = start == 0 ? 0 : 1;
      TokenId best = -1;
      std::size_t best_end = start;
      for (std::size_t i = start; i < word.size(); ++i) {
        const auto& nx = nodes_[static_cast<std::size_t>(node)].next;
        auto it = nx.find(static_cast<unsigned char>(word[i]));
        if (it == nx.end()) break;
        node = it->second;
        const TokenId id = nodes_[static_cast<std::size_t>(node)].id;
        // Pieces are valid UTF-8, so every terminal lies on a code point boundary.
        if (id >= 0) best = id, best_end = i + 1;
      }
      if (best < 0) return {kUnk};
      out.push_back(best);
      start = best_end;
    }
    return out;
  }

  std::vector<TokenId> encode(std::string_view text, std::size_t max_word_length = 64) const {
    std::vector<TokenId> ids;
    for (const auto& w : pretokenize(text)) {
      auto piece_ids = encode_word(w, max_word_length);
      ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
    }
    return ids;
  }

 private:
  struct Node {
    std::map<unsigned char, int> next;
    TokenId id = -1;
  };
  std::vector<Node> nodes_;
};

/// Joins continuation pieces to their predecessor and word-initial pieces
/// with single spaces. Specials other than [UNK] are dropped.
inline std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw Error("tokenizer", "token id " + std::to_string(id) + " out of range");
    if (is_special(id) && id != kUnk) continue;
    const std::string& p = vocab.piece(id);
    if (is_continuation(p) && p.size() > kContinuation.size()) {
      out.append(p, kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += p;
    }
  }
  return out;
}

// ------------------------------------------------------------------- I/O

inline void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("tokenizer", "cannot write " + path.string());
  out << vocab.serialize();
  if (!out) throw IoError("tokenizer", "write failure on " + path.string());
}

inline Vocabulary parse_vocab(std::string_view data) {
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < data.size()) {
    auto end = data.find('\n', start);
    if (end == std::string_view::npos) end = data.size();
    pieces.emplace_back(data.substr(start, end - start));
    start = end + 1;
  }
  return Vocabulary::from_pieces(pieces);
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("tokenizer", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_vocab(ss.str());
}

}  // namespace somnlp::tokenizer
