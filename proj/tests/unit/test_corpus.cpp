#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "somnlp/corpus.hpp"

using namespace somnlp;
using namespace somnlp::corpus;

namespace {

const std::filesystem::path kDir = std::filesystem::path(SOMNLP_FIXTURES) / "corpus";

Document doc(std::string id, std::string text, std::string source = "t") {
  return Document{std::move(id), std::nullopt, std::move(text), std::nullopt, std::move(source), {}};
}

}  // namespace

TEST(Ingest, EmptyFileYieldsNothing) {
  EXPECT_TRUE(ingest_source(kDir / "empty.jsonl", Format::jsonl, "e").empty());
  EXPECT_TRUE(ingest_source(kDir / "empty.txt", Format::plain_text, "e").empty());
}

TEST(Ingest, JsonlRecordsKeepIdsAndOrder) {
  const auto docs = ingest_source(kDir / "news.jsonl", Format::jsonl, "bbc");
  ASSERT_EQ(docs.size(), 3u);  // wc -l news.jsonl
  EXPECT_EQ(docs[0].id, "bbc-001");
  EXPECT_EQ(docs[1].id, "bbc-002");
  EXPECT_EQ(docs[2].id, "bbc-003");
  EXPECT_EQ(docs[0].title, "Doorashada Soomaaliya");
  EXPECT_FALSE(docs[1].title);
  EXPECT_FALSE(docs[2].url);
  for (const auto& d : docs) EXPECT_EQ(d.source, "bbc");
}

TEST(Ingest, MissingTextNamesTheLine) {
  try {
    ingest_source(kDir / "missing_text.jsonl", Format::jsonl, "x");
    FAIL() << "expected RecordError";
  } catch (const RecordError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("text"), std::string::npos);
  }
  IngestReport report;
  const auto docs = ingest_source(kDir / "missing_text.jsonl", Format::jsonl, "x", {OnError::skip}, &report);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[1].id, "x3");
  ASSERT_EQ(report.errors.size(), 1u);
}

TEST(Ingest, UnreadableFileIsIoError) {
  EXPECT_THROW(ingest_source(kDir / "does_not_exist.jsonl", Format::jsonl, "x"), IoError);
}

TEST(Ingest, CsvHandlesQuotesAndEmbeddedNewlines) {
  const auto docs = ingest_source(kDir / "posts.csv", Format::csv, "fb");
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[0].text, "Waa maxay, saaxiib?");
  EXPECT_EQ(docs[1].text, "Qoraal \"xigasho\" leh\noo laba sadar ah.");
  EXPECT_FALSE(docs[1].title);
  EXPECT_FALSE(docs[1].url);
  EXPECT_EQ(docs[2].id, "p3");
}

TEST(Ingest, PlainTextPerFileOrPerBlock) {
  const auto whole = ingest_source(kDir / "blocks.txt", Format::plain_text, "books");
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_EQ(whole[0].id, "blocks");
  IngestOptions opts;
  opts.plain_text_mode = PlainTextMode::block;
  const auto blocks = ingest_source(kDir / "blocks.txt", Format::plain_text, "books", opts);
  ASSERT_EQ(blocks.size(), 3u);
  EXPECT_EQ(blocks[0].text, "Sheeko gaaban oo ku saabsan tuulada.\nWaxay ahayd maalin kulul.");
  EXPECT_EQ(blocks[2].id, "blocks#3");
}

TEST(Ingest, FormatFromExtension) {
  EXPECT_EQ(format_from_extension("a.jsonl"), Format::jsonl);
  EXPECT_EQ(format_from_extension("a.csv"), Format::csv);
  EXPECT_EQ(format_from_extension("a.txt"), Format::plain_text);
}

TEST(Normalize, LowercaseAndCollapse) {
  EXPECT_EQ(normalize_text("WAA   MAXAY"), "waa maxay");
  EXPECT_EQ(normalize_text("a\t\tb   c"), "a b c");
  EXPECT_EQ(normalize_text("  \n "), "");
}

TEST(Normalize, EmojiBetweenWordsLeavesOneSpace) {
  EXPECT_EQ(normalize_text("waa \xF0\x9F\x98\x80 maxay"), "waa maxay");
  EXPECT_EQ(normalize_text("waa\xF0\x9F\x98\x80maxay"), "waa maxay");
}

TEST(Normalize, KeepsApostropheDigitsAndBasicPunctuation) {
  EXPECT_EQ(normalize_text("Da'ay 2024, (haa)!"), "da'ay 2024, (haa)!");
  EXPECT_EQ(normalize_text("a#b@c"), "a b c");
}

TEST(Normalize, ComposesCombiningSequences) {
  // e + COMBINING ACUTE -> U+00E9
  EXPECT_EQ(normalize_text("Cafe\xCC\x81"), "caf\xC3\xA9");
  EXPECT_EQ(normalize_text("CAF\xC3\x89"), "caf\xC3\xA9");
}

TEST(Normalize, FlagsCanBeDisabled) {
  NormConfig cfg;
  cfg.lowercase = false;
  cfg.collapse_whitespace = false;
  EXPECT_EQ(normalize_text("WAA  Maxay", cfg), "WAA  Maxay");
}

TEST(Normalize, IsIdempotentOnFixtures) {
  for (const auto* name : {"news.jsonl", "stats.jsonl"})
    for (const auto& d : ingest_source(kDir / name, Format::jsonl, "f")) {
      const auto once = normalize_document(d);
      EXPECT_EQ(normalize_document(once), once) << d.id;
    }
  for (const auto& d : ingest_source(kDir / "posts.csv", Format::csv, "f")) {
    const auto once = normalize_document(d);
    EXPECT_EQ(normalize_document(once), once) << d.id;
  }
}

TEST(Segment, SplitRule) {
  EXPECT_TRUE(segment_sentences("").empty());
  EXPECT_EQ(segment_sentences("Wuu tagay. Waan arkay! Ma runbaa?"),
            (std::vector<std::string>{"Wuu tagay.", "Waan arkay!", "Ma runbaa?"}));
  EXPECT_EQ(segment_sentences("Waa maxay"), (std::vector<std::string>{"Waa maxay"}));
  // No whitespace after the period: not a boundary.
  EXPECT_EQ(segment_sentences("3.5 kg. Haa"), (std::vector<std::string>{"3.5 kg.", "Haa"}));
  EXPECT_TRUE(segment_sentences("   \n").empty());
}

TEST(Dedup, ExactDuplicatesCollapse) {
  EXPECT_EQ(dedup({doc("1", "waa"), doc("2", "waa")}).size(), 1u);
  EXPECT_EQ(dedup({doc("1", "waa"), doc("2", "maxay")}).size(), 2u);
}

TEST(Dedup, PreNormalizationDuplicatesCollapse) {
  const auto res = clean_corpus({doc("1", "Waa Maxay"), doc("2", "waa   maxay"), doc("3", "haa")});
  ASSERT_EQ(res.documents.size(), 2u);
  EXPECT_EQ(res.documents[0].id, "1");
  EXPECT_EQ(res.documents[1].id, "3");
  EXPECT_EQ(res.dropped_duplicates, 1u);
}

TEST(Dedup, SentenceLevelFlag) {
  PipelineOptions opts;
  opts.sentence_dedup = true;
  const auto res = clean_corpus({doc("1", "Haa. Maya."), doc("2", "Maya. Waa."), doc("3", "Haa.")}, opts);
  ASSERT_EQ(res.documents.size(), 2u);
  EXPECT_EQ(res.documents[1].text, "waa.");
  EXPECT_EQ(res.dropped_duplicates, 1u);
}

TEST(Pipeline, DropsEmptyAfterCleaningAndCounts) {
  const auto res = clean_corpus({doc("1", "\xF0\x9F\x98\x80 ###"), doc("2", "waa")});
  EXPECT_EQ(res.dropped_empty, 1u);
  ASSERT_EQ(res.documents.size(), 1u);
}

TEST(Pipeline, WorkerCountDoesNotChangeOutput) {
  std::vector<Document> docs;
  for (int i = 0; i < 200; ++i)
    docs.push_back(doc(std::to_string(i), "Qoraal " + std::to_string(i % 37) + ". WAA  MAXAY? haa"));
  PipelineOptions one, many;
  many.workers = 7;
  const auto a = clean_corpus(docs, one);
  const auto b = clean_corpus(docs, many);
  std::ostringstream sa, sb;
  write_jsonl(a.documents, sa);
  write_jsonl(b.documents, sb);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.documents.size(), 37u);
}

TEST(Merge, ConcatenatesAndQualifiesIds) {
  EXPECT_TRUE(merge_corpora({}).empty());
  const auto merged =
      merge_corpora({{doc("1", "a", "bbc"), doc("2", "b", "bbc")}, {doc("1", "c", "voa"), doc("2", "d", "voa"),
                                                                     doc("3", "e", "voa")}});
  ASSERT_EQ(merged.size(), 5u);
  const std::vector<std::string> ids{"bbc:1", "bbc:2", "voa:1", "voa:2", "voa:3"};
  for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(merged[i].id, ids[i]);
  EXPECT_EQ(merged[2].source, "voa");
  EXPECT_EQ(merged[4].text, "e");
}

TEST(Merge, DuplicateQualifiedIdIsError) {
  EXPECT_THROW(merge_corpora({{doc("1", "a", "bbc")}, {doc("1", "b", "bbc")}}), Error);
}

TEST(Stats, EmptyCorpus) { EXPECT_EQ(corpus_stats({}), CorpusStats{}); }

TEST(Stats, MatchesWordCountOracle) {
  auto docs = clean_corpus(ingest_source(kDir / "stats.jsonl", Format::jsonl, "s")).documents;
  const auto st = corpus_stats(docs);
  // wc -w over the text fields: 26 words, 21 distinct.
  EXPECT_EQ(st.items, 3u);
  EXPECT_EQ(st.sentences, 6u);
  EXPECT_EQ(st.tokens, 26u);
  EXPECT_EQ(st.unique_words, 21u);
}

TEST(Stats, AdditiveOverDisjointCorpora) {
  auto a = clean_corpus(ingest_source(kDir / "news.jsonl", Format::jsonl, "a")).documents;
  auto b = clean_corpus(ingest_source(kDir / "stats.jsonl", Format::jsonl, "b")).documents;
  const auto sa = corpus_stats(a), sb = corpus_stats(b);
  auto both = a;
  both.insert(both.end(), b.begin(), b.end());
  const auto s = corpus_stats(both);
  EXPECT_EQ(s.items, sa.items + sb.items);
  EXPECT_EQ(s.sentences, sa.sentences + sb.sentences);
  EXPECT_EQ(s.tokens, sa.tokens + sb.tokens);
  EXPECT_LE(s.unique_words, sa.unique_words + sb.unique_words);
  EXPECT_LE(s.unique_words, s.tokens);
}

TEST(Output, JsonlRoundTripsThroughIngest) {
  const auto docs = clean_corpus(ingest_source(kDir / "news.jsonl", Format::jsonl, "bbc")).documents;
  const auto tmp = std::filesystem::temp_directory_path() / "somnlp_corpus_roundtrip.jsonl";
  {
    std::ofstream out(tmp);
    write_jsonl(docs, out);
  }
  EXPECT_EQ(ingest_source(tmp, Format::jsonl, "bbc"), docs);
  std::filesystem::remove(tmp);
}

TEST(Output, StatsTableIsAligned) {
  const auto table = stats_table({3, 6, 26, 21});
  EXPECT_EQ(table, "items          3\nsentences      6\ntokens        26\nunique_words  21\n");
}
