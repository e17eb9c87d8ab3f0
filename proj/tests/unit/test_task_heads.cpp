#include <gtest/gtest.h>

#include <filesystem>

#include "somnlp/task_heads.hpp"
#include "support/fixture_data.hpp"
#include "support/grad_check.hpp"
#include "support/naive_encoder.hpp"

using namespace somnlp;
using namespace somnlp::task;
using tokenizer::TokenId;

namespace {

model::ModelConfig small_config(std::size_t vocab) { return {vocab, 32, 1, 2, 64, 64, 2, 0.1, 1e-12}; }

model::EncoderCheckpoint checkpoint_for(const tokenizer::Vocabulary& vocab, std::uint64_t seed = 1) {
  const auto cfg = small_config(vocab.size());
  return {cfg, model::init_model<float>(cfg, seed), vocab.fingerprint(), {}};
}

struct Fixture {
  std::vector<LabeledExample> examples;
  tokenizer::Vocabulary vocab;
};

Fixture separable() {
  Fixture f;
  f.examples = load_examples(fixtures::dir() / "datasets" / "separable32.jsonl");
  std::vector<std::string> text;
  for (const auto& e : f.examples) text.push_back(corpus::normalize_text(e.text));
  f.vocab = fixtures::train_vocab(text, 300);
  return f;
}

TaskSpec fake_real() { return {TaskKind::binary, {"fake", "real"}, 0.5}; }

/// Random multi-hot or one-hot targets over short random sequences.
std::vector<EncodedExample> random_examples(const model::ModelConfig& cfg, std::size_t k, bool multi, std::size_t count,
                                            std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EncodedExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<TokenId> ids;
    const auto len = 1 + rng.below(8);
    for (std::size_t t = 0; t < len; ++t)
      ids.push_back(static_cast<TokenId>(tokenizer::kNumSpecials + rng.below(cfg.vocab_size - tokenizer::kNumSpecials)));
    std::vector<std::uint8_t> target(k, 0);
    if (multi)
      for (auto& v : target) v = rng.bernoulli(0.4);
    else
      target[rng.below(k)] = 1;
    out.push_back({mlm::build_sequence(ids, 12), target});
  }
  return out;
}

TaskParams<double> random_task_params(const model::ModelConfig& cfg, std::size_t k, std::uint64_t seed) {
  TaskParams<double> p{oracle::conditioned_params(cfg, seed), {}, {}};
  Rng rng(seed + 1000);
  p.cls_w.resize(static_cast<Eigen::Index>(cfg.hidden), static_cast<Eigen::Index>(k));
  p.cls_b.resize(1, static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < p.cls_w.size(); ++i) p.cls_w.data()[i] = 0.5 * rng.normal();
  for (Eigen::Index i = 0; i < p.cls_b.size(); ++i) p.cls_b.data()[i] = 0.1 * rng.normal();
  return p;
}

double max_fd_error(TaskParams<double> p, const model::ModelConfig& cfg, TaskKind kind,
                    const std::vector<EncodedExample>& batch, std::size_t per_tensor, std::size_t* checked) {
  const auto g = classify_loss<double>(p, cfg, kind, batch, true).grads;
  auto gn = named_tensors(g);
  auto pn = named_tensors(p);
  Rng rng(9);
  double worst = 0;
  for (std::size_t t = 0; t < pn.size(); ++t) {
    if (pn[t].first.starts_with("mlm.")) continue;  // unused by the classifier
    auto& m = *pn[t].second;
    std::vector<long> order(static_cast<std::size_t>(m.size()));
    std::iota(order.begin(), order.end(), 0L);
    rng.shuffle(order);
    for (std::size_t s = 0; s < std::min(per_tensor, order.size()); ++s) {
      const long i = order[s];
      const double orig = m.data()[i];
      m.data()[i] = orig + 1e-3;
      const double up = classify_loss<double>(p, cfg, kind, batch, false).loss;
      m.data()[i] = orig - 1e-3;
      const double down = classify_loss<double>(p, cfg, kind, batch, false).loss;
      m.data()[i] = orig;
      const double numeric = (up - down) / 2e-3;
      worst = std::max(worst, oracle::relative_error(gn[t].second->data()[i], numeric));
      ++*checked;
    }
  }
  return worst;
}

}  // namespace

TEST(TaskSpec, Validation) {
  EXPECT_NO_THROW(fake_real().validate());
  EXPECT_NO_THROW(TaskSpec::multilabel_toxicity().validate());
  EXPECT_EQ(TaskSpec::multilabel_toxicity().size(), 6u);
  EXPECT_THROW((TaskSpec{TaskKind::multiclass, {"a"}, 0.5}.validate()), ConfigError);
  EXPECT_THROW((TaskSpec{TaskKind::binary, {"a", "b", "c"}, 0.5}.validate()), ConfigError);
  EXPECT_THROW((TaskSpec{TaskKind::multiclass, {"a", "b", "a"}, 0.5}.validate()), ConfigError);
  EXPECT_THROW((TaskSpec{TaskKind::multilabel, {"a", "b"}, 1.0}.validate()), ConfigError);
  EXPECT_EQ(spec_from_json(to_json(TaskSpec::multilabel_toxicity())), TaskSpec::multilabel_toxicity());
}

TEST(AttachHead, ShapesAndDeterminism) {
  tokenizer::Vocabulary vocab;
  for (auto p : {"a", "b", "c", "##a", "##b"}) vocab.add(p);
  const auto ckpt = checkpoint_for(vocab);
  const auto bin = attach_head(ckpt, fake_real(), 3);
  EXPECT_EQ(bin.params.cls_w.cols(), 2);
  EXPECT_EQ(bin.params.cls_w.rows(), 32);
  const TaskSpec topics{TaskKind::multiclass,
                        {"business", "entertainment", "health", "politics", "religion", "sports", "technology"}, 0.5};
  const auto seven = attach_head(ckpt, topics, 3);
  const auto seq = mlm::build_sequence(std::vector<TokenId>{5, 6, 7}, 8);
  EXPECT_EQ(forward_classify(seven, std::span(&seq, 1))[0].size(), 7u);
  EXPECT_EQ(attach_head(ckpt, fake_real(), 3), bin);
  EXPECT_FALSE(attach_head(ckpt, fake_real(), 4) == bin);
  EXPECT_TRUE(bin.params.cls_b.isZero());
  EXPECT_LE(bin.params.cls_w.cwiseAbs().maxCoeff(), 0.04f);
  EXPECT_EQ(bin.params.encoder, ckpt.params);
  EXPECT_THROW(attach_head(ckpt, {TaskKind::binary, {"x"}, 0.5}, 1), ConfigError);
}

TEST(ForwardClassify, ZeroHeadGivesUniformAndHalf) {
  tokenizer::Vocabulary vocab;
  for (auto p : {"a", "b", "c"}) vocab.add(p);
  auto ckpt = checkpoint_for(vocab);
  const auto seq = mlm::build_sequence(std::vector<TokenId>{5, 6, 7}, 10);
  auto mc = attach_head(ckpt, {TaskKind::multiclass, {"x", "y", "z"}, 0.5}, 1);
  mc.params.cls_w.setZero();
  const auto pm = forward_classify(mc, std::span(&seq, 1));
  for (double p : pm[0]) EXPECT_NEAR(p, 1.0 / 3, 1e-12);
  auto ml = attach_head(ckpt, TaskSpec::multilabel_toxicity(), 1);
  ml.params.cls_w.setZero();
  const auto pl = forward_classify(ml, std::span(&seq, 1));
  for (double p : pl[0]) EXPECT_EQ(p, 0.5);
}

TEST(ForwardClassify, MulticlassSumsToOneAndMatchesNaiveOracle) {
  const auto cfg = model::ModelConfig::tiny(40);
  const auto p = random_task_params(cfg, 4, 21);
  const auto batch = random_examples(cfg, 4, false, 6, 2);
  for (const auto& ex : batch) {
    const auto z = sequence_logits<double>(p, cfg, ex.seq, nullptr, nullptr);
    const auto probs = probabilities(TaskKind::multiclass, z);
    EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-6);
    // Oracle: full padded sequence, [CLS] row, straight-loop linear layer.
    std::vector<int> ids(ex.seq.ids.begin(), ex.seq.ids.end());
    const auto h = oracle::naive_hidden(p.encoder, cfg, ids, ex.seq.attention_mask);
    const auto zn = oracle::naive_linear(oracle::Grid{h[0]}, p.cls_w, p.cls_b)[0];
    double mx = *std::max_element(zn.begin(), zn.end()), s = 0;
    for (double v : zn) s += std::exp(v - mx);
    for (std::size_t k = 0; k < zn.size(); ++k) EXPECT_NEAR(probs[k], std::exp(zn[k] - mx) / s, 1e-5);
  }
}

TEST(ForwardClassify, RejectsForeignVocabulary) {
  auto f = separable();
  const auto m = attach_head(checkpoint_for(f.vocab), fake_real(), 1);
  auto other = f.vocab;
  other.add("zzzz");
  const std::vector<std::string> texts{"been abuur ah"};
  EXPECT_NO_THROW(forward_classify(m, f.vocab, texts, 32));
  EXPECT_THROW(forward_classify(m, other, texts, 32), FingerprintMismatch);
}

TEST(ForwardClassify, LabelPermutationEquivariance) {
  auto f = separable();
  const auto m = attach_head(checkpoint_for(f.vocab), {TaskKind::multiclass, {"a", "b", "c", "d"}, 0.5}, 5);
  auto perm = m;
  const std::vector<int> order{2, 0, 3, 1};  // new column j holds old column order[j]
  for (int j = 0; j < 4; ++j) {
    perm.spec.labels[j] = m.spec.labels[order[j]];
    perm.params.cls_w.col(j) = m.params.cls_w.col(order[j]);
    perm.params.cls_b(0, j) = m.params.cls_b(0, order[j]);
  }
  std::vector<std::string> texts;
  for (const auto& e : f.examples) texts.push_back(e.text);
  const auto a = forward_classify(m, f.vocab, texts, 32), b = forward_classify(perm, f.vocab, texts, 32);
  for (std::size_t i = 0; i < texts.size(); ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(b[i][j], a[i][order[j]], 1e-12);
  EXPECT_EQ(predict(m, f.vocab, texts, 32), predict(perm, f.vocab, texts, 32));
}

TEST(ClassifyLoss, MultilabelIsMeanOfPerLabelBce) {
  const auto cfg = model::ModelConfig::tiny(30);
  auto p = random_task_params(cfg, 3, 4);
  p.cls_w.setZero();
  p.cls_b << 0.0, std::log(3.0), -std::log(3.0);  // sigmoids 1/2, 3/4, 1/4
  auto batch = random_examples(cfg, 3, true, 2, 8);
  batch[0].target = {1, 1, 0};
  batch[1].target = {0, 0, 1};
  // Row 1: -ln(1/2) - ln(3/4) - ln(1 - 1/4). Row 2: -ln(1/2) - ln(1 - 3/4) - ln(1/4). Mean of 6 terms.
  const double expected = (2 * std::log(2.0) + 2 * std::log(4.0 / 3) + 2 * std::log(4.0)) / 6;
  EXPECT_NEAR(classify_loss<double>(p, cfg, TaskKind::multilabel, batch, false).loss, expected, 1e-12);
}

TEST(ClassifyLoss, GradientsMatchFiniteDifferences) {
  const auto cfg = model::ModelConfig::tiny(30);
  for (auto kind : {TaskKind::multiclass, TaskKind::multilabel}) {
    const auto p = random_task_params(cfg, 3, 31);
    const auto batch = random_examples(cfg, 3, kind == TaskKind::multilabel, 4, 17);
    std::size_t checked = 0;
    EXPECT_LE(max_fd_error(p, cfg, kind, batch, 6, &checked), 1e-4) << to_string(kind);
    EXPECT_GE(checked, 100u);
  }
}

TEST(Predict, ArgmaxThresholdAndTies) {
  const auto spec = fake_real();
  EXPECT_EQ(predict_from_probs(spec, std::vector{0.9, 0.1}), std::vector<std::string>{"fake"});
  EXPECT_EQ(predict_from_probs(spec, std::vector{0.5, 0.5}), std::vector<std::string>{"fake"});
  const TaskSpec ml{TaskKind::multilabel, {"l1", "l2", "l3"}, 0.5};
  EXPECT_EQ(predict_from_probs(ml, std::vector{0.7, 0.4, 0.5}), (std::vector<std::string>{"l1", "l3"}));
  EXPECT_TRUE(predict_from_probs(ml, std::vector{0.1, 0.2, 0.3}).empty());
}

TEST(Datasets, ParseBothShapesAndReportLines) {
  const auto ex = parse_examples(
      "{\"id\":\"a\",\"text\":\"x\",\"label\":\"fake\"}\n\n{\"id\":\"b\",\"text\":\"y\",\"labels\":[\"insult\"]}\n");
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].labels, std::vector<std::string>{"fake"});
  EXPECT_EQ(ex[1].labels, std::vector<std::string>{"insult"});
  EXPECT_EQ(parse_examples(examples_jsonl(ex, true)), ex);
  try {
    parse_examples("{\"id\":\"a\",\"text\":\"x\",\"label\":\"fake\"}\n{\"id\":\"b\",\"text\":\"y\"}\n");
    FAIL();
  } catch (const RecordError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(check_examples(fake_real(), std::vector<LabeledExample>{{"a", "x", {"maybe"}}}), ValidationError);
  EXPECT_THROW(check_examples(fake_real(), std::vector<LabeledExample>{{"a", "x", {}}}), ValidationError);
  EXPECT_NO_THROW(check_examples(TaskSpec::multilabel_toxicity(), std::vector<LabeledExample>{{"a", "x", {}}}));
}

TEST(SplitDataset, RatiosRoundingAndDeterminism) {
  std::vector<LabeledExample> ex;
  for (int i = 0; i < 100; ++i) ex.push_back({"e" + std::to_string(i), "t", {i % 2 ? "fake" : "real"}});
  const auto all = split_dataset(fake_real(), ex, {1, 0, 0}, 1);
  EXPECT_EQ(all.train.size(), 100u);
  EXPECT_TRUE(all.val.empty() && all.test.empty());
  const auto s = split_dataset(fake_real(), ex, {0.8, 0.1, 0.1}, 7);
  for (const char* label : {"fake", "real"}) {
    auto count = [&](const auto& v) { return std::count_if(v.begin(), v.end(), [&](auto& e) { return e.labels[0] == label; }); };
    EXPECT_EQ(count(s.train), 40);
    EXPECT_EQ(count(s.val), 5);
    EXPECT_EQ(count(s.test), 5);
  }
  const auto again = split_dataset(fake_real(), ex, {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);
  EXPECT_FALSE(split_dataset(fake_real(), ex, {0.8, 0.1, 0.1}, 8).train == s.train);
  std::vector<LabeledExample> tiny{{"a", "t", {"fake"}}, {"b", "t", {"fake"}}, {"c", "t", {"real"}}, {"d", "t", {"real"}}};
  EXPECT_THROW(split_dataset(fake_real(), tiny, {0.8, 0.1, 0.1}, 1), ConfigError);
  EXPECT_NO_THROW(split_dataset(fake_real(), tiny, {0.5, 0.5, 0.0}, 1));
  EXPECT_THROW(split_dataset(fake_real(), ex, {0.8, 0.1, 0.2}, 1), ConfigError);
}

TEST(SplitDataset, MultilabelStratifiesOnToxicFlag) {
  std::vector<LabeledExample> ex;
  for (int i = 0; i < 20; ++i) ex.push_back({"e" + std::to_string(i), "t", i < 10 ? std::vector<std::string>{} : std::vector<std::string>{"insult"}});
  const auto s = split_dataset(TaskSpec::multilabel_toxicity(), ex, {0.8, 0.2, 0.0}, 3);
  EXPECT_EQ(std::count_if(s.train.begin(), s.train.end(), [](auto& e) { return e.labels.empty(); }), 8);
  EXPECT_EQ(s.val.size(), 4u);
}

TEST(Finetune, ZeroEpochsAndEmptyTrain) {
  auto f = separable();
  const auto m = attach_head(checkpoint_for(f.vocab), fake_real(), 1);
  const auto data = encode_examples(m.spec, f.examples, f.vocab, 32);
  FineTuneConfig cfg;
  cfg.epochs = 0;
  const auto r = finetune(m, data, {}, cfg);
  EXPECT_EQ(r.model, m);
  EXPECT_TRUE(r.history.empty());
  cfg.epochs = 1;
  EXPECT_THROW(finetune(m, {}, data, cfg), ConfigError);
}

TEST(Finetune, SeparableFixtureReachesFullTrainAccuracy) {
  auto f = separable();
  const auto ckpt = checkpoint_for(f.vocab);
  const auto m = attach_head(ckpt, fake_real(), 1);
  const auto data = encode_examples(m.spec, f.examples, f.vocab, 32);
  FineTuneConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 200;
  cfg.batch_size = 8;
  cfg.patience = 20;
  cfg.seed = 42;
  const auto r = finetune(m, data, {}, cfg);
  ASSERT_TRUE(r.metric_on_train);
  EXPECT_GE(r.model.finetune.best_metric, 0.99);
  EXPECT_LE(r.model.finetune.best_epoch, 200u);
  // Returned weights are the best epoch's.
  EXPECT_NEAR(evaluate_metric(r.model, data), r.history[r.model.finetune.best_epoch - 1].metric, 1e-6);
  EXPECT_TRUE(r.history[r.model.finetune.best_epoch - 1].best);
  // Same seed, same history and weights; the starting model is untouched.
  const auto again = finetune(m, data, {}, cfg);
  EXPECT_EQ(again.history, r.history);
  EXPECT_EQ(again.model, r.model);
  EXPECT_EQ(m.params.encoder, ckpt.params);
}

TEST(Finetune, DivergenceAbortsWithDiagnostics) {
  auto f = separable();
  const auto m = attach_head(checkpoint_for(f.vocab), fake_real(), 1);
  const auto data = encode_examples(m.spec, f.examples, f.vocab, 32);
  FineTuneConfig cfg;
  cfg.lr = 1e38;
  cfg.epochs = 3;
  try {
    finetune(m, data, {}, cfg);
    FAIL() << "expected divergence";
  } catch (const FineTuneDiverged& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_FALSE(e.tensor().empty());
  }
}

TEST(RandomSearch, TieBreakSingleTrialAndFailure) {
  SearchSpace space;
  FineTuneConfig base;
  const auto one = random_search(space, 1, 5, base, [](const FineTuneConfig&) { return 0.3; });
  EXPECT_EQ(one.best_trial, 0u);
  EXPECT_EQ(one.best, sample_config(space, base, 5, 0));
  const auto flat = random_search(space, 6, 5, base, [](const FineTuneConfig&) { return 0.7; }, 3);
  EXPECT_EQ(flat.best_trial, 0u);
  EXPECT_EQ(flat.log.size(), 6u);
  for (const auto& t : flat.log) {
    EXPECT_GE(t.config.lr, space.lr_min);
    EXPECT_LE(t.config.lr, space.lr_max);
  }
  EXPECT_THROW(random_search(space, 3, 5, base, [](const FineTuneConfig&) -> double { throw NonFiniteError("task", "loss"); }),
               SearchFailed);
  EXPECT_THROW(random_search(space, 0, 5, base, [](const FineTuneConfig&) { return 0.0; }), ConfigError);
}

TEST(RandomSearch, ReproducibleBestTrialOnFixture) {
  auto f = separable();
  const auto m = attach_head(checkpoint_for(f.vocab), fake_real(), 1);
  const auto split = split_dataset(m.spec, f.examples, {0.75, 0.25, 0.0}, 3);
  const auto train = encode_examples(m.spec, split.train, f.vocab, 32), val = encode_examples(m.spec, split.val, f.vocab, 32);
  SearchSpace space{1e-4, 3e-3, {4, 8}, {1, 2, 3}};
  const auto a = random_search(m, train, val, space, 5, 11);
  const auto b = random_search(m, train, val, space, 5, 11, {}, 4);
  EXPECT_EQ(a.best_trial, b.best_trial);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.log[i].metric, b.log[i].metric);
}

TEST(TaskModelFile, RoundTripAndContracts) {
  auto f = separable();
  const auto ckpt = checkpoint_for(f.vocab);
  auto m = attach_head(ckpt, TaskSpec::multilabel_toxicity(), 2);
  m.finetune = {3, 2, 0.875, 9};
  const auto dir = std::filesystem::temp_directory_path() / "somnlp_task_heads_test";
  std::filesystem::create_directories(dir);
  save_task_model(m, dir / "task.ckpt");
  EXPECT_EQ(load_task_model(dir / "task.ckpt", f.vocab.fingerprint()), m);
  EXPECT_THROW(load_task_model(dir / "task.ckpt", "0000000000000000"), FingerprintMismatch);
  EXPECT_THROW(model::load_checkpoint(dir / "task.ckpt"), FormatError);
  model::save_checkpoint(ckpt, dir / "enc.ckpt");
  EXPECT_THROW(load_task_model(dir / "enc.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}
