#include <gtest/gtest.h>

#include <cmath>

#include "miso/training.hpp"

namespace miso {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  return c;
}

TEST(Modes, StringRoundTrip) {
  for (auto m : {TrainMode::sft, TrainMode::miso_para, TrainMode::miso_succ, TrainMode::miso_fid_para,
                 TrainMode::no_miso})
    EXPECT_EQ(train_mode_from_string(to_string(m)), m);
  EXPECT_THROW(train_mode_from_string("rlhf"), ArgumentError);
}

TEST(Config, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.learning_rate = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  const Tensor logits = Tensor::matrix(4, 128);
  const std::vector<TokenId> toks{1, 5, 9, 3};
  const LossResult r = detail::next_token_xent(logits, toks, 0, 1.0, nullptr);
  EXPECT_EQ(r.tokens, 3u);
  EXPECT_NEAR(r.loss_sum / 3.0, std::log(128.0), 1e-12);
  EXPECT_NEAR(std::log(128.0), 4.852, 5e-4);
}

TEST(Loss, ConfidentCorrectLogitsGiveNearZero) {
  Tensor logits = Tensor::matrix(3, 8);
  const std::vector<TokenId> toks{0, 4, 6};
  logits(0, 4) = 50.0;
  logits(1, 6) = 50.0;
  EXPECT_LT(detail::next_token_xent(logits, toks, 0, 1.0, nullptr).loss_sum, 1e-18);
}

TEST(Loss, PlainExampleMasksInstruction) {
  const PlainExample ex = make_plain_example({1, 20, 21}, {3, 40, 2});
  EXPECT_EQ(ex.loss_from, 3u);
  EXPECT_EQ(detail::loss_token_count(ex), 2u);
}

TEST(Loss, EmptyOutputIsSkipped) {
  const ModelConfig c = small_config();
  const ModelParams p = init_params(c, 1);
  const TrainingExample empty = PlainExample{{1, 20, 3}, 3};
  const TrainingExample real = make_plain_example({1, 20}, {3, 40, 2});
  const TrainingExample* batch[] = {&empty, &real};
  ModelParams g = ModelParams::zeros(c);
  const BatchLoss bl = compute_loss(c, p, batch, &g);
  EXPECT_EQ(bl.skipped, 1u);
  EXPECT_EQ(bl.tokens, 2u);
  EXPECT_TRUE(std::isfinite(bl.loss));
}

TEST(Loss, UntrainedModelIsNearLogVocab) {
  const ModelConfig c;
  const ModelParams p = init_params(c, 2);
  const auto data = gen_dataset(8, 1, 3, 2);
  TrainConfig t;
  const auto ex = build_examples(t, data);
  std::vector<const TrainingExample*> batch;
  for (const auto& e : ex) batch.push_back(&e);
  EXPECT_NEAR(compute_loss(c, p, batch, nullptr).loss, std::log(128.0), 0.05);
}

TEST(Schedule, WarmupBoundary) {
  const std::size_t total = 100;
  EXPECT_EQ(learning_rate_at(0, total, 3e-4, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(5, total, 3e-4, 0.1), 1.5e-4);
  EXPECT_EQ(learning_rate_at(10, total, 3e-4, 0.1), 3e-4);
  EXPECT_EQ(learning_rate_at(99, total, 3e-4, 0.1), 3e-4);
  EXPECT_EQ(learning_rate_at(0, total, 3e-4, 0.0), 3e-4);
}

TEST(Examples, ModeShapes) {
  const auto data = gen_dataset(20, 1, 4, 3);
  TrainConfig t;
  std::size_t segments = 0;
  for (const auto& inst : data) segments += inst.constraints.size() + 2;
  t.mode = TrainMode::sft;
  EXPECT_EQ(build_examples(t, data).size(), 20u);
  t.mode = TrainMode::no_miso;
  const auto flat = build_examples(t, data);
  EXPECT_EQ(flat.size(), segments);
  for (const auto& e : flat) EXPECT_TRUE(std::holds_alternative<PlainExample>(e));
  t.mode = TrainMode::miso_fid_para;
  const auto fid = build_examples(t, data);
  EXPECT_EQ(std::get<MisoExample>(fid[0]).weighting.kind, WeightingKind::fid);
  t.mode = TrainMode::miso_succ;
  for (const auto& e : build_examples(t, data)) {
    const auto& m = std::get<MisoExample>(e).instance;
    EXPECT_GE(m.inputs.size(), 1u);
    EXPECT_LE(m.inputs.size(), 4u);
    EXPECT_EQ(m.mode, PositionMode::succ);
  }
}

TEST(Examples, SuccChunkCountsFollowSampler) {
  const auto data = gen_dataset(2000, 1, 4, 4);
  TrainConfig t;
  t.mode = TrainMode::miso_succ;
  std::array<double, 4> counts{};
  for (const auto& e : build_examples(t, data))
    counts[std::get<MisoExample>(e).instance.inputs.size() - 1] += 1.0;
  EXPECT_NEAR(counts[0] / 2000.0, 0.55, 0.04);
}

TEST(Training, DeterministicCurves) {
  const auto data = gen_dataset(24, 1, 3, 5);
  TrainConfig t;
  t.mode = TrainMode::miso_succ;
  t.batch_size = 8;
  t.epochs = 1;
  t.seed = 11;
  const ModelConfig c = small_config();
  const TrainResult a = train(t, c, data);
  const TrainResult b = train(t, c, data);
  ASSERT_EQ(a.curve.size(), 3u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
  EXPECT_TRUE(a.params == b.params);
}

TEST(Training, SuccWithOneChunkMatchesSft) {
  const auto data = gen_dataset(32, 1, 4, 6);
  const ModelConfig c = small_config();
  TrainConfig t;
  t.batch_size = 8;
  t.epochs = 2;
  t.seed = 3;
  t.learning_rate = 1e-3;
  t.mode = TrainMode::sft;
  const TrainResult sft = train(t, c, data);
  t.mode = TrainMode::miso_succ;
  t.chunk_probabilities = ChunkSampler{{1.0, 0.0, 0.0, 0.0}};
  const TrainResult succ = train(t, c, data);
  ASSERT_EQ(sft.curve.size(), succ.curve.size());
  for (std::size_t i = 0; i < sft.curve.size(); ++i)
    EXPECT_NEAR(sft.curve[i].loss, succ.curve[i].loss, 1e-8) << "step " << i;
}

TEST(Training, LossCurveCsv) {
  const auto path = std::filesystem::temp_directory_path() / "miso_loss_test.csv";
  const std::vector<LossPoint> curve{{0, 4.5, 0.0}, {1, 4.25, 1e-4}};
  write_loss_csv(path, TrainMode::miso_para, curve);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,mode,loss,lr");
  EXPECT_EQ(row, "0,miso-para,4.5,0");
  std::filesystem::remove(path);
}

TEST(Training, EmptyDatasetIsArgumentError) {
  EXPECT_THROW(train(TrainConfig{}, small_config(), {}), ArgumentError);
}

TEST(Training, NonFiniteLossAbortsWithBatchDump) {
  const auto data = gen_dataset(4, 1, 2, 7);
  const ModelConfig c = small_config();
  ModelParams p = init_params(c, 1);
  p.lm_head(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig t;
  t.batch_size = 4;
  try {
    train(t, c, data, p);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch example indices"), std::string::npos);
  }
}

// Memorization on the default toy model.
class Memorized : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new std::vector<ConstraintInstance>(gen_dataset(16, 1, 3, 8));
    TrainConfig t;
    t.batch_size = 16;
    t.epochs = 500;
    t.seed = 1;
    t.learning_rate = 3e-3;
    t.mode = TrainMode::sft;
    sft_ = new TrainResult(train(t, ModelConfig{}, *data_));
    t.mode = TrainMode::miso_para;
    t.epochs = 300;
    para_ = new TrainResult(train(t, ModelConfig{}, *data_));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete sft_;
    delete para_;
  }
  static std::vector<ConstraintInstance>* data_;
  static TrainResult* sft_;
  static TrainResult* para_;
};
std::vector<ConstraintInstance>* Memorized::data_ = nullptr;
TrainResult* Memorized::sft_ = nullptr;
TrainResult* Memorized::para_ = nullptr;

TEST_F(Memorized, LossFallsBelowThreshold) {
  ASSERT_EQ(sft_->curve.size(), 500u);
  EXPECT_LT(sft_->curve.back().loss, 0.05);
  EXPECT_LT(para_->curve.back().loss, 0.05);
}

TEST_F(Memorized, EvalOnTrainingSetIsPerfect) {
  const EvalReport r = evaluate(ModelConfig{}, sft_->params, *data_);
  EXPECT_EQ(r.overall.prompt_level, 1.0);
  EXPECT_EQ(r.overall.instruction_level, 1.0);
  EXPECT_EQ(r.overall.count, 16u);
}

TEST_F(Memorized, MisoGenerationReproducesTarget) {
  for (const auto& inst : *data_) {
    MisoInstance m = build_parallel_inputs(inst, true);
    const std::vector<TokenId> target(m.output.tokens.begin() + 1, m.output.tokens.end());
    m.output.tokens.resize(1);
    m.output.positions.resize(1);
    EXPECT_EQ(generate_miso(ModelConfig{}, para_->params, m, WeightingStrategy::uniform(), {16, kEos}), target);
  }
}

TEST(Eval, UntrainedModelInvariants) {
  const ModelConfig c;
  const ModelParams p = init_params(c, 9);
  const auto data = gen_dataset(40, 1, 4, 10);
  const EvalReport r = evaluate(c, p, data);
  EXPECT_EQ(r.overall.count, 40u);
  EXPECT_LE(r.overall.prompt_level, r.overall.instruction_level);
  EXPECT_LE(r.flattened.prompt_level, r.flattened.instruction_level);
  for (const auto& [n, b] : r.by_constraint_count) EXPECT_LE(b.prompt_level, b.instruction_level);
  std::size_t singles = 0;
  for (const auto& inst : data) singles += inst.constraints.size();
  EXPECT_EQ(r.flattened.count, singles);
  // Exact-length constraints are essentially never met by a random model.
  std::vector<ConstraintInstance> lengths;
  for (const auto& inst : data)
    for (const auto& c2 : inst.constraints)
      if (c2.kind == ConstraintKind::exact_length) lengths.push_back({inst.instruction, {c2}, inst.output});
  if (!lengths.empty()) {
    EXPECT_LE(evaluate(c, p, lengths).overall.prompt_level, 0.1);
  }
  const nlohmann::json j = to_json_value(r);
  EXPECT_TRUE(j.contains("flattened_single_constraint"));
  EXPECT_TRUE(j["by_constraint_count"].is_object());
}

}  // namespace
}  // namespace miso
