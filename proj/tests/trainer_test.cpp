#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "otflow/data.hpp"
#include "otflow/errors.hpp"
#include "otflow/trainer.hpp"

using namespace otflow;

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Vector theta(3);
  theta << 1.0, -2.0, 0.5;
  const Vector before = theta;
  AdamState state;
  for (int i = 0; i < 5; ++i) adam_step(theta, Vector::Zero(3), state, {});
  EXPECT_EQ(theta, before);
  EXPECT_EQ(state.t, 5);
}

TEST(Adam, FirstStepByHand) {
  Vector theta(1);
  theta << 2.0;
  Vector g(1);
  g << 0.5;
  AdamState state;
  const AdamSettings s{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};
  adam_step(theta, g, state, s);
  // m_hat = g, v_hat = g^2 after bias correction.
  EXPECT_NEAR(theta(0), 2.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  adam_step(theta, g, state, s);
  EXPECT_NEAR(theta(0), 2.0 - 2.0 * 0.1 * 0.5 / (0.5 + 1e-8), 1e-14);
}

TEST(TrainConfig, ValidationGridMustNotBeCoarser) {
  TrainConfig c;
  c.nt_train = 8;
  c.nt_val = 4;
  EXPECT_THROW(validate(c), ConfigError);
  c.nt_val = 0;
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.validation_nt(), 16);
}

TEST(TrainConfig, EntriesRoundTrip) {
  TrainConfig c;
  c.m = 7;
  c.alpha2 = 0.25;
  c.trace = TraceEstimator::hutchinson;
  c.probe_dist = ProbeDistribution::gaussian;
  c.seed = 1234567890123ULL;
  TrainConfig d;
  for (const auto& [k, v] : config_entries(c)) EXPECT_TRUE(apply_config_entry(d, k, v)) << k;
  EXPECT_EQ(config_entries(c), config_entries(d));
  EXPECT_FALSE(apply_config_entry(d, "no_such_key", "1"));
  EXPECT_THROW(apply_config_entry(d, "m", "seven"), ConfigError);
  EXPECT_THROW(apply_config_entry(d, "trace", "approximate"), ConfigError);
}

TEST(Train, DeterministicUnderSeed) {
  const DatasetSplit data = make_toy_split("eight-gaussians", 600, 3);
  TrainConfig c;
  c.m = 8;
  c.nt_train = 2;
  c.batch_size = 64;
  c.max_iters = 12;
  c.val_every = 4;
  c.trace = TraceEstimator::hutchinson;
  const TrainResult a = train(data, c);
  const TrainResult b = train(data, c);
  EXPECT_EQ(flatten(a.last), flatten(b.last));
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
  c.seed = 1;
  EXPECT_NE(flatten(train(data, c).last), flatten(a.last));
}

TEST(Train, LogsEveryIterationAndValidatesOnSchedule) {
  const DatasetSplit data = make_toy_split("two-moons", 400, 4);
  TrainConfig c;
  c.m = 8;
  c.nt_train = 2;
  c.batch_size = 100;
  c.max_iters = 9;
  c.val_every = 4;
  int callbacks = 0;
  const TrainResult r = train(data, c, [&](const TrainLogRow&) { ++callbacks; });
  ASSERT_EQ(r.log.size(), 9u);
  EXPECT_EQ(callbacks, 9);
  for (const auto& row : r.log) {
    const bool expect_val = row.iter % 4 == 0 || row.iter == 9;
    EXPECT_EQ(!std::isnan(row.val_C), expect_val) << row.iter;
    EXPECT_NEAR(row.total, row.C + row.L + row.R, 1e-12 * std::abs(row.total));
  }
  EXPECT_EQ(r.status, TrainStatus::completed);
  EXPECT_GT(r.best_iter, 0);
}

TEST(Train, MatchedDensitiesStayNearIdentity) {
  DatasetSplit data = split_and_standardize(sample_latent(20000, 2, 5), {}, 5, "latent", false);
  TrainConfig c;
  c.m = 16;
  c.nt_train = 4;
  c.batch_size = 256;
  c.max_iters = 100;
  c.val_every = 20;
  const TrainResult r = train(data, c);
  const double identity_C = validation_C(data.val, zero_params({.d = 2, .m = 16, .M = 1}), 8);
  EXPECT_NEAR(identity_C, 1.0 + std::log(2.0 * std::numbers::pi), 0.1);
  EXPECT_NEAR(r.best_val_C, identity_C, 0.05);
}

TEST(Train, EarlyStopsWithoutImprovement) {
  const DatasetSplit data = make_toy_split("circles", 300, 6);
  TrainConfig c;
  c.m = 4;
  c.nt_train = 1;
  c.lr_decay = 1e-300;  // steps vanish after the first iteration
  c.lr_decay_every = 1;
  c.max_iters = 200;
  c.val_every = 1;
  c.patience = 3;
  const TrainResult r = train(data, c);
  EXPECT_EQ(r.status, TrainStatus::early_stopped);
  EXPECT_LT(r.iterations, 200);
}

TEST(Train, DivergenceKeepsLastGoodParameters) {
  const DatasetSplit data = make_toy_split("eight-gaussians", 200, 7);
  TrainConfig c;
  c.m = 4;
  c.nt_train = 1;
  c.max_iters = 5;
  ModelParams init = zero_params({.d = 2, .m = 4, .M = 1});
  init.A(0, 0) = 1e200;
  const TrainResult r = train(data, c, {}, &init);
  EXPECT_EQ(r.status, TrainStatus::diverged);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_EQ(flatten(r.best), flatten(init));
  EXPECT_NE(r.message.find("iteration 1"), std::string::npos);
}

TEST(Checkpoint, TextRoundTripIsByteIdentical) {
  std::mt19937_64 rng(8);
  Checkpoint ck;
  ck.params = init_params({.d = 3, .m = 5, .M = 2, .h = 0.5}, rng);
  ck.params.c = -0.0;
  ck.params.w(0) = 1.0 / 3.0;
  ck.iteration = 42;
  ck.best_val_C = std::numeric_limits<double>::quiet_NaN();
  ck.mean = Vector::Random(3);
  ck.std = Vector::Random(3).cwiseAbs();
  ck.config = config_entries(TrainConfig{});
  ck.config.emplace_back("csv", "");
  ck.config.emplace_back("out", "my runs/a b");

  const std::string text = ck.to_text();
  const Checkpoint back = Checkpoint::from_text(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(flatten(back.params), flatten(ck.params));
  EXPECT_TRUE(std::signbit(back.params.c));
  EXPECT_EQ(back.params.resnet.h, 0.5);
  EXPECT_EQ(back.mean, ck.mean);
  EXPECT_EQ(back.config, ck.config);

  const auto path = std::filesystem::temp_directory_path() / "otflow_ckpt_test.txt";
  ck.save(path.string());
  const Checkpoint loaded = Checkpoint::load(path.string());
  loaded.save(path.string() + ".2");
  std::ifstream a(path), b(path.string() + ".2");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".2");
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::mt19937_64 rng(9);
  Checkpoint ck;
  ck.params = init_params({.d = 2, .m = 3, .M = 1}, rng);
  ck.mean = Vector::Zero(2);
  ck.std = Vector::Ones(2);
  std::string text = ck.to_text();
  EXPECT_THROW(Checkpoint::from_text(text.substr(0, text.size() / 2)), ParseError);
  std::string wrong_version = text;
  wrong_version.replace(0, std::string("otflow-checkpoint 1").size(), "otflow-checkpoint 9");
  EXPECT_THROW(Checkpoint::from_text(wrong_version), ParseError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/ckpt"), ParseError);
}
