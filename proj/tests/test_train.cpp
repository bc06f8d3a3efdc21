#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "checks.hpp"
#include "floodseg/error.hpp"
#include "floodseg/train.hpp"
#include "support.hpp"

using namespace floodseg;
namespace fs = std::filesystem;

namespace {

Model small_unet(std::uint64_t seed = 0) {
  ModelOptions o;
  o.unet_base = 8;
  o.seed = seed;
  return build_unet(o);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// One Adam step on the scalar f(w) = c * w^2 from w = 1; returns the update.
double first_update(float c, float lr) {
  Tensor w({1}, 1.0f), g({1}, 2.0f * c);
  AdamState st;
  st.m.emplace_back(Shape{1});
  st.v.emplace_back(Shape{1});
  Tensor* ps[] = {&w};
  const Tensor* gs[] = {&g};
  adam_step(ps, gs, st, {lr, 0.9f, 0.999f, 1e-8f});
  return 1.0 - w[0];
}

}  // namespace

TEST(Adam, FirstStepIsLearningRate) {
  for (float g : {0.5f, -3.0f, 100.0f}) {
    Tensor w({4}, 0.0f), grad({4}, g);
    const Tensor* cp[] = {&w};
    AdamState st = make_adam_state(cp);
    Tensor* ps[] = {&w};
    const Tensor* gs[] = {&grad};
    adam_step(ps, gs, st, {0.1f, 0.9f, 0.999f, 1e-8f});
    EXPECT_EQ(st.step, 1u);
    for (float v : w.data()) EXPECT_NEAR(v, g > 0 ? -0.1f : 0.1f, 1e-5);
  }
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor w({3}, std::vector<float>{1, -2, 3}), g({3});
  const Tensor w0 = w;
  const Tensor* cp[] = {&w};
  AdamState st = make_adam_state(cp);
  Tensor* ps[] = {&w};
  const Tensor* gs[] = {&g};
  for (int i = 0; i < 50; ++i) adam_step(ps, gs, st, {});
  EXPECT_EQ(w, w0);
}

TEST(Adam, QuadraticDescends) {
  Tensor w({1}, 1.0f), g({1});
  const Tensor* cp[] = {&w};
  AdamState st = make_adam_state(cp);
  Tensor* ps[] = {&w};
  const Tensor* gs[] = {&g};
  // Closed-form recursion in double alongside the implementation.
  double wr = 1.0, m = 0.0, v = 0.0;
  float prev = 1.0f;
  for (int t = 1; t <= 10; ++t) {
    g[0] = 2.0f * w[0];
    adam_step(ps, gs, st, {0.1f, 0.9f, 0.999f, 1e-8f});
    const double gr = 2.0 * wr;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    wr -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_LT(std::abs(w[0]), std::abs(prev)) << "step " << t;
    EXPECT_NEAR(w[0], wr, 1e-5);
    prev = w[0];
  }
}

TEST(Adam, LossScaleInvariance) {
  const double base = first_update(1.0f, 0.01f);
  for (float c : {0.01f, 3.0f, 1000.0f}) {
    EXPECT_LT(std::abs(first_update(c, 0.01f) - base) / base, 0.01) << c;
  }
}

TEST(Adam, ShapeMismatchThrows) {
  Tensor w({2}), g({3});
  const Tensor* cp[] = {&w};
  AdamState st = make_adam_state(cp);
  Tensor* ps[] = {&w};
  const Tensor* gs[] = {&g};
  EXPECT_THROW(adam_step(ps, gs, st, {}), ShapeError);
}

TEST(EarlyStopping, Trace) {
  EarlyStopping es(2);
  const double losses[] = {0.5, 0.4, 0.45, 0.46, 0.47};
  int ran = 0;
  for (int e = 1; e <= 5 && !es.should_stop(); ++e) {
    es.observe(e, losses[e - 1]);
    ran = e;
  }
  EXPECT_EQ(ran, 4);
  EXPECT_EQ(es.best_epoch(), 2);
  EXPECT_DOUBLE_EQ(es.best_loss(), 0.4);
  EarlyStopping tiny(1);
  EXPECT_TRUE(tiny.observe(1, 1.0));
  EXPECT_FALSE(tiny.observe(2, 1.0 - 5e-7));
  EXPECT_TRUE(tiny.should_stop());
}

TEST(Train, EarlyStoppingRestoresBestWeights) {
  const auto r = checks::early_stopping_trace();
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Train, PatienceCoveringAllEpochsRunsToEnd) {
  const auto data = generate_synthetic(4, {16, 16}, 2);
  Model m = small_unet();
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.patience = 4;
  TrainHooks hooks;
  hooks.val_loss_override = [](int e, double) { return 1.0 - 0.1 * e; };
  const TrainResult r = train(m, data, data, cfg, nullptr, hooks);
  EXPECT_EQ(r.history.epochs.size(), 4u);
  EXPECT_FALSE(r.history.stopped_early);
  EXPECT_EQ(r.history.best_epoch, 4);
  EXPECT_LE(static_cast<int>(r.history.epochs.size()), r.history.best_epoch + cfg.patience);
}

TEST(Train, HistoryMatchesEvaluate) {
  const auto all = generate_synthetic(6, {32, 32}, 8);
  const std::vector<Sample> tr(all.begin(), all.begin() + 4), va(all.begin() + 4, all.end());
  Model m = small_unet(1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.patience = 3;
  const TrainResult r = train(m, tr, va, cfg);
  const EpochRecord& best = r.history.epochs[static_cast<std::size_t>(r.history.best_epoch - 1)];
  const MetricsReport e = evaluate(m, va, LossKind::kBce);
  EXPECT_NEAR(best.val_accuracy, e.accuracy, 1e-9);
  EXPECT_NEAR(best.val_loss, e.loss, 1e-9);
  const MetricsReport again = evaluate(m, va, LossKind::kBce);
  EXPECT_EQ(again.accuracy, e.accuracy);
  EXPECT_EQ(again.loss, e.loss);
}

TEST(Train, LossDecreasesOnSyntheticSet) {
  const auto data = generate_synthetic(8, {64, 64}, 6);
  for (Architecture arch : {Architecture::kUNet, Architecture::kResNet50, Architecture::kDeepLabV3}) {
    ModelOptions o;
    o.unet_base = 8;
    Model m = build_model(arch, o);
    TrainConfig cfg;
    cfg.architecture = arch;
    cfg.epochs = 10;
    cfg.patience = 10;
    cfg.augment = false;
    const TrainResult r = train(m, data, data, cfg);
    ASSERT_EQ(r.history.epochs.size(), 10u);
    std::vector<double> first, last;
    for (int i = 0; i < 5; ++i) first.push_back(r.history.epochs[static_cast<std::size_t>(i)].train_loss);
    for (int i = 5; i < 10; ++i) last.push_back(r.history.epochs[static_cast<std::size_t>(i)].train_loss);
    EXPECT_LT(median(last), median(first)) << architecture_name(arch);
  }
}

TEST(Train, RejectsBadConfigAndEmptySets) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.adam.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Model m = small_unet();
  const auto data = generate_synthetic(2, {16, 16}, 1);
  EXPECT_THROW(train(m, data, {}, TrainConfig{}), ConfigError);
  EXPECT_THROW(evaluate(m, std::span<const Sample>{}, LossKind::kBce), ConfigError);
}

TEST(Train, NonFiniteLossReportsEpochAndBatch) {
  const auto data = generate_synthetic(4, {16, 16}, 1);
  Model m = small_unet();
  m.parameters()[0].item->value[0] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(m, data, data, cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1 batch 1"), std::string::npos) << e.what();
    EXPECT_EQ(e.layer(), "enc1.1.conv");
  }
}

TEST(Evaluate, Stubs) {
  const auto data = support::mask_in_red(generate_synthetic(5, {32, 32}, 4));
  const MetricsReport perfect = evaluate(support::passthrough_unet(), data, LossKind::kBce);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  EXPECT_EQ(perfect.iou, 1.0);

  double water = 0, total = 0;
  for (const auto& s : data) {
    for (float v : s.mask.data()) water += v;
    total += static_cast<double>(s.mask.size());
  }
  const double q = water / total;
  const LogitFn zero = [](const Tensor& x) { return Tensor({x.dim(0), 1, x.dim(2), x.dim(3)}); };
  const MetricsReport c = evaluate(zero, data, LossKind::kBce);
  EXPECT_NEAR(c.accuracy, q, 1e-12);
  EXPECT_NEAR(c.precision, q, 1e-12);
  EXPECT_EQ(c.recall, 1.0);
  EXPECT_NEAR(c.loss, std::log(2.0), 1e-9);
}

TEST(History, CsvRoundTripAndErrors) {
  TrainHistory h;
  h.epochs = {{1, 0.5, 0.75, 0.6, 0.7}, {2, 0.25, 0.875, 0.4, 0.8}};
  h.best_epoch = 2;
  const fs::path dir = support::scratch("history");
  write_history(dir / "history.csv", h);
  EXPECT_EQ(history_csv(h),
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.500000,0.750000,0.600000,0.700000\n"
            "2,0.250000,0.875000,0.400000,0.800000\n");
  const TrainHistory back = read_history(dir / "history.csv");
  ASSERT_EQ(back.epochs.size(), 2u);
  EXPECT_EQ(back.epochs[1].val_accuracy, 0.8);
  std::ofstream(dir / "bad.csv") << "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.5,x,0.6,0.7\n";
  try {
    read_history(dir / "bad.csv");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RoundTrip) {
  for (Architecture arch : {Architecture::kUNet, Architecture::kDeepLabV3}) {
    const auto r = checks::checkpoint_roundtrip(arch, 32, 8, 10);
    EXPECT_TRUE(r.pass) << r.detail;
  }
}

TEST(Checkpoint, TruncationAndCorruption) {
  Model m = small_unet();
  const AdamState adam = make_adam_state(m);
  const auto bytes = encode_checkpoint(m, adam, {Architecture::kUNet, 1, 2, 0.5f});
  const Checkpoint ok = decode_checkpoint(bytes);
  EXPECT_EQ(ok.info.epoch, 2u);
  EXPECT_EQ(ok.info.seed, 1u);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::span(bytes).first(cut)), CorruptCheckpoint) << cut;
  }
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const CorruptCheckpoint& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), CorruptCheckpoint);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), CorruptCheckpoint);

  const fs::path dir = support::scratch("ckpt");
  std::ofstream(dir / "short.fseg", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 100);
  EXPECT_THROW(load_checkpoint(dir / "short.fseg"), CorruptCheckpoint);
}

TEST(Checkpoint, ResumeEqualsUninterrupted) {
  const auto r = checks::resume_equivalence(support::scratch("resume"));
  EXPECT_TRUE(r.pass) << r.detail;
}
