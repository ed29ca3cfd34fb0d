#include <gtest/gtest.h>

#include <cmath>

#include "dynfuse/optim.hpp"
#include "support/temp_dir.hpp"

using namespace dynfuse;
using testutil::TempDir;

namespace {

Parameter<double> param(const std::string& name, std::vector<double> v) {
  const std::size_t n = v.size();
  return Parameter<double>(name, Tensor<double>({n}, std::move(v)));
}

ModelConfig toy_model() {
  ModelConfig c;
  c.variant = Variant::PostFusionA;
  c.backbone = BackboneKind::PlainSmall;
  c.use_cbam = false;
  c.input_dims = {4, 8, 8};
  return c;
}

// Depth ramps of opposite direction per class over a fixed in-plane pattern,
// plus a little noise: separable by a linear function of the input.
Dataset<double> toy_dataset(std::size_t per_class, std::uint64_t seed) {
  const std::size_t D = 4, H = 8, W = 8;
  Rng rng(seed);
  Dataset<double> ds;
  std::vector<double> flat;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int y = static_cast<int>(i % 2);
    const double dir = y ? 1.0 : -1.0;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double pattern = (h >= 2 && h < 6 && w >= 2 && w < 6) ? 1.0 : 0.2;
          const double ramp = (static_cast<double>(z) / (D - 1) - 0.5) * dir;
          flat.push_back(ramp * pattern + 0.05 * rng.normal());
        }
    ds.labels.push_back(y);
    ds.subject_ids.push_back(subject_name(i));
  }
  ds.x = Tensor<double>({2 * per_class, 1, D, H, W}, std::move(flat));
  return ds;
}

TrainConfig toy_train(std::size_t epochs) {
  TrainConfig t;
  t.model = toy_model();
  t.epochs = epochs;
  t.batch_size = 8;
  t.lr = 1e-3;
  t.seed = 3;
  t.threads = 1;
  return t;
}

}  // namespace

TEST(Adam, DefaultsFollowStandardHyperparameters) {
  const AdamState<double> st;
  EXPECT_EQ(st.lr, 1e-4);
  EXPECT_EQ(st.beta1, 0.9);
  EXPECT_EQ(st.beta2, 0.999);
  EXPECT_EQ(st.eps, 1e-8);
  EXPECT_EQ(st.t, 0u);
  const TrainConfig tc;
  EXPECT_EQ(tc.epochs, 150u);
  EXPECT_EQ(tc.batch_size, 16u);
  EXPECT_EQ(tc.lr, 1e-4);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  std::vector<Parameter<double>> ps{param("w", {0.0, 0.0, 0.0})};
  ps[0].grad = Tensor<double>({3}, {2.5, -0.003, 40.0});
  AdamState<double> st(0.01);
  adam_step(std::span<Parameter<double>>(ps), st);
  EXPECT_EQ(st.t, 1u);
  EXPECT_NEAR(ps[0].value[0], -0.01, 1e-9);
  EXPECT_NEAR(ps[0].value[1], 0.01, 1e-6);
  EXPECT_NEAR(ps[0].value[2], -0.01, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Parameter<double>> ps{param("w", {1.0, -2.0})};
  AdamState<double> st(0.1);
  for (int k = 0; k < 5; ++k) adam_step(std::span<Parameter<double>>(ps), st);
  EXPECT_EQ(ps[0].value[0], 1.0);
  EXPECT_EQ(ps[0].value[1], -2.0);
}

TEST(Adam, MatchesHandRecurrence) {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t steps = 1 + rng.next_u64() % 10;
    const double lr = rng.uniform(1e-4, 1e-1);
    double theta = rng.uniform(-1, 1), m = 0.0, v = 0.0;
    std::vector<Parameter<double>> ps{param("w", {theta})};
    AdamState<double> st(lr);
    for (std::size_t t = 1; t <= steps; ++t) {
      const double g = rng.uniform(-3, 3);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, static_cast<double>(t)));
      const double vh = v / (1.0 - std::pow(0.999, static_cast<double>(t)));
      theta -= lr * mh / (std::sqrt(vh) + 1e-8);
      ps[0].grad[0] = g;
      adam_step(std::span<Parameter<double>>(ps), st);
      EXPECT_NEAR(ps[0].value[0], theta, 1e-12);
    }
  }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::vector<Parameter<double>> ps{param("ok", {1.0}), param("head.fc.weight", {1.0, 2.0})};
  ps[1].grad[1] = std::nan("");
  AdamState<double> st;
  try {
    adam_step(std::span<Parameter<double>>(ps), st);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.fc.weight"), std::string::npos);
  }
  EXPECT_EQ(ps[0].value[0], 1.0);
}

TEST(Train, SeparableToyReachesLowLossWithin200Steps) {
  const auto ds = toy_dataset(4, 1);
  auto tc = toy_train(200);  // 8 samples, batch 8: one step per epoch
  const auto res = train<double>(tc, ds);
  ASSERT_EQ(res.curve.size(), 200u);
  std::size_t first_below = 0;
  for (const auto& r : res.curve)
    if (r.train_loss < 0.1) {
      first_below = r.epoch;
      break;
    }
  EXPECT_GT(first_below, 0u);
  EXPECT_LE(first_below, 200u);
}

// 3-epoch moving average never rises by more than 5% after epoch 5.
TEST(Train, ToyLossDeclinesAfterWarmup) {
  const auto ds = toy_dataset(4, 2);
  const auto res = train<double>(toy_train(60), ds);
  std::vector<double> sm;
  for (std::size_t e = 2; e < res.curve.size(); ++e)
    sm.push_back((res.curve[e].train_loss + res.curve[e - 1].train_loss +
                  res.curve[e - 2].train_loss) / 3.0);
  for (std::size_t i = 4; i < sm.size(); ++i) EXPECT_LE(sm[i], 1.05 * sm[i - 1]) << "epoch " << i + 3;
}

TEST(Train, DeterministicCurvesAndEpochCount) {
  const auto ds = toy_dataset(4, 3);
  const auto a = train<double>(toy_train(3), ds, &ds);
  const auto b = train<double>(toy_train(3), ds, &ds);
  ASSERT_EQ(a.curve.size(), 3u);
  EXPECT_EQ(curve_csv(a.curve), curve_csv(b.curve));
  const auto csv = curve_csv(a.curve);
  EXPECT_EQ(csv.rfind("epoch,train_loss,eval_loss\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  for (std::size_t i = 0; i < a.final_model.params.size(); ++i)
    EXPECT_EQ(a.final_model.params.items()[i].value.vec(), b.final_model.params.items()[i].value.vec());
}

TEST(Train, BestEpochHasLowestEvalLoss) {
  const auto ds = toy_dataset(4, 4);
  const auto r = train<double>(toy_train(8), ds, &ds);
  ASSERT_GE(r.best_epoch, 1u);
  for (const auto& row : r.curve) {
    if (row.epoch < r.best_epoch) EXPECT_GT(row.eval_loss, r.curve[r.best_epoch - 1].eval_loss);
    else EXPECT_GE(row.eval_loss, r.curve[r.best_epoch - 1].eval_loss);
  }
}

TEST(Train, RejectsEmptyOrSingleClass) {
  auto ds = toy_dataset(2, 5);
  auto one = ds;
  for (auto& l : one.labels) l = 1;
  EXPECT_THROW(train<double>(toy_train(1), one), ValueError);
  Dataset<double> empty;
  EXPECT_THROW(train<double>(toy_train(1), empty), ValueError);
}

TEST(Checkpoint, RoundTripIsBitExactAndResaveIdentical) {
  TempDir dir("ck");
  const auto m = build_model<double>(toy_model(), 12);
  CheckpointInfo info{7, Json{{"eval_loss", 0.25}}};
  checkpoint_save(dir / "a.json", m, info);
  CheckpointInfo back;
  const auto l = checkpoint_load<double>(dir / "a.json", &back);
  EXPECT_EQ(back.epoch, 7u);
  ASSERT_EQ(l.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(l.params.items()[i].name, m.params.items()[i].name);
    EXPECT_EQ(l.params.items()[i].value.vec(), m.params.items()[i].value.vec());
  }
  checkpoint_save(dir / "b.json", l, back);
  EXPECT_EQ(testutil::slurp(dir / "a.bin"), testutil::slurp(dir / "b.bin"));
  auto ja = Json::parse(testutil::slurp(dir / "a.json"));
  auto jb = Json::parse(testutil::slurp(dir / "b.json"));
  ja.erase("blob");
  jb.erase("blob");
  EXPECT_EQ(ja.dump(), jb.dump());
}

TEST(Checkpoint, CorruptionsGiveDistinctErrors) {
  TempDir dir("ck");
  const auto m = build_model<double>(toy_model(), 12);
  checkpoint_save(dir / "a.json", m);
  const auto blob = testutil::slurp(dir / "a.bin");
  const auto man = testutil::slurp(dir / "a.json");

  auto flipped = blob;
  flipped[flipped.size() / 2] ^= 0x01;
  detail::write_bytes(dir / "a.bin", flipped);
  EXPECT_THROW(checkpoint_load<double>(dir / "a.json"), CheckpointHashError);

  detail::write_bytes(dir / "a.bin", blob.substr(0, blob.size() - 8));
  EXPECT_THROW(checkpoint_load<double>(dir / "a.json"), CheckpointTruncatedError);

  detail::write_bytes(dir / "a.bin", blob);
  auto j = Json::parse(man);
  auto& shape = j["params"][0]["shape"];
  shape[0] = shape[0].get<std::size_t>() + 1;
  detail::write_bytes(dir / "a.json", j.dump());
  EXPECT_THROW(checkpoint_load<double>(dir / "a.json"), CheckpointShapeError);
}

TEST(Checkpoint, LoadsAcrossWidths) {
  TempDir dir("ck");
  const auto m = build_model<float>(toy_model(), 4);
  checkpoint_save(dir / "f.json", m);
  const auto d = checkpoint_load<double>(dir / "f.json");
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (std::size_t k = 0; k < m.params.items()[i].value.size(); ++k)
      EXPECT_EQ(d.params.items()[i].value[k], static_cast<double>(m.params.items()[i].value[k]));
}
