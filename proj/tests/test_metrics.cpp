#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ufid/data.hpp"
#include "ufid/errors.hpp"
#include "ufid/metrics.hpp"
#include "ufid/model.hpp"
#include "ufid/rng.hpp"

using namespace ufid;

namespace {

ConfusionMatrix matrix(std::size_t k, std::vector<std::size_t> counts) {
  ConfusionMatrix cm(k);
  cm.counts = std::move(counts);
  return cm;
}

ConfusionMatrix random_matrix(SplitMix64& rng, std::size_t k) {
  ConfusionMatrix cm(k);
  for (auto& v : cm.counts) v = rng.below(20);
  cm.counts[0] += 1;
  return cm;
}

}  // namespace

TEST_CASE("confusion examples") {
  const std::vector<int> labels{0, 2, 1, 1, 2};
  CHECK(confusion(labels, labels, 3) == matrix(3, {1, 0, 0, 0, 2, 0, 0, 0, 2}));
  CHECK(confusion(std::vector<int>{1, 0}, std::vector<int>{0, 0}, 2) == matrix(2, {1, 1, 0, 0}));
  CHECK(confusion(std::vector<int>{}, std::vector<int>{}, 2) == matrix(2, {0, 0, 0, 0}));
  CHECK_THROWS_AS(confusion(std::vector<int>{2}, std::vector<int>{0}, 2), DataError);
  CHECK_THROWS_AS(confusion(std::vector<int>{0}, std::vector<int>{-1}, 2), DataError);
  CHECK_THROWS_AS(confusion(std::vector<int>{0, 1}, std::vector<int>{0}, 2), DimensionError);
}

TEST_CASE("confusion conserves the sample count") {
  SplitMix64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t k = 2 + rng.below(8);
    std::vector<int> p(rng.below(300)), t(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<int>(rng.below(k));
      t[i] = static_cast<int>(rng.below(k));
    }
    CHECK(confusion(p, t, k).total() == p.size());
  }
}

TEST_CASE("scores on a perfect matrix") {
  const auto r = scores(matrix(2, {50, 0, 0, 50}));
  CHECK(r.accuracy == 1.0);
  CHECK(r.error_rate == 0.0);
  CHECK(r.macro_f1 == 1.0);
  CHECK_FALSE(r.undefined_ratio);
}

TEST_CASE("scores on a hand-counted two-class matrix") {
  const auto r = scores(matrix(2, {45, 5, 10, 40}));
  const double p0 = 45.0 / 55.0, p1 = 40.0 / 45.0;
  const double r0 = 0.9, r1 = 0.8;
  const double f0 = 2 * p0 * r0 / (p0 + r0), f1 = 2 * p1 * r1 / (p1 + r1);
  CHECK(r.accuracy == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(r.error_rate == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(r.per_class_precision[0] == doctest::Approx(p0).epsilon(1e-15));
  CHECK(r.per_class_precision[1] == doctest::Approx(p1).epsilon(1e-15));
  CHECK(r.per_class_recall[0] == doctest::Approx(r0).epsilon(1e-15));
  CHECK(r.per_class_recall[1] == doctest::Approx(r1).epsilon(1e-15));
  CHECK(r.macro_precision == doctest::Approx((p0 + p1) / 2).epsilon(1e-15));
  CHECK(r.macro_recall == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(r.macro_f1 == doctest::Approx((f0 + f1) / 2).epsilon(1e-15));
}

TEST_CASE("scores on a hand-counted three-class matrix") {
  // rows true, columns predicted
  const auto r = scores(matrix(3, {8, 1, 1, 2, 6, 2, 0, 0, 5}));
  CHECK(r.accuracy == doctest::Approx(19.0 / 25.0));
  CHECK(r.per_class_precision[0] == doctest::Approx(0.8));
  CHECK(r.per_class_precision[1] == doctest::Approx(6.0 / 7.0));
  CHECK(r.per_class_precision[2] == doctest::Approx(5.0 / 8.0));
  CHECK(r.per_class_recall[1] == doctest::Approx(0.6));
  CHECK(r.per_class_recall[2] == doctest::Approx(1.0));
  CHECK(r.per_class_f1[2] == doctest::Approx(2 * 0.625 / 1.625));
}

TEST_CASE("absent classes report 0 ratios and set the flag") {
  const auto r = scores(matrix(3, {5, 0, 0, 0, 5, 0, 0, 0, 0}));
  CHECK(r.accuracy == 1.0);
  CHECK(r.per_class_precision[2] == 0.0);
  CHECK(r.per_class_recall[2] == 0.0);
  CHECK(r.per_class_f1[2] == 0.0);
  CHECK(r.undefined_ratio);
  CHECK(r.macro_recall == doctest::Approx(2.0 / 3.0));
  CHECK(std::isfinite(r.macro_f1));
}

TEST_CASE("scores on an empty matrix is a usage error") {
  CHECK_THROWS_AS(scores(ConfusionMatrix(3)), UsageError);
}

TEST_CASE("score properties") {
  SplitMix64 rng(12);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t k = 2 + rng.below(6);
    const auto cm = random_matrix(rng, k);
    const auto r = scores(cm);
    CHECK(r.error_rate == 1.0 - r.accuracy);
    for (const double v : {r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const auto [lo, hi] = std::minmax_element(r.per_class_f1.begin(), r.per_class_f1.end());
    CHECK(r.macro_f1 <= *hi + 1e-15);
    CHECK(r.macro_f1 >= *lo - 1e-15);

    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    ConfusionMatrix relabeled(k);
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t p = 0; p < k; ++p) relabeled.at(perm[t], perm[p]) = cm.at(t, p);
    }
    const auto s = scores(relabeled);
    CHECK(s.accuracy == r.accuracy);
    CHECK(s.macro_precision == doctest::Approx(r.macro_precision).epsilon(1e-14));
    CHECK(s.macro_recall == doctest::Approx(r.macro_recall).epsilon(1e-14));
    CHECK(s.macro_f1 == doctest::Approx(r.macro_f1).epsilon(1e-14));
  }
}

TEST_CASE("confusion CSV layout") {
  const auto csv = matrix(2, {3, 1, 0, 4}).to_csv({"benign", "dos"});
  CHECK(csv == "true\\predicted,benign,dos\nbenign,3,1\ndos,0,4\n");
}

TEST_CASE("flop counts") {
  CHECK(dense_flops(2, 3) == 12);

  EncoderClassifierConfig cfg;
  cfg.input_dim = 54;
  cfg.num_classes = 2;
  const EncoderClassifier model(cfg);
  // input 2*54*128, conv 2*3*16*128, bn 2*16*128, lstm 8*128*128*129 + 8*128*128,
  // fusion 2*144*64, fc1 2*64*32, out 2*32*2
  const std::size_t expected =
      13824 + 12288 + 4096 + 16908288 + 131072 + 18432 + 4096 + 128;
  CHECK(flops_estimate(model) == expected);

  std::size_t encoder = 0;
  for (const auto& p : table1_registry()) {
    EncoderClassifierConfig c;
    c.input_dim = p.feature_dim;
    c.num_classes = p.num_classes;
    const EncoderClassifier m(c);
    if (encoder == 0) encoder = encoder_flops(m);
    CHECK(encoder_flops(m) == encoder);
    CHECK(flops_estimate(m) == encoder + 2 * p.feature_dim * 128 + 2 * 64 * 32 +
                                   2 * 32 * p.num_classes);
  }
  MESSAGE("full-model flops " << expected << " vs 236736 published");
}

TEST_CASE("model bytes follow the parameter count") {
  EncoderClassifierConfig cfg;
  cfg.input_dim = 18;
  cfg.num_classes = 5;
  const EncoderClassifier model(cfg);
  const auto n = parameter_counts(model).total;
  CHECK(model_bytes(model) == 4 * n);
  CHECK(model_bytes(model, 8) == 8 * n);
}

TEST_CASE("evaluate_confusion matches per-sample predictions") {
  EncoderClassifierConfig cfg;
  cfg.input_dim = 5;
  cfg.num_classes = 3;
  cfg.hidden_dim = 8;
  cfg.lstm_hidden = 4;
  cfg.cnn_channels = 2;
  cfg.encoder_out = 4;
  cfg.classifier_hidden = 3;
  cfg.seed = 2;
  EncoderClassifier model(cfg);
  const auto ds = gen_synthetic(37, 5, 3, 4.0, 3);
  const auto cm = evaluate_confusion(model, ds, 10);
  CHECK(cm.total() == 37);
  CHECK(cm == confusion(predict(model, ds.features), ds.labels, 3));
}

TEST_CASE("profile_inference reports consistent timings") {
  EncoderClassifierConfig cfg;
  cfg.input_dim = 18;
  cfg.num_classes = 5;
  EncoderClassifier model(cfg);
  const auto ds = gen_synthetic(64, 18, 5, 4.0, 1);
  const auto r = profile_inference(model, ds, 1, 5, 32);
  CHECK(r.latency_ms_per_sample > 0.0);
  CHECK(std::isfinite(r.latency_ms_per_sample));
  CHECK(r.throughput_samples_per_s > 0.0);
  const double implied = 1000.0 / r.latency_ms_per_sample;
  CHECK(std::abs(r.throughput_samples_per_s - implied) / implied < 0.2);
  CHECK(r.trainable_params == parameter_counts(model).total);
  CHECK(r.model_bytes == 4 * r.trainable_params);
  CHECK(r.flops_per_forward == flops_estimate(model));
  CHECK_THROWS_AS(profile_inference(model, ds, 0, 0), ConfigError);
  MESSAGE("latency " << r.latency_ms_per_sample << " ms/sample vs 2.12 published");
}
