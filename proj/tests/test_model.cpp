#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ufid/errors.hpp"
#include "ufid/model.hpp"
#include "ufid/optim.hpp"

using namespace ufid;
using ufid::testing::random_tensor;

namespace {

EncoderClassifierConfig config_for(std::size_t f, std::size_t c, std::uint64_t seed = 7) {
  EncoderClassifierConfig cfg;
  cfg.input_dim = f;
  cfg.num_classes = c;
  cfg.seed = seed;
  return cfg;
}

// conv(16*3 + 16) + batchnorm(2*16) + lstm(4*(128*129 + 128)) + fusion(144*64 + 64)
constexpr std::size_t kSharedClosedForm = (16 * 3 + 16) + 2 * 16 + 4 * (128 * 129 + 128) + (144 * 64 + 64);

void zero_all(EncoderClassifier& m) {
  for (auto* p : m.parameters()) p->value.fill(0.0);
}

std::vector<std::pair<std::string, Shape>> signature(const ParameterList& list) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& t : list) out.emplace_back(t.name, t.value.shape());
  return out;
}

}  // namespace

TEST_CASE("the four reference swarm shapes build") {
  for (const auto& [f, c] : std::vector<std::pair<std::size_t, std::size_t>>{{54, 2}, {46, 9}, {18, 5}, {36, 3}}) {
    auto m = build_model(config_for(f, c));
    SplitMix64 rng(f);
    const auto logits = m.logits(random_tensor(rng, {32, f}, 0.0, 1.0));
    CHECK(logits.shape() == Shape{32, c});
  }
}

TEST_CASE("invalid configs are rejected") {
  CHECK_THROWS_AS(build_model(config_for(0, 2)), ConfigError);
  CHECK_THROWS_AS(build_model(config_for(4, 1)), ConfigError);
  auto cfg = config_for(4, 2);
  cfg.theta = 0.0;
  CHECK_THROWS_AS(build_model(cfg), ConfigError);
  cfg = config_for(4, 2);
  cfg.classifier_hidden = 0;
  CHECK_THROWS_AS(build_model(cfg), ConfigError);
}

TEST_CASE("forward rejects the wrong width and names the expected one") {
  auto m = build_model(config_for(54, 2));
  try {
    m.logits(Tensor({2, 18}));
    FAIL("expected a DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("54") != std::string::npos);
  }
}

TEST_CASE("parameter names, partition and closed-form shared count") {
  auto m = build_model(config_for(54, 2));
  const auto& part = m.partition();
  std::size_t covered = 0;
  for (const auto* p : m.parameters()) {
    const bool shared = part.shared_names.count(p->name) == 1;
    const bool local = part.local_names.count(p->name) == 1;
    CHECK(shared != local);
    CHECK(shared == (p->name.rfind("encoder.", 0) == 0));
    CHECK(p->grad.shape() == p->value.shape());
    ++covered;
  }
  CHECK(covered == part.shared_names.size() + part.local_names.size());
  for (const char* name : {"input_layer.weight", "encoder.conv.weight", "encoder.bn.gamma", "encoder.lstm.W_f",
                           "encoder.lstm.b_c", "encoder.fusion.weight", "classifier.fc1.weight",
                           "classifier.out.bias"}) {
    CHECK_NOTHROW(m.parameter(name));
  }
  CHECK(m.parameter("encoder.lstm.W_i").value.shape() == Shape{128, 129});
  CHECK(m.parameter("encoder.conv.weight").value.shape() == Shape{16, 1, 3});

  const auto counts = parameter_counts(m);
  CHECK(counts.shared == kSharedClosedForm);
  CHECK(counts.shared == 75936);
  // input 54*128 + 128, classifier 64*32 + 32 + 32*2 + 2
  CHECK(counts.local == 54 * 128 + 128 + 64 * 32 + 32 + 32 * 2 + 2);
  CHECK(counts.total == counts.shared + counts.local);
}

TEST_CASE("shared parameters are identical in name and shape across swarms") {
  const auto a = build_model(config_for(54, 2)).shared_parameters();
  for (const auto& [f, c] : std::vector<std::pair<std::size_t, std::size_t>>{{46, 9}, {18, 5}, {36, 3}}) {
    const auto m = build_model(config_for(f, c));
    CHECK(signature(m.shared_parameters()) == signature(a));
    CHECK(parameter_counts(m).shared == kSharedClosedForm);
  }
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].name < a[i].name);
  for (const auto& t : a) CHECK(t.name.rfind("encoder.", 0) == 0);
}

TEST_CASE("initialization follows the documented scheme") {
  const auto m = build_model(config_for(54, 2));
  const auto& w = m.parameter("input_layer.weight").value;
  const double bound = std::sqrt(1.0 / 54.0);
  for (const double v : w.data()) CHECK(std::abs(v) <= bound);
  for (const double v : m.parameter("encoder.lstm.b_f").value.data()) CHECK(v == 1.0);
  for (const double v : m.parameter("encoder.lstm.b_i").value.data()) CHECK(v == 0.0);
  for (const double v : m.parameter("encoder.bn.gamma").value.data()) CHECK(v == 1.0);
  const double lstm_bound = std::sqrt(1.0 / 129.0);
  for (const double v : m.parameter("encoder.lstm.W_c").value.data()) CHECK(std::abs(v) <= lstm_bound);
  // Each tensor draws from its own stream, so the encoder does not depend on swarm dims.
  const auto other = build_model(config_for(18, 5));
  CHECK(other.parameter("encoder.lstm.W_c").value == m.parameter("encoder.lstm.W_c").value);
  const auto reseeded = build_model(config_for(54, 2, 8));
  CHECK_FALSE(reseeded.parameter("encoder.lstm.W_c").value == m.parameter("encoder.lstm.W_c").value);
}

TEST_CASE("shared_parameters returns a detached copy") {
  auto m = build_model(config_for(18, 5));
  auto copy = m.shared_parameters();
  copy.front().value.fill(42.0);
  CHECK_FALSE(m.parameter(copy.front().name).value == copy.front().value);
  m.load_shared(copy);
  CHECK(m.parameter(copy.front().name).value == copy.front().value);
}

TEST_CASE("load_shared round-trip leaves outputs bitwise unchanged") {
  auto m = build_model(config_for(36, 3));
  SplitMix64 rng(2);
  const auto x = random_tensor(rng, {8, 36}, 0.0, 1.0);
  const auto before = m.logits(x);
  const auto locals = m.parameter("classifier.out.weight").value;
  m.load_shared(m.shared_parameters());
  CHECK(m.logits(x) == before);
  CHECK(m.parameter("classifier.out.weight").value == locals);
}

TEST_CASE("load_shared lists every offending name") {
  auto m = build_model(config_for(36, 3));
  auto bad = m.shared_parameters();
  bad[0].name = "encoder.bogus";
  bad[3].value = Tensor({1});
  try {
    m.load_shared(bad);
    FAIL("expected a PartitionError");
  } catch (const PartitionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("encoder.bogus") != std::string::npos);
    CHECK(msg.find(m.shared_parameters()[3].name) != std::string::npos);
  }
  auto local = m.all_parameters();
  CHECK_THROWS_AS(m.load_shared(local), PartitionError);
}

TEST_CASE("a zero-parameter model is uniform and predicts class 0") {
  for (std::size_t c : {2, 5, 9}) {
    auto m = build_model(config_for(10, c));
    zero_all(m);
    SplitMix64 rng(c);
    const auto x = random_tensor(rng, {6, 10});
    const auto p = nn::softmax(m.logits(x));
    for (const double v : p.data()) CHECK(std::abs(v - 1.0 / static_cast<double>(c)) <= 1e-12);
    for (const int k : predict(m, x)) CHECK(k == 0);
  }
}

TEST_CASE("argmax breaks ties toward the smaller index") {
  CHECK(argmax_rows(Tensor::matrix({{0.1, 2.0}})) == std::vector<int>{1});
  CHECK(argmax_rows(Tensor::matrix({{1.0, 1.0}})) == std::vector<int>{0});
  CHECK(argmax_rows(Tensor::matrix({{3.0, 1.0, 3.0}, {0.0, 5.0, 5.0}})) == std::vector<int>{0, 1});
}

TEST_CASE("forward is deterministic for a fixed seed") {
  const auto x = Tensor({1, 18}, std::vector<double>(18, 0.25));
  auto a = build_model(config_for(18, 5, 99));
  auto b = build_model(config_for(18, 5, 99));
  CHECK(a.logits(x) == b.logits(x));
  CHECK(a.logits(x) == a.logits(x));
}

TEST_CASE("train mode updates batchnorm running statistics, eval does not") {
  auto m = build_model(config_for(12, 3));
  SplitMix64 rng(5);
  const auto x = random_tensor(rng, {16, 12}, 0.0, 1.0);
  const auto before = m.batchnorm_stats().running_mean;
  m.logits(x, nn::Mode::kEval);
  CHECK(m.batchnorm_stats().running_mean == before);
  Tape tape;
  m.forward(tape, x, nn::Mode::kTrain);
  CHECK_FALSE(m.batchnorm_stats().running_mean == before);
}

TEST_CASE("one SGD step lowers the loss on a separable mini-batch") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto m = build_model(config_for(8, 2, seed));
    Tensor x({16, 8});
    std::vector<int> y(16);
    for (std::size_t r = 0; r < 16; ++r) {
      y[r] = static_cast<int>(r % 2);
      for (std::size_t j = 0; j < 8; ++j) x.at(r, j) = y[r] == 1 ? 0.9 : 0.1;
    }
    auto loss_of = [&](bool step) {
      Tape tape;
      const auto loss = nn::cross_entropy(nn::softmax(m.forward(tape, x, nn::Mode::kTrain)), y);
      if (step) {
        tape.backward(loss);
        nn::sgd_step(m.parameters(), 0.01);
      }
      return loss.value()[0];
    };
    const double before = loss_of(true);
    const double after = loss_of(false);
    CHECK(after < before);
  }
}

TEST_CASE("model gradients match central differences on a small instance") {
  EncoderClassifierConfig cfg = config_for(3, 3, 4);
  cfg.hidden_dim = 6;
  cfg.cnn_channels = 2;
  cfg.lstm_hidden = 3;
  cfg.encoder_out = 4;
  cfg.classifier_hidden = 3;
  auto m = build_model(cfg);
  SplitMix64 rng(6);
  const auto x = random_tensor(rng, {4, 3}, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 1};
  auto loss_value = [&]() {
    Tape tape(false);
    auto stats = m.batchnorm_stats();
    const auto l = nn::cross_entropy(nn::softmax(m.forward(tape, x, nn::Mode::kEval)), y).value()[0];
    m.batchnorm_stats() = stats;
    return l;
  };
  m.zero_grad();
  {
    Tape tape;
    tape.backward(nn::cross_entropy(nn::softmax(m.forward(tape, x, nn::Mode::kEval)), y));
  }
  std::size_t checked = 0;
  for (auto* p : m.parameters()) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-5;
      const double up = loss_value();
      p->value[i] = keep - 1e-5;
      const double down = loss_value();
      p->value[i] = keep;
      const double numeric = (up - down) / 2e-5;
      // Skip coordinates whose perturbation crossed a ReTeLU or max-pool kink.
      if (std::abs(numeric - p->grad[i]) / std::max(1.0, std::abs(p->grad[i])) > 1e-4) {
        p->value[i] = keep + 5e-6;
        const double up2 = loss_value();
        p->value[i] = keep - 5e-6;
        const double down2 = loss_value();
        p->value[i] = keep;
        const double half = (up2 - down2) / 1e-5;
        CHECK(std::abs(half - numeric) > 1e-6);
        continue;
      }
      ++checked;
    }
  }
  CHECK(checked > 100);
}
