#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "phonemeda/training.hpp"

using namespace phonemeda;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

LossWeights manual_weights(std::vector<double> w, double s) {
  LossWeights lw;
  lw.n_tokens = static_cast<int>(w.size());
  lw.w = std::move(w);
  lw.f.assign(lw.w.size(), 0.0);
  lw.scale_s = s;
  return lw;
}

Matrix one_hot_rows(const std::vector<int>& hot, int cols) {
  Matrix m(static_cast<int>(hot.size()), cols);
  for (size_t r = 0; r < hot.size(); ++r) m.at(static_cast<int>(r), hot[r]) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("loss weights follow the inverse-frequency definition") {
  // counts f = [10, 30] over two tokens
  TokenSequence seq;
  for (int i = 0; i < 10; ++i) seq.tokens.push_back(0);
  for (int i = 0; i < 30; ++i) seq.tokens.push_back(1);
  auto lw = compute_loss_weights({seq}, 2);
  CHECK(lw.f == std::vector<double>{10.0, 30.0});
  CHECK(lw.w[0] == doctest::Approx(0.1));
  CHECK(lw.w[1] == doctest::Approx(1.0 / 30.0));
  CHECK(lw.scale_s == doctest::Approx(20.0));
  // w_i * f_i == 1 for present tokens
  CHECK(lw.w[0] * lw.f[0] == doctest::Approx(1.0));
  CHECK(lw.w[1] * lw.f[1] == doctest::Approx(1.0));
}

TEST_CASE("equally frequent tokens share one weight") {
  TokenSequence seq;
  seq.tokens = {0, 1, 2, 0, 1, 2};
  auto lw = compute_loss_weights({seq}, 3);
  CHECK(lw.w[0] == lw.w[1]);
  CHECK(lw.w[1] == lw.w[2]);
}

TEST_CASE("absent tokens receive the strongest present weight") {
  TokenSequence seq;
  seq.tokens = {0, 0, 0, 1};  // token 2 never occurs
  auto lw = compute_loss_weights({seq}, 3);
  CHECK(lw.w[2] == doctest::Approx(1.0));  // max over {1/3, 1}
}

TEST_CASE("compute_loss_weights rejects an empty training set") {
  try {
    compute_loss_weights({}, 4);
    FAIL("expected EmptyTrainingSet");
  } catch (const Error& e) {
    CHECK(e.code() == Err::EmptyTrainingSet);
  }
}

TEST_CASE("weighted cross entropy: the hand-evaluated case") {
  Matrix logits(1, 2);  // both logits zero
  Matrix target = one_hot_rows({0}, 2);
  const double loss = wcce_loss(logits, target, manual_weights({1.0, 1.0}, 1.0));
  CHECK(loss == doctest::Approx(0.34657).epsilon(1e-4));
  CHECK(std::abs(loss - (-0.5 * std::log(0.5))) < 1e-12);
}

TEST_CASE("uniform weights reduce to scaled categorical cross entropy") {
  Rng rng(3);
  const int rows = 4, cols = 6;
  Matrix logits(rows, cols);
  for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);
  std::vector<int> hot;
  for (int r = 0; r < rows; ++r) hot.push_back(static_cast<int>(rng.below(cols)));
  Matrix target = one_hot_rows(hot, cols);

  const double c = 0.37;
  const double s = 5.0;
  const double weighted = wcce_loss(logits, target, manual_weights(std::vector<double>(cols, c), s));

  // plain cross entropy computed independently
  double cce = 0.0;
  for (int r = 0; r < rows; ++r) {
    double mx = logits.at(r, 0);
    for (int k = 1; k < cols; ++k) mx = std::max(mx, logits.at(r, k));
    double denom = 0.0;
    for (int k = 0; k < cols; ++k) denom += std::exp(logits.at(r, k) - mx);
    cce -= std::log(std::exp(logits.at(r, hot[static_cast<size_t>(r)]) - mx) / denom);
  }
  CHECK(std::abs(weighted - (s * c / cols) * cce) < 1e-12);
}

TEST_CASE("wcce is permutation equivariant in the token axis") {
  Rng rng(5);
  const int rows = 3, cols = 5;
  Matrix logits(rows, cols);
  for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);
  std::vector<int> hot{1, 4, 2};
  std::vector<double> w{0.5, 1.0, 0.25, 2.0, 1.5};

  const std::array<int, 5> perm{3, 0, 4, 1, 2};  // token k moves to perm[k]
  Matrix logits_p(rows, cols);
  std::vector<double> w_p(cols);
  std::vector<int> hot_p(hot.size());
  for (int k = 0; k < cols; ++k) {
    w_p[static_cast<size_t>(perm[static_cast<size_t>(k)])] = w[static_cast<size_t>(k)];
    for (int r = 0; r < rows; ++r) logits_p.at(r, perm[static_cast<size_t>(k)]) = logits.at(r, k);
  }
  for (size_t r = 0; r < hot.size(); ++r) hot_p[r] = perm[static_cast<size_t>(hot[r])];

  const double a = wcce_loss(logits, one_hot_rows(hot, cols), manual_weights(w, 2.0));
  const double b = wcce_loss(logits_p, one_hot_rows(hot_p, cols), manual_weights(w_p, 2.0));
  CHECK(a == b);  // exact: the same multiset of terms
}

TEST_CASE("wcce is non-negative and vanishes in the confident limit") {
  Matrix target = one_hot_rows({2}, 4);
  Matrix confident(1, 4);
  confident.data = {-50.0, -50.0, 50.0, -50.0};
  const auto lw = manual_weights({1.0, 1.0, 1.0, 1.0}, 1.0);
  CHECK(wcce_loss(confident, target, lw) >= 0.0);
  CHECK(wcce_loss(confident, target, lw) < 1e-12);

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits(1, 4);
    for (auto& v : logits.data) v = rng.uniform(-3.0, 3.0);
    CHECK(wcce_loss(logits, target, lw) >= 0.0);
  }
}

TEST_CASE("wcce validates shapes and one-hot targets") {
  Matrix logits(2, 3);
  Matrix bad_shape(1, 3);
  const auto lw = manual_weights({1, 1, 1}, 1.0);
  try {
    wcce_loss(logits, bad_shape, lw);
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::DimensionMismatch);
  }

  Matrix two_hot(2, 3);
  two_hot.at(0, 0) = 1.0;
  two_hot.at(0, 2) = 1.0;
  two_hot.at(1, 1) = 1.0;
  try {
    wcce_loss(logits, two_hot, lw);
    FAIL("expected NonOneHotTarget");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NonOneHotTarget);
  }
}

TEST_CASE("wcce gradient matches finite differences") {
  Tensor<double> logits({4, 6}, true);
  Rng rng(11);
  for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);
  std::vector<int> targets{1, 3, 0, 5};

  TokenSequence counts;
  counts.tokens = {0, 0, 1, 2, 3, 3, 3, 4, 5, 5};
  auto lw = compute_loss_weights({counts}, 6);

  std::array<Tensor<double>*, 1> inputs{&logits};
  auto report = ad::grad_check<double>(
      [&](Tape<double>& tape) {
        return wcce_node(tape, tape.leaf(logits), targets, lw, 1e-12);
      },
      inputs, 1e-6, 1e-4);
  INFO("max rel error ", report.max_rel_error);
  CHECK(report.pass);

  // graph value agrees with the direct evaluation
  Tape<double> tape;
  Var node = wcce_node(tape, tape.leaf(logits), targets, lw, 1e-12);
  Matrix m(4, 6);
  m.data = logits.data;
  CHECK(tape.value(node)[0] == doctest::Approx(wcce_loss(m, one_hot_rows(targets, 6), lw))
                                   .epsilon(1e-12));
}

TEST_CASE("adam leaves parameters untouched under zero gradients") {
  Tensor<float> p({3}, true);
  p.data = {1.0f, -2.0f, 3.0f};
  std::array<Tensor<float>*, 1> params{&p};
  auto state = AdamState<float>::init(params, {});
  adam_step<float>(params, state);
  CHECK(state.step == 1);
  CHECK(p.data == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("first adam step moves by about the learning rate") {
  // f(x) = x^2 at x0 = 1: g = 2, m_hat = g, v_hat = g^2, step = lr * g / |g|
  Tensor<double> x({1}, true);
  x.data = {1.0};
  x.grad = {2.0};
  std::array<Tensor<double>*, 1> params{&x};
  auto state = AdamState<double>::init(params, {});
  adam_step<double>(params, state);
  CHECK(x.data[0] == doctest::Approx(1.0 - 0.001).epsilon(1e-7));
}

TEST_CASE("adam hyperparameter defaults") {
  AdamConfig cfg;
  CHECK(cfg.learning_rate == 0.001);
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.999);
  CHECK(cfg.eps == 1e-8);
}

TEST_CASE("adam rejects parameters without gradients") {
  Tensor<float> p({2}, true);
  p.grad.clear();
  std::array<Tensor<float>*, 1> params{&p};
  auto state = AdamState<float>::init(params, {});
  try {
    adam_step<float>(params, state);
    FAIL("expected MissingGradient");
  } catch (const Error& e) {
    CHECK(e.code() == Err::MissingGradient);
  }
}

TEST_CASE("deployed-scale training configuration passes validation") {
  TrainConfig cfg;
  cfg.batch_size = 1024;
  cfg.epochs = 1200;
  cfg.validate();
  CHECK(cfg.tf_prob == 0.5);

  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

namespace {

std::vector<TrainingExample> tiny_dataset(int n_mel, int n_tokens, int pad_to) {
  // two phrases and a noise class, several clips each, random spectrograms
  std::vector<TrainingExample> out;
  Rng rng(13);
  auto add = [&](const std::vector<int>& body, ClipKind kind, const std::string& phrase) {
    TrainingExample ex;
    ex.spec.n_frames = 3;
    ex.spec.n_mel = n_mel;
    ex.spec.values.resize(static_cast<size_t>(3 * n_mel));
    for (auto& v : ex.spec.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    ex.tokens.tokens.push_back(beg_id(n_tokens));
    for (int t : body) ex.tokens.tokens.push_back(t);
    while (ex.tokens.tokens.size() < static_cast<size_t>(pad_to))
      ex.tokens.tokens.push_back(end_id(n_tokens));
    ex.kind = kind;
    ex.phrase = phrase;
    out.push_back(std::move(ex));
  };
  for (int i = 0; i < 4; ++i) add({0, 1}, ClipKind::Speech, "p0 p1");
  for (int i = 0; i < 4; ++i) add({1, 0}, ClipKind::Speech, "p1 p0");
  for (int i = 0; i < 4; ++i) add({noise_id(n_tokens)}, ClipKind::Noise, "");
  return out;
}

}  // namespace

TEST_CASE("training is bit-deterministic for a fixed seed") {
  ModelConfig mc;
  mc.n_mel = 4;
  mc.conv1_filters = 2;
  mc.enc_hidden = 3;
  mc.dec_hidden = 6;
  mc.dense_hidden = 4;
  mc.n_tokens = 7;
  mc.max_decode_len = 4;

  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.seed = 99;
  tc.test_fraction = 0.25;

  auto data = tiny_dataset(4, 7, 5);
  auto a = train(data, mc, tc);
  auto b = train(data, mc, tc);
  CHECK(serialize_model(a.params) == serialize_model(b.params));
  REQUIRE(a.history.size() == 2);
  CHECK(a.history[0].mean_loss == b.history[0].mean_loss);
  CHECK(a.history[1].weighted_accuracy == b.history[1].weighted_accuracy);

  // the loss moved at all within two epochs
  CHECK(a.history[1].mean_loss != a.history[0].mean_loss);

  // split partitions the data
  CHECK(a.train_indices.size() + a.test_indices.size() == data.size());
}

TEST_CASE("token frequency table matches a direct count over the split") {
  auto data = tiny_dataset(4, 7, 5);
  ModelConfig mc;
  mc.n_mel = 4;
  mc.conv1_filters = 2;
  mc.enc_hidden = 3;
  mc.dec_hidden = 6;
  mc.dense_hidden = 4;
  mc.n_tokens = 7;
  mc.max_decode_len = 4;
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 1;
  tc.seed = 5;
  tc.test_fraction = 0.25;

  auto result = train(data, mc, tc);
  std::vector<double> direct(7, 0.0);
  for (size_t i : result.train_indices)
    for (int t : data[i].tokens.tokens) direct[static_cast<size_t>(t)] += 1.0;
  CHECK(result.weights.f == direct);
}
