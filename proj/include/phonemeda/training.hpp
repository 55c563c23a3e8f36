#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phonemeda/model.hpp"
#include "phonemeda/vocab.hpp"

namespace phonemeda {

// Inverse-frequency token weights. f counts every occurrence over the padded
// training sequences, w is its elementwise inverse and scale_s the mean count.
struct LossWeights {
  std::vector<double> f;
  std::vector<double> w;
  double scale_s = 0.0;
  int n_tokens = 0;
};

LossWeights compute_loss_weights(const std::vector<TokenSequence>& train_sequences, int n_tokens);

// Row-major real matrix; rows index decoder iterations, columns index tokens.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

// Weighted categorical cross-entropy of a logit matrix against one-hot
// targets: softmax per row, then -(S/W) * sum_ij w_j * yhat_ij * ln(sigma_ij).
double wcce_loss(const Matrix& logits, const Matrix& one_hot_targets, const LossWeights& weights,
                 double loss_eps = 1e-12);

// Graph form used by training; target_tokens holds the target id per row.
template <typename T>
ad::Var wcce_node(ad::Tape<T>& tape, ad::Var logit_matrix, std::span<const int> target_tokens,
                  const LossWeights& weights, T loss_eps) {
  const auto& shape = tape.shape(logit_matrix);
  if (shape.size() != 2 || shape[0] != static_cast<int>(target_tokens.size()) ||
      shape[1] != weights.n_tokens)
    raise(Err::DimensionMismatch, "logit matrix does not match targets/weights");

  const int rows = shape[0], cols = shape[1];
  std::vector<T> mask(static_cast<size_t>(rows) * cols, T(0));
  for (int r = 0; r < rows; ++r) {
    const int t = target_tokens[static_cast<size_t>(r)];
    if (t < 0 || t >= cols) raise(Err::TokenOutOfRange, "target id " + std::to_string(t));
    mask[static_cast<size_t>(r) * cols + t] = static_cast<T>(weights.w[static_cast<size_t>(t)]);
  }

  ad::Var sigma = tape.softmax(logit_matrix);
  ad::Var log_sigma = tape.log_op(sigma, loss_eps);
  ad::Var weighted = tape.hadamard(log_sigma, tape.constant({rows, cols}, std::move(mask)));
  ad::Var total = tape.sum(weighted);
  return tape.scale(total, static_cast<T>(-weights.scale_s / cols));
}

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first and second moments plus the shared step counter.
template <typename T>
struct AdamState {
  AdamConfig cfg;
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  static AdamState init(std::span<ad::Tensor<T>* const> params, const AdamConfig& cfg) {
    AdamState s;
    s.cfg = cfg;
    for (const auto* p : params) {
      s.m.emplace_back(p->numel(), T(0));
      s.v.emplace_back(p->numel(), T(0));
    }
    return s;
  }
};

template <typename T>
void adam_step(std::span<ad::Tensor<T>* const> params, AdamState<T>& state) {
  if (params.size() != state.m.size())
    raise(Err::InvalidConfig, "adam state does not match parameter list");
  for (const auto* p : params)
    if (p->requires_grad && p->grad.size() != p->numel())
      raise(Err::MissingGradient, "parameter has no gradient");

  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    ad::Tensor<T>& p = *params[pi];
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
      const double m_hat = m[i] / corr1;
      const double v_hat = v[i] / corr2;
      p.data[i] -= static_cast<T>(state.cfg.learning_rate * m_hat /
                                  (std::sqrt(v_hat) + state.cfg.eps));
    }
  }
}

struct TrainConfig {
  int batch_size = 1024;
  int epochs = 1200;
  double tf_prob = 0.5;
  uint64_t seed = 42;
  double test_fraction = 0.1;
  double loss_eps = 1e-12;
  AdamConfig adam;
  double grad_clip = 0.0;  // 0 disables clipping

  void validate() const {
    if (batch_size < 1) raise(Err::InvalidConfig, "batch_size must be >= 1");
    if (epochs < 1) raise(Err::InvalidConfig, "epochs must be >= 1");
    if (tf_prob < 0.0 || tf_prob > 1.0) raise(Err::InvalidConfig, "tf_prob must lie in [0,1]");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      raise(Err::InvalidConfig, "test_fraction must lie strictly between 0 and 1");
    if (adam.learning_rate <= 0.0) raise(Err::InvalidConfig, "learning_rate must be positive");
  }
};

struct TrainingExample {
  SpecInput<float> spec;
  TokenSequence tokens;
  ClipKind kind = ClipKind::Speech;
  std::string phrase;  // stratification key; empty for non-speech
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double weighted_accuracy = 0.0;
  double per = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
  LossWeights weights;
  std::vector<size_t> train_indices;
  std::vector<size_t> test_indices;
};

// Stratified index split shared by training and evaluation; keys pair each
// example with its (kind, phrase) stratum.
std::pair<std::vector<size_t>, std::vector<size_t>> stratified_split_indices(
    const std::vector<std::string>& keys, double test_fraction, uint64_t seed);

std::string stratum_key(ClipKind kind, const std::string& phrase);

// Full loop: seeded shuffle, teacher-forced forward, weighted loss, backward,
// Adam step; per-epoch free-running metrics on the held-out set.
TrainResult train(const std::vector<TrainingExample>& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config);

}  // namespace phonemeda
