#include "phonemeda/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "phonemeda/metrics.hpp"

namespace phonemeda {

LossWeights compute_loss_weights(const std::vector<TokenSequence>& train_sequences, int n_tokens) {
  if (train_sequences.empty()) raise(Err::EmptyTrainingSet, "no training sequences");

  LossWeights lw;
  lw.n_tokens = n_tokens;
  lw.f.assign(static_cast<size_t>(n_tokens), 0.0);
  for (const auto& seq : train_sequences)
    for (int t : seq.tokens) {
      if (t < 0 || t >= n_tokens) raise(Err::TokenOutOfRange, "token id " + std::to_string(t));
      lw.f[static_cast<size_t>(t)] += 1.0;
    }

  lw.w.assign(static_cast<size_t>(n_tokens), 0.0);
  double max_w = 0.0;
  double total = 0.0;
  for (int t = 0; t < n_tokens; ++t) {
    total += lw.f[static_cast<size_t>(t)];
    if (lw.f[static_cast<size_t>(t)] > 0.0) {
      lw.w[static_cast<size_t>(t)] = 1.0 / lw.f[static_cast<size_t>(t)];
      max_w = std::max(max_w, lw.w[static_cast<size_t>(t)]);
    }
  }
  // absent tokens keep the strongest present emphasis instead of 1/0
  for (int t = 0; t < n_tokens; ++t)
    if (lw.f[static_cast<size_t>(t)] == 0.0) lw.w[static_cast<size_t>(t)] = max_w;
  lw.scale_s = total / n_tokens;
  return lw;
}

double wcce_loss(const Matrix& logits, const Matrix& one_hot_targets, const LossWeights& weights,
                 double loss_eps) {
  if (logits.rows != one_hot_targets.rows || logits.cols != one_hot_targets.cols ||
      logits.cols != weights.n_tokens)
    raise(Err::DimensionMismatch, "logits, targets and weights disagree on dimensions");

  double total = 0.0;
  for (int r = 0; r < logits.rows; ++r) {
    int hot = -1;
    for (int c = 0; c < logits.cols; ++c) {
      const double y = one_hot_targets.at(r, c);
      if (y == 1.0) {
        if (hot >= 0) raise(Err::NonOneHotTarget, "target row has two hot entries");
        hot = c;
      } else if (y != 0.0) {
        raise(Err::NonOneHotTarget, "target entries must be exactly 0 or 1");
      }
    }
    if (hot < 0) raise(Err::NonOneHotTarget, "target row has no hot entry");

    double mx = logits.at(r, 0);
    for (int c = 1; c < logits.cols; ++c) mx = std::max(mx, logits.at(r, c));
    double denom = 0.0;
    for (int c = 0; c < logits.cols; ++c) denom += std::exp(logits.at(r, c) - mx);
    const double sigma = std::exp(logits.at(r, hot) - mx) / denom;
    total += weights.w[static_cast<size_t>(hot)] * std::log(std::max(sigma, loss_eps));
  }
  return -(weights.scale_s / logits.cols) * total;
}

std::string stratum_key(ClipKind kind, const std::string& phrase) {
  return kind_name(kind) + "|" + phrase;
}

std::pair<std::vector<size_t>, std::vector<size_t>> stratified_split_indices(
    const std::vector<std::string>& keys, double test_fraction, uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    raise(Err::InvalidConfig, "test_fraction must lie strictly between 0 and 1");

  std::map<std::string, std::vector<size_t>> strata;
  for (size_t i = 0; i < keys.size(); ++i) strata[keys[i]].push_back(i);

  Rng rng(seed);
  std::vector<size_t> train, test;
  for (auto& [key, members] : strata) {
    if (members.size() < 2)
      raise(Err::DatasetTooSmall, "stratum '" + key + "' has fewer than 2 entries");
    rng.shuffle(members.begin(), members.end());
    auto n_test = static_cast<size_t>(std::llround(members.size() * test_fraction));
    n_test = std::clamp<size_t>(n_test, 1, members.size() - 1);
    test.insert(test.end(), members.begin(), members.begin() + static_cast<long>(n_test));
    train.insert(train.end(), members.begin() + static_cast<long>(n_test), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

namespace {

struct EvalOutcome {
  double mean_wacc = 0.0;
  double mean_per = 0.0;
};

EvalOutcome evaluate_subset(const std::vector<TrainingExample>& dataset,
                            const std::vector<size_t>& indices, ModelParams& params,
                            const LossWeights& weights) {
  EvalOutcome out;
  if (indices.empty()) return out;
  const int n_tok = params.config.n_tokens;
  for (size_t idx : indices) {
    const auto& ex = dataset[idx];
    ad::Tape<float> tape;
    ForwardOptions opt;
    opt.stop_at_end = false;  // full rollout keeps prediction and truth aligned
    auto fwd = forward(tape, ex.spec, params, opt);
    EvalPair pair{ex.tokens, predicted_sequence(fwd, n_tok)};
    out.mean_wacc += weighted_accuracy(pair, weights);
    out.mean_per += per(pair, beg_id(n_tok), end_id(n_tok));
  }
  out.mean_wacc /= static_cast<double>(indices.size());
  out.mean_per /= static_cast<double>(indices.size());
  return out;
}

}  // namespace

TrainResult train(const std::vector<TrainingExample>& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config) {
  model_config.validate();
  train_config.validate();
  if (dataset.empty()) raise(Err::EmptyTrainingSet, "dataset is empty");

  std::vector<std::string> keys;
  keys.reserve(dataset.size());
  for (const auto& ex : dataset) keys.push_back(stratum_key(ex.kind, ex.phrase));
  auto [train_idx, test_idx] =
      stratified_split_indices(keys, train_config.test_fraction, train_config.seed);

  std::vector<TokenSequence> train_seqs;
  train_seqs.reserve(train_idx.size());
  for (size_t i : train_idx) train_seqs.push_back(dataset[i].tokens);
  LossWeights weights = compute_loss_weights(train_seqs, model_config.n_tokens);

  TrainResult result;
  result.params = init_model<float>(model_config, train_config.seed);
  result.weights = weights;
  result.train_indices = train_idx;
  result.test_indices = test_idx;

  auto named = result.params.named_tensors();
  std::vector<ad::Tensor<float>*> tensors;
  tensors.reserve(named.size());
  for (auto& [name, t] : named) tensors.push_back(t);
  auto adam = AdamState<float>::init(std::span<ad::Tensor<float>* const>(tensors),
                                     train_config.adam);

  Rng rng(train_config.seed ^ 0x5eedf00dULL);
  const int batch_size = std::min<int>(train_config.batch_size,
                                       static_cast<int>(train_idx.size()));

  std::vector<size_t> order = train_idx;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    size_t n_seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch_size));
      const auto n_batch = static_cast<float>(stop - start);
      result.params.zero_grads();
      for (size_t k = start; k < stop; ++k) {
        const auto& ex = dataset[order[k]];
        ad::Tape<float> tape;
        ForwardOptions opt;
        opt.training = true;
        opt.update_bn_running = true;
        opt.teacher = &ex.tokens;
        opt.tf_prob = train_config.tf_prob;
        opt.rng = &rng;
        auto fwd = forward(tape, ex.spec, result.params, opt);
        std::vector<int> targets(ex.tokens.tokens.begin() + 1, ex.tokens.tokens.end());
        ad::Var loss = wcce_node(tape, fwd.logit_matrix, targets, weights,
                                 static_cast<float>(train_config.loss_eps));
        loss_sum += tape.value(loss)[0];
        ++n_seen;
        tape.backward(loss, 1.0f / n_batch);
      }

      if (train_config.grad_clip > 0.0) {
        double norm_sq = 0.0;
        for (auto* t : tensors)
          for (float g : t->grad) norm_sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(norm_sq);
        if (norm > train_config.grad_clip) {
          const auto factor = static_cast<float>(train_config.grad_clip / norm);
          for (auto* t : tensors)
            for (float& g : t->grad) g *= factor;
        }
      }
      adam_step(std::span<ad::Tensor<float>* const>(tensors), adam);
    }

    EvalOutcome eval = evaluate_subset(dataset, test_idx, result.params, weights);
    result.history.push_back({epoch + 1, loss_sum / static_cast<double>(n_seen), eval.mean_wacc,
                              eval.mean_per});
  }
  return result;
}

}  // namespace phonemeda
