#include "phonemeda/metrics.hpp"

#include <algorithm>
#include <fstream>

namespace phonemeda {

double weighted_accuracy(const EvalPair& pair, const LossWeights& weights) {
  const auto& r = pair.truth.tokens;
  const auto& p = pair.pred.tokens;
  if (r.empty()) raise(Err::EmptyGroundTruth, "ground truth sequence is empty");

  auto weight_of = [&](int token) {
    if (token < 0 || token >= weights.n_tokens)
      raise(Err::TokenOutOfRange, "token id " + std::to_string(token));
    return weights.w[static_cast<size_t>(token)];
  };

  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < r.size(); ++i) {
    const double wr = weight_of(r[i]);
    den += wr;
    if (i < p.size() && p[i] == r[i]) num += wr;
  }
  return num / den;
}

int levenshtein(const TokenSequence& a, const TokenSequence& b) {
  const auto& x = a.tokens;
  const auto& y = b.tokens;
  std::vector<int> prev(y.size() + 1), cur(y.size() + 1);
  for (size_t j = 0; j <= y.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= x.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= y.size(); ++j) {
      const int sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

TokenSequence strip_metric_tokens(const TokenSequence& seq, int beg, int end) {
  TokenSequence out;
  size_t stop = seq.tokens.size();
  while (stop > 0 && seq.tokens[stop - 1] == end) --stop;
  for (size_t i = 0; i < stop; ++i) {
    if (i == 0 && seq.tokens[i] == beg) continue;
    out.tokens.push_back(seq.tokens[i]);
  }
  return out;
}

double per(const EvalPair& pair, int beg, int end) {
  const TokenSequence truth = strip_metric_tokens(pair.truth, beg, end);
  const TokenSequence pred = strip_metric_tokens(pair.pred, beg, end);
  if (truth.tokens.empty()) raise(Err::EmptyGroundTruth, "ground truth empty after stripping");
  return static_cast<double>(levenshtein(pred, truth)) / static_cast<double>(truth.tokens.size());
}

int64_t ConfusionMatrix::row_sum(int truth) const {
  int64_t s = 0;
  for (int c = 0; c < n_tokens; ++c) s += at(truth, c);
  return s;
}

int64_t ConfusionMatrix::total() const {
  int64_t s = 0;
  for (int64_t v : counts) s += v;
  return s;
}

ConfusionMatrix confusion_matrix(std::span<const EvalPair> pairs, int n_tokens, int beg, int end) {
  ConfusionMatrix m(n_tokens);
  for (const auto& pair : pairs) {
    const TokenSequence truth = strip_metric_tokens(pair.truth, beg, end);
    const TokenSequence pred = strip_metric_tokens(pair.pred, beg, end);
    const size_t n = std::min(truth.tokens.size(), pred.tokens.size());
    for (size_t i = 0; i < n; ++i) {
      const int r = truth.tokens[i];
      const int p = pred.tokens[i];
      if (r < 0 || r >= n_tokens || p < 0 || p >= n_tokens)
        raise(Err::TokenOutOfRange, "token outside the vocabulary in confusion pair");
      ++m.counts[static_cast<size_t>(r) * n_tokens + p];
    }
  }
  return m;
}

void write_confusion_csv(const std::string& path, const ConfusionMatrix& matrix,
                         const Vocabulary& vocab) {
  if (vocab.total_tokens() != matrix.n_tokens)
    raise(Err::DimensionMismatch, "vocabulary size does not match matrix");
  std::ofstream f(path, std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write " + path);
  for (int c = 0; c < matrix.n_tokens; ++c) f << ',' << vocab.symbol_of(c);
  f << '\n';
  for (int r = 0; r < matrix.n_tokens; ++r) {
    f << vocab.symbol_of(r);
    for (int c = 0; c < matrix.n_tokens; ++c) f << ',' << matrix.at(r, c);
    f << '\n';
  }
}

}  // namespace phonemeda
