#pragma once

#include <span>
#include <string>
#include <vector>

#include "phonemeda/training.hpp"
#include "phonemeda/vocab.hpp"

namespace phonemeda {

struct EvalPair {
  TokenSequence truth;  // r
  TokenSequence pred;   // p
};

// <w^{r&p}, r&p> / <w^r, r>. Positions past the shorter sequence count as
// mismatches; the denominator always runs over the full ground truth.
double weighted_accuracy(const EvalPair& pair, const LossWeights& weights);

// Minimum insertions + deletions + substitutions, O(|a|*|b|) dynamic program.
int levenshtein(const TokenSequence& a, const TokenSequence& b);

// Drops the leading BEG and the trailing END run before PER / confusion.
TokenSequence strip_metric_tokens(const TokenSequence& seq, int beg, int end);

// levenshtein(p', r') / |r'| on stripped sequences. Not clamped; predictions
// much longer than the truth push it past 1.
double per(const EvalPair& pair, int beg, int end);

struct ConfusionMatrix {
  int n_tokens = 0;
  std::vector<int64_t> counts;  // row-major, rows = truth, cols = predicted

  explicit ConfusionMatrix(int t = 0)
      : n_tokens(t), counts(static_cast<size_t>(t) * static_cast<size_t>(t), 0) {}
  int64_t at(int truth, int pred) const {
    return counts[static_cast<size_t>(truth) * n_tokens + pred];
  }
  int64_t row_sum(int truth) const;
  int64_t total() const;
};

ConfusionMatrix confusion_matrix(std::span<const EvalPair> pairs, int n_tokens, int beg, int end);

// CSV with a symbol header row and column.
void write_confusion_csv(const std::string& path, const ConfusionMatrix& matrix,
                         const Vocabulary& vocab);

}  // namespace phonemeda
