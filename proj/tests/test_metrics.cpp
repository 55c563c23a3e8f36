#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "phonemeda/metrics.hpp"

using namespace phonemeda;

namespace {

TokenSequence seq(std::vector<int> t) { return TokenSequence{std::move(t)}; }

// Exhaustive recursive edit enumeration; independent of the DP implementation.
int brute_force_lev(std::span<const int> a, std::span<const int> b) {
  if (a.empty()) return static_cast<int>(b.size());
  if (b.empty()) return static_cast<int>(a.size());
  const int del = brute_force_lev(a.subspan(1), b) + 1;
  const int ins = brute_force_lev(a, b.subspan(1)) + 1;
  const int sub = brute_force_lev(a.subspan(1), b.subspan(1)) + (a[0] == b[0] ? 0 : 1);
  return std::min({del, ins, sub});
}

LossWeights manual_weights(std::vector<double> w) {
  LossWeights lw;
  lw.n_tokens = static_cast<int>(w.size());
  lw.w = std::move(w);
  lw.f.assign(lw.w.size(), 1.0);
  lw.scale_s = 1.0;
  return lw;
}

TokenSequence random_seq(Rng& rng, int max_len, int alphabet) {
  TokenSequence s;
  const auto n = rng.below(static_cast<uint64_t>(max_len) + 1);
  for (uint64_t i = 0; i < n; ++i) s.tokens.push_back(static_cast<int>(rng.below(alphabet)));
  return s;
}

}  // namespace

TEST_CASE("levenshtein agrees with the brute-force oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    auto a = random_seq(rng, 7, 4);
    auto b = random_seq(rng, 7, 4);
    CHECK(levenshtein(a, b) == brute_force_lev(a.tokens, b.tokens));
  }
}

TEST_CASE("levenshtein basics") {
  CHECK(levenshtein(seq({1, 2, 3}), seq({1, 2, 3})) == 0);
  CHECK(levenshtein(seq({}), seq({1, 2, 3, 4, 5})) == 5);
  // token renderings of "kitten" / "sitting": k i t t e n / s i t t i n g
  CHECK(levenshtein(seq({10, 8, 19, 19, 4, 13}), seq({18, 8, 19, 19, 8, 13, 6})) == 3);
}

TEST_CASE("levenshtein is a metric on random sequences") {
  Rng rng(19);
  for (int trial = 0; trial < 60; ++trial) {
    auto a = random_seq(rng, 6, 3);
    auto b = random_seq(rng, 6, 3);
    auto c = random_seq(rng, 6, 3);
    CHECK(levenshtein(a, b) == levenshtein(b, a));
    CHECK((levenshtein(a, b) == 0) == (a.tokens == b.tokens));
    CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
  }
}

TEST_CASE("weighted accuracy on identical and disjoint sequences") {
  const auto lw = manual_weights({1.0, 1.0, 1.0, 1.0});
  EvalPair same{seq({0, 1, 2}), seq({0, 1, 2})};
  CHECK(weighted_accuracy(same, lw) == 1.0);
  EvalPair none{seq({0, 1, 2}), seq({1, 2, 0})};
  CHECK(weighted_accuracy(none, lw) == 0.0);
}

TEST_CASE("weighted accuracy hand case: 2/3") {
  // r = [a, b], p = [a, c] with w_a = 2, w_b = 1
  const auto lw = manual_weights({2.0, 1.0, 0.5});
  EvalPair pair{seq({0, 1}), seq({0, 2})};
  CHECK(weighted_accuracy(pair, lw) == 2.0 / 3.0);
}

TEST_CASE("weighted accuracy penalizes shorter predictions over full truth") {
  const auto lw = manual_weights({1.0, 1.0});
  EvalPair pair{seq({0, 0, 0, 0}), seq({0, 0})};
  CHECK(weighted_accuracy(pair, lw) == 0.5);
}

TEST_CASE("weighted accuracy is invariant under uniform weight scaling") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    auto truth = random_seq(rng, 6, 3);
    if (truth.tokens.empty()) truth.tokens.push_back(0);
    auto pred = random_seq(rng, 6, 3);
    std::vector<double> w{0.3, 1.7, 0.9};
    auto scaled = w;
    for (auto& v : scaled) v *= 41.5;
    EvalPair pair{truth, pred};
    CHECK(weighted_accuracy(pair, manual_weights(w)) ==
          doctest::Approx(weighted_accuracy(pair, manual_weights(scaled))).epsilon(1e-12));
  }
}

TEST_CASE("weighted accuracy rejects empty ground truth") {
  const auto lw = manual_weights({1.0});
  try {
    weighted_accuracy({seq({}), seq({0})}, lw);
    FAIL("expected EmptyGroundTruth");
  } catch (const Error& e) {
    CHECK(e.code() == Err::EmptyGroundTruth);
  }
}

TEST_CASE("metric stripping removes BEG and the trailing END run") {
  const int beg = 13, end = 14;
  CHECK(strip_metric_tokens(seq({beg, 5, 9, 3, end, end}), beg, end).tokens ==
        std::vector<int>{5, 9, 3});
  CHECK(strip_metric_tokens(seq({beg, end, end}), beg, end).tokens.empty());
  // interior END stays: only the trailing run is padding
  CHECK(strip_metric_tokens(seq({beg, 5, end, 9, end}), beg, end).tokens ==
        std::vector<int>{5, end, 9});
}

TEST_CASE("per basics") {
  const int beg = 13, end = 14;
  EvalPair same{seq({beg, 1, 2, 3, end}), seq({beg, 1, 2, 3, end})};
  CHECK(per(same, beg, end) == 0.0);

  // |r| = 4 with one substitution
  EvalPair one_sub{seq({beg, 1, 2, 3, 4, end}), seq({beg, 1, 9, 3, 4, end})};
  CHECK(per(one_sub, beg, end) == 0.25);

  // much longer predictions push PER past 1
  EvalPair overrun{seq({beg, 1, end}), seq({beg, 2, 3, 4, 5, end})};
  CHECK(per(overrun, beg, end) == 4.0);

  try {
    per({seq({beg, end, end}), seq({beg, 1, end})}, beg, end);
    FAIL("expected EmptyGroundTruth");
  } catch (const Error& e) {
    CHECK(e.code() == Err::EmptyGroundTruth);
  }
}

TEST_CASE("per bound: at most max(|p|,|r|)/|r|") {
  Rng rng(29);
  const int beg = 13, end = 14;
  for (int trial = 0; trial < 50; ++trial) {
    auto r = random_seq(rng, 5, 5);
    r.tokens.push_back(1);  // non-empty after stripping
    auto p = random_seq(rng, 5, 5);
    EvalPair pair{r, p};
    const double v = per(pair, beg, end);
    const double bound = static_cast<double>(std::max(p.tokens.size(), r.tokens.size())) /
                         static_cast<double>(r.tokens.size());
    CHECK(v <= bound + 1e-12);
    if (v == 0.0) CHECK(r.tokens == p.tokens);
  }
}

TEST_CASE("a perfect predictor yields a diagonal confusion matrix") {
  const int beg = 5, end = 6;
  std::vector<EvalPair> pairs;
  pairs.push_back({seq({beg, 0, 1, 2, end}), seq({beg, 0, 1, 2, end})});
  pairs.push_back({seq({beg, 2, 2, end}), seq({beg, 2, 2, end})});
  auto m = confusion_matrix(pairs, 8, beg, end);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      if (r != c) CHECK(m.at(r, c) == 0);
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(1, 1) == 1);
  CHECK(m.at(2, 2) == 3);
  CHECK(m.total() == 5);
}

TEST_CASE("confusion matrix row sums count ground-truth occurrences") {
  const int beg = 5, end = 6;
  std::vector<EvalPair> pairs = {
      {seq({beg, 0, 1, end}), seq({beg, 0, 2, end})},
      {seq({beg, 1, 1, end}), seq({beg, 1, 0, end})},
      {seq({beg, 2, end}), seq({beg, 2, end})},
  };
  auto m = confusion_matrix(pairs, 8, beg, end);
  // aligned ground-truth tokens: 0 once, 1 three times, 2 once
  CHECK(m.row_sum(0) == 1);
  CHECK(m.row_sum(1) == 3);
  CHECK(m.row_sum(2) == 1);
  CHECK(m.total() == 5);

  // manual tally of the individual cells
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(1, 2) == 1);
  CHECK(m.at(1, 1) == 1);
  CHECK(m.at(1, 0) == 1);
  CHECK(m.at(2, 2) == 1);
}

TEST_CASE("confusion matrix rejects out-of-range tokens") {
  std::vector<EvalPair> pairs = {{seq({0, 9}), seq({0, 1})}};
  try {
    confusion_matrix(pairs, 4, /*beg=*/2, /*end=*/3);
    FAIL("expected TokenOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == Err::TokenOutOfRange);
  }
}

TEST_CASE("confusion matrix CSV carries symbol headers") {
  namespace fs = std::filesystem;
  auto vocab = Vocabulary::with_generic_phonemes(2);  // 7 tokens
  std::vector<EvalPair> pairs = {
      {seq({vocab.beg(), 0, 1, vocab.end()}), seq({vocab.beg(), 0, 1, vocab.end()})}};
  auto m = confusion_matrix(pairs, 7, vocab.beg(), vocab.end());
  const auto path = fs::temp_directory_path() / "phonemeda_confusion.csv";
  write_confusion_csv(path.string(), m, vocab);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == ",p0,p1,UNK,BEG,END,BKG,NOISE");
  std::string row;
  std::getline(f, row);
  CHECK(row == "p0,1,0,0,0,0,0,0");
  fs::remove(path);
}
