#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phonemeda/error.hpp"

namespace phonemeda {

enum class ClipKind { Speech, Noise, Silence };

std::string kind_name(ClipKind k);
ClipKind kind_from_name(const std::string& name);

// Phoneme ids come first (0..n-1), the five control tokens follow in a fixed
// order, so total_tokens() == phonemes.size() + 5.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> phonemes);
  static Vocabulary with_generic_phonemes(int n_phonemes);  // symbols p0..p{n-1}

  int total_tokens() const { return static_cast<int>(phonemes_.size()) + 5; }
  int n_phonemes() const { return static_cast<int>(phonemes_.size()); }

  int unk() const { return n_phonemes() + 0; }
  int beg() const { return n_phonemes() + 1; }
  int end() const { return n_phonemes() + 2; }
  int bkg() const { return n_phonemes() + 3; }
  int noise() const { return n_phonemes() + 4; }

  // UNK for symbols outside the vocabulary.
  int id_of(const std::string& symbol) const;
  const std::string& symbol_of(int id) const;

 private:
  std::vector<std::string> phonemes_;
  std::vector<std::string> control_;
};

struct TokenSequence {
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const TokenSequence&) const = default;
};

// [BEG, ids..., END] padded with END up to pad_to. The transcription is a
// whitespace-separated symbol list; unknown symbols map to UNK.
TokenSequence encode_tokens(const std::string& transcription, const Vocabulary& vocab, int pad_to);

// Inverse of encode_tokens up to UNK collapse: BEG and trailing ENDs dropped.
std::string decode_tokens(const TokenSequence& seq, const Vocabulary& vocab);

struct ManifestEntry {
  std::string path;
  std::string phonemes;  // empty for non-speech
  ClipKind kind = ClipKind::Speech;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

// JSON Lines, one {"path","phonemes","kind"} record per clip. Paths are
// resolved relative to the manifest's directory and must exist; callers that
// prefer to surface missing files per entry pass validate_paths = false.
DatasetManifest load_manifest(const std::string& path, bool validate_paths = true);
void save_manifest(const std::string& path, const DatasetManifest& manifest);

// Seeded shuffle followed by a stratified split: every (kind, phonemes)
// stratum contributes to both sides. A stratum with fewer than two entries
// cannot straddle the split and is an error.
std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest,
                                                  double test_fraction, uint64_t seed);

}  // namespace phonemeda
