#include "phonemeda/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "phonemeda/rng.hpp"
#include <json.hpp>

namespace fs = std::filesystem;

namespace phonemeda {

std::string kind_name(ClipKind k) {
  switch (k) {
    case ClipKind::Speech: return "speech";
    case ClipKind::Noise: return "noise";
    case ClipKind::Silence: return "silence";
  }
  return "speech";
}

ClipKind kind_from_name(const std::string& name) {
  if (name == "speech") return ClipKind::Speech;
  if (name == "noise") return ClipKind::Noise;
  if (name == "silence") return ClipKind::Silence;
  raise(Err::ParseError, "unknown clip kind '" + name + "'");
}

Vocabulary::Vocabulary(std::vector<std::string> phonemes)
    : phonemes_(std::move(phonemes)), control_{"UNK", "BEG", "END", "BKG", "NOISE"} {
  for (size_t i = 0; i < phonemes_.size(); ++i)
    for (size_t j = i + 1; j < phonemes_.size(); ++j)
      if (phonemes_[i] == phonemes_[j])
        raise(Err::InvalidConfig, "duplicate phoneme symbol '" + phonemes_[i] + "'");
}

Vocabulary Vocabulary::with_generic_phonemes(int n_phonemes) {
  if (n_phonemes < 1) raise(Err::InvalidConfig, "need at least one phoneme");
  std::vector<std::string> syms;
  syms.reserve(static_cast<size_t>(n_phonemes));
  for (int i = 0; i < n_phonemes; ++i) syms.push_back("p" + std::to_string(i));
  return Vocabulary(std::move(syms));
}

int Vocabulary::id_of(const std::string& symbol) const {
  for (size_t i = 0; i < phonemes_.size(); ++i)
    if (phonemes_[i] == symbol) return static_cast<int>(i);
  for (size_t i = 0; i < control_.size(); ++i)
    if (control_[i] == symbol) return n_phonemes() + static_cast<int>(i);
  return unk();
}

const std::string& Vocabulary::symbol_of(int id) const {
  if (id < 0 || id >= total_tokens())
    raise(Err::TokenOutOfRange, "token id " + std::to_string(id) + " out of range");
  if (id < n_phonemes()) return phonemes_[static_cast<size_t>(id)];
  return control_[static_cast<size_t>(id - n_phonemes())];
}

TokenSequence encode_tokens(const std::string& transcription, const Vocabulary& vocab,
                            int pad_to) {
  std::vector<int> ids;
  std::istringstream ss(transcription);
  std::string sym;
  while (ss >> sym) ids.push_back(vocab.id_of(sym));

  if (static_cast<int>(ids.size()) + 2 > pad_to)
    raise(Err::SequenceTooLong, std::to_string(ids.size()) + " phonemes do not fit in pad_to=" +
                                    std::to_string(pad_to));

  TokenSequence seq;
  seq.tokens.reserve(static_cast<size_t>(pad_to));
  seq.tokens.push_back(vocab.beg());
  seq.tokens.insert(seq.tokens.end(), ids.begin(), ids.end());
  while (seq.tokens.size() < static_cast<size_t>(pad_to)) seq.tokens.push_back(vocab.end());
  return seq;
}

std::string decode_tokens(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq.tokens) {
    if (id == vocab.beg()) continue;
    if (id == vocab.end()) break;
    if (!out.empty()) out += ' ';
    out += vocab.symbol_of(id);
  }
  return out;
}

DatasetManifest load_manifest(const std::string& path, bool validate_paths) {
  std::ifstream f(path);
  if (!f) raise(Err::IoError, "cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();

  DatasetManifest manifest;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(Err::ParseError, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.contains("path") || !rec.contains("kind"))
      raise(Err::ParseError,
            "manifest line " + std::to_string(line_no) + ": missing path or kind");
    ManifestEntry entry;
    entry.path = rec["path"].get<std::string>();
    entry.phonemes = rec.value("phonemes", std::string());
    try {
      entry.kind = kind_from_name(rec["kind"].get<std::string>());
    } catch (const Error&) {
      raise(Err::ParseError, "manifest line " + std::to_string(line_no) + ": unknown kind '" +
                                 rec["kind"].get<std::string>() + "'");
    }
    fs::path resolved = fs::path(entry.path).is_absolute() ? fs::path(entry.path)
                                                           : base / entry.path;
    if (validate_paths && !fs::exists(resolved))
      raise(Err::MissingAudioFile, "manifest line " + std::to_string(line_no) +
                                       " references missing file " + resolved.string());
    entry.path = resolved.string();
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  for (const auto& e : manifest.entries) {
    // store paths relative to the manifest when possible
    std::string p = e.path;
    std::error_code ec;
    auto rel = fs::relative(e.path, base, ec);
    if (!ec && !rel.empty()) p = rel.string();
    nlohmann::json rec{{"path", p}, {"phonemes", e.phonemes}, {"kind", kind_name(e.kind)}};
    f << rec.dump() << '\n';
  }
}

std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest,
                                                  double test_fraction, uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    raise(Err::InvalidConfig, "test_fraction must lie strictly between 0 and 1");

  // strata keyed by (kind, phrase); std::map keeps the order deterministic
  std::map<std::string, std::vector<size_t>> strata;
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    strata[kind_name(e.kind) + "|" + e.phonemes].push_back(i);
  }

  Rng rng(seed);
  std::vector<size_t> test_idx, train_idx;
  for (auto& [key, members] : strata) {
    if (members.size() < 2)
      raise(Err::DatasetTooSmall, "stratum '" + key + "' has fewer than 2 entries");
    rng.shuffle(members.begin(), members.end());
    auto n_test = static_cast<size_t>(std::llround(members.size() * test_fraction));
    n_test = std::clamp<size_t>(n_test, 1, members.size() - 1);
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<long>(n_test));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<long>(n_test), members.end());
  }
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  DatasetManifest train, test;
  for (size_t i : train_idx) train.entries.push_back(manifest.entries[i]);
  for (size_t i : test_idx) test.entries.push_back(manifest.entries[i]);
  return {std::move(train), std::move(test)};
}

}  // namespace phonemeda
