#include "phonemeda/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

namespace fs = std::filesystem;

namespace phonemeda {

namespace {

// Formant pairs spread over the band kept by the 8820 Hz pipeline (< ~3.9 kHz).
const std::vector<std::pair<double, double>> kDefaultFormants = {
    {300, 2200}, {420, 1800}, {550, 1450}, {680, 2600}, {800, 1200},  {950, 2900},
    {1100, 1900}, {350, 3200}, {600, 3600}, {1300, 2100}, {480, 2450}, {750, 3500},
};

const std::vector<std::vector<int>> kDefaultPhrases = {
    {0, 1, 2},       {0, 1, 3},    {4, 5},          {4, 5, 6},      {7, 8, 9},
    {7, 8, 10},      {11, 0, 4},   {2, 3, 11},      {5, 9, 1},      {10, 11, 6, 2},
    {1, 7, 3, 8},    {6, 10, 0, 5, 9},              {9, 2, 8, 4, 11, 3},
    {3, 6, 1, 10},
};

}  // namespace

SynthConfig SynthConfig::desk_default() {
  SynthConfig c;
  c.phrases = kDefaultPhrases;
  c.formants = kDefaultFormants;
  return c;
}

void SynthConfig::validate() const {
  if (n_phonemes < 1) raise(Err::InvalidConfig, "n_phonemes must be positive");
  if (sample_rate <= 0) raise(Err::InvalidConfig, "sample_rate must be positive");
  if (clip_seconds <= 0) raise(Err::InvalidConfig, "clip_seconds must be positive");
  if (phrases.empty()) raise(Err::InvalidConfig, "phrase list is empty");
  if (clips_per_phrase < 1) raise(Err::InvalidConfig, "clips_per_phrase must be positive");
  if (!formants.empty() && static_cast<int>(formants.size()) < n_phonemes)
    raise(Err::InvalidConfig, "formant table shorter than phoneme count");
  for (const auto& phrase : phrases) {
    if (phrase.empty()) raise(Err::InvalidConfig, "empty phrase");
    for (int id : phrase)
      if (id < 0 || id >= n_phonemes)
        raise(Err::InvalidConfig, "phrase references phoneme id " + std::to_string(id));
  }
}

AudioClip render_phoneme(double f1, double f2, int sample_rate, Rng& rng) {
  const double dur = rng.uniform(0.120, 0.200);
  const double pitch_jitter = 1.0 + rng.uniform(-0.02, 0.02);
  const double amp = 0.40 * (1.0 + rng.uniform(-0.15, 0.15));

  AudioClip clip;
  clip.sample_rate = sample_rate;
  const auto n = static_cast<size_t>(std::llround(dur * sample_rate));
  clip.samples.resize(n);

  const double w1 = 2.0 * std::numbers::pi * f1 * pitch_jitter / sample_rate;
  const double w2 = 2.0 * std::numbers::pi * f2 * pitch_jitter / sample_rate;
  const auto ramp = static_cast<size_t>(sample_rate / 100);  // 10 ms attack/release
  for (size_t i = 0; i < n; ++i) {
    double env = 1.0;
    if (i < ramp) env = static_cast<double>(i) / ramp;
    if (n - 1 - i < ramp) env = std::min(env, static_cast<double>(n - 1 - i) / ramp);
    clip.samples[i] = amp * env * (0.6 * std::sin(w1 * i) + 0.4 * std::sin(w2 * i));
  }
  return clip;
}

namespace {

AudioClip render_phrase(const std::vector<int>& phrase, const SynthConfig& cfg, Rng& rng) {
  AudioClip clip;
  clip.sample_rate = cfg.sample_rate;
  const auto gap = static_cast<size_t>(cfg.sample_rate / 50);  // 20 ms between phonemes
  for (size_t i = 0; i < phrase.size(); ++i) {
    const auto& [f1, f2] = cfg.formants[static_cast<size_t>(phrase[i])];
    AudioClip ph = render_phoneme(f1, f2, cfg.sample_rate, rng);
    clip.samples.insert(clip.samples.end(), ph.samples.begin(), ph.samples.end());
    if (i + 1 < phrase.size()) clip.samples.insert(clip.samples.end(), gap, 0.0);
  }
  return clip;
}

AudioClip render_noise(int n_samples, int sample_rate, Rng& rng) {
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(static_cast<size_t>(n_samples));
  // one-pole low-pass over white noise gives a colored spectrum
  double state = 0.0;
  double peak = 0.0;
  for (auto& s : clip.samples) {
    state = 0.96 * state + rng.uniform(-1.0, 1.0);
    s = state;
    peak = std::max(peak, std::abs(s));
  }
  if (peak > 0.0)
    for (auto& s : clip.samples) s *= 0.5 / peak;
  return clip;
}

AudioClip render_silence(int n_samples, int sample_rate, Rng& rng) {
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(static_cast<size_t>(n_samples));
  for (auto& s : clip.samples) s = rng.uniform(-3e-5, 3e-5);
  return clip;
}

std::string phrase_symbols(const std::vector<int>& phrase) {
  std::string s;
  for (size_t i = 0; i < phrase.size(); ++i) {
    if (i) s += ' ';
    s += "p" + std::to_string(phrase[i]);
  }
  return s;
}

}  // namespace

SynthResult synth_generate(const SynthConfig& config, uint64_t seed, const std::string& out_dir) {
  SynthConfig cfg = config;
  if (cfg.formants.empty()) {
    if (cfg.n_phonemes > static_cast<int>(kDefaultFormants.size()))
      raise(Err::InvalidConfig, "no default formants for n_phonemes > " +
                                     std::to_string(kDefaultFormants.size()));
    cfg.formants = kDefaultFormants;
  }
  if (cfg.phrases.empty()) cfg.phrases = kDefaultPhrases;
  cfg.validate();

  fs::create_directories(out_dir);
  SynthResult result;

  char name[64];
  // Per-clip generators are seeded independently of file IO ordering so the
  // corpus is reproducible byte for byte.
  uint64_t clip_counter = 0;
  auto clip_rng = [&](uint64_t tag) { return Rng(seed ^ (0x9e3779b97f4a7c15ull * (tag + 1))); };

  for (size_t p = 0; p < cfg.phrases.size(); ++p) {
    for (int c = 0; c < cfg.clips_per_phrase; ++c) {
      Rng rng = clip_rng(clip_counter++);
      AudioClip clip = render_phrase(cfg.phrases[p], cfg, rng);
      std::snprintf(name, sizeof(name), "speech_%03zu_%03d.wav", p, c);
      write_wav_file((fs::path(out_dir) / name).string(), clip);
      result.manifest.entries.push_back(
          {(fs::path(out_dir) / name).string(), phrase_symbols(cfg.phrases[p]), ClipKind::Speech});
      ++result.n_speech;
    }
  }

  const auto noise_len = static_cast<int>(std::llround(2.0 * cfg.clip_seconds * cfg.sample_rate));
  for (int c = 0; c < cfg.noise_clips; ++c) {
    Rng rng = clip_rng(clip_counter++);
    AudioClip clip = render_noise(noise_len, cfg.sample_rate, rng);
    std::snprintf(name, sizeof(name), "noise_%03d.wav", c);
    write_wav_file((fs::path(out_dir) / name).string(), clip);
    result.manifest.entries.push_back({(fs::path(out_dir) / name).string(), "", ClipKind::Noise});
    ++result.n_noise;
  }

  const auto sil_len = static_cast<int>(std::llround(cfg.clip_seconds * cfg.sample_rate));
  for (int c = 0; c < cfg.silence_clips; ++c) {
    Rng rng = clip_rng(clip_counter++);
    AudioClip clip = render_silence(sil_len, cfg.sample_rate, rng);
    std::snprintf(name, sizeof(name), "silence_%03d.wav", c);
    write_wav_file((fs::path(out_dir) / name).string(), clip);
    result.manifest.entries.push_back(
        {(fs::path(out_dir) / name).string(), "", ClipKind::Silence});
    ++result.n_silence;
  }

  result.manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
  save_manifest(result.manifest_path, result.manifest);
  return result;
}

}  // namespace phonemeda
