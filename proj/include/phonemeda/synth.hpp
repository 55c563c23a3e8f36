#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phonemeda/audio.hpp"
#include "phonemeda/rng.hpp"
#include "phonemeda/vocab.hpp"

namespace phonemeda {

// Desk-scale stand-in for a recorded corpus. Each phoneme renders as a pair
// of sinusoids at fixed per-phoneme formant frequencies; phrases concatenate
// phoneme renderings; noise clips are seeded colored noise and silence clips
// stay near zero. Identical seeds reproduce identical bytes.
struct SynthConfig {
  int n_phonemes = 12;
  std::vector<std::vector<int>> phrases;  // phoneme-id sequences
  int clips_per_phrase = 23;
  int noise_clips = 60;        // rendered at 2x clip_seconds so slicing is exercised
  int silence_clips = 80;
  int sample_rate = 44100;
  double clip_seconds = 2.0;   // nominal span used to size noise/silence clips

  // formant pairs per phoneme id; filled with defaults when empty
  std::vector<std::pair<double, double>> formants;

  static SynthConfig desk_default();
  void validate() const;
};

struct SynthResult {
  DatasetManifest manifest;
  std::string manifest_path;
  int n_speech = 0;
  int n_noise = 0;
  int n_silence = 0;
};

// Renders one phoneme (two sinusoids, 120-200 ms, seeded jitter in pitch,
// amplitude and duration). Exposed for tests that inspect single renderings.
AudioClip render_phoneme(double f1, double f2, int sample_rate, Rng& rng);

// Writes WAV files plus manifest.jsonl under out_dir and returns the manifest.
SynthResult synth_generate(const SynthConfig& config, uint64_t seed, const std::string& out_dir);

}  // namespace phonemeda
