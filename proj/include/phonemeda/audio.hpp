#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phonemeda/error.hpp"

namespace phonemeda {

// Mono PCM signal, samples normalized to [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 0;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// Decodes a RIFF/WAVE container holding 16-bit PCM. Multi-channel input is
// averaged down to mono; stored integers are divided by 32768.
AudioClip parse_wav(std::span<const uint8_t> bytes);

// Encodes a clip as mono 16-bit PCM WAV. Values are rounded to x*32768 and
// clamped to the int16 range, so parse -> encode -> parse is sample-exact.
std::vector<uint8_t> encode_wav(const AudioClip& clip);

AudioClip read_wav_file(const std::string& path);
void write_wav_file(const std::string& path, const AudioClip& clip);

// Integer-factor decimation: low-pass at 0.9x the target Nyquist
// (127-tap Hann-windowed sinc, unity DC gain), then keep every k-th sample.
// Output length is floor(len / k). A factor of 1 returns the clip unchanged.
AudioClip resample(const AudioClip& clip, int target_rate);

// Pads shorter clips with trailing zeros to exactly duration_s, slices longer
// ones into consecutive full windows and drops the partial remainder.
std::vector<AudioClip> normalize_duration(const AudioClip& clip, double duration_s);

}  // namespace phonemeda
