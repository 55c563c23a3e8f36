#pragma once

#include <complex>
#include <string>
#include <vector>

#include "phonemeda/audio.hpp"
#include "phonemeda/error.hpp"

namespace phonemeda {

// Magnitude STFT grid, rows = frames, columns = FFT bins 0..frame_length/2.
struct SpectrogramMatrix {
  std::vector<double> values;  // row-major [n_frames x n_bins]
  int n_frames = 0;
  int n_bins = 0;
  int frame_length = 0;
  int hop = 0;
  int sample_rate = 0;

  double at(int frame, int bin) const { return values[static_cast<size_t>(frame) * n_bins + bin]; }
};

struct MelFilterBank {
  std::vector<double> weights;  // row-major [n_mel x n_bins]
  int n_mel = 0;
  int n_bins = 0;
  double f_min = 0.0;
  double f_max = 0.0;

  double at(int mel, int bin) const { return weights[static_cast<size_t>(mel) * n_bins + bin]; }
};

// Final model input: dB-scaled mel energies laid out time-major, which is the
// rotated orientation the network consumes (rows = frames, columns = mel bins).
struct LogMelSpectrogram {
  std::vector<float> values;  // row-major [n_frames x n_mel]
  int n_frames = 0;
  int n_mel = 0;

  float at(int frame, int mel) const { return values[static_cast<size_t>(frame) * n_mel + mel]; }
};

// In-place iterative radix-2 transform. Unnormalized forward; the inverse
// applies the 1/n factor. Length must be a power of two.
void fft(std::vector<std::complex<double>>& buffer, bool inverse);

// Hann-windowed magnitude STFT with hop = frame_length - overlap.
SpectrogramMatrix stft(const AudioClip& clip, int frame_length, int overlap);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters with centers equally spaced on the mel axis.
MelFilterBank mel_filterbank(int n_mel, double f_min, double f_max, int frame_length,
                             int sample_rate);

// Projects power (squared magnitude) through the bank, converts to dB with
// 10*log10(max(e, power_eps)) and clamps at floor_db.
LogMelSpectrogram log_mel(const SpectrogramMatrix& spec, const MelFilterBank& bank,
                          double floor_db = -100.0, double power_eps = 1e-10);

// Dims-prefixed little-endian float32 matrix dump (u32 rows, u32 cols, data).
void write_matrix_file(const std::string& path, const LogMelSpectrogram& m);
LogMelSpectrogram read_matrix_file(const std::string& path);

}  // namespace phonemeda
