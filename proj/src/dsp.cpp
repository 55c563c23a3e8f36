#include "phonemeda/dsp.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>

namespace phonemeda {

void fft(std::vector<std::complex<double>>& buffer, bool inverse) {
  const size_t n = buffer.size();
  if (n == 0 || !std::has_single_bit(n))
    raise(Err::NonPowerOfTwoLength, "fft length " + std::to_string(n) + " is not a power of two");
  if (n == 1) return;

  // bit-reversal permutation
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buffer[i], buffer[j]);
  }

  const double sign = inverse ? 1.0 : -1.0;
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        auto u = buffer[i + k];
        auto v = buffer[i + k + len / 2] * w;
        buffer[i + k] = u + v;
        buffer[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }

  if (inverse) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (auto& c : buffer) c *= inv_n;
  }
}

SpectrogramMatrix stft(const AudioClip& clip, int frame_length, int overlap) {
  if (frame_length <= 0 || !std::has_single_bit(static_cast<unsigned>(frame_length)))
    raise(Err::NonPowerOfTwoLength, "frame length must be a power of two");
  if (overlap < 0 || overlap >= frame_length)
    raise(Err::InvalidRange, "overlap must satisfy 0 <= overlap < frame_length");
  const auto len = static_cast<long>(clip.samples.size());
  if (len < frame_length)
    raise(Err::ClipTooShort, "clip of " + std::to_string(len) + " samples is shorter than a frame");

  const int hop = frame_length - overlap;
  const int n_frames = static_cast<int>((len - frame_length) / hop) + 1;
  const int n_bins = frame_length / 2 + 1;

  // periodic Hann window
  std::vector<double> window(static_cast<size_t>(frame_length));
  for (int i = 0; i < frame_length; ++i)
    window[static_cast<size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / frame_length));

  SpectrogramMatrix out;
  out.n_frames = n_frames;
  out.n_bins = n_bins;
  out.frame_length = frame_length;
  out.hop = hop;
  out.sample_rate = clip.sample_rate;
  out.values.resize(static_cast<size_t>(n_frames) * n_bins);

  std::vector<std::complex<double>> buf(static_cast<size_t>(frame_length));
  for (int f = 0; f < n_frames; ++f) {
    const size_t start = static_cast<size_t>(f) * hop;
    for (int i = 0; i < frame_length; ++i)
      buf[static_cast<size_t>(i)] = clip.samples[start + static_cast<size_t>(i)] *
                                    window[static_cast<size_t>(i)];
    fft(buf, false);
    for (int b = 0; b < n_bins; ++b)
      out.values[static_cast<size_t>(f) * n_bins + b] = std::abs(buf[static_cast<size_t>(b)]);
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterBank mel_filterbank(int n_mel, double f_min, double f_max, int frame_length,
                             int sample_rate) {
  if (n_mel < 1) raise(Err::InvalidRange, "need at least one mel filter");
  if (!(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0))
    raise(Err::InvalidRange, "require 0 <= f_min < f_max <= sample_rate/2");

  const int n_bins = frame_length / 2 + 1;
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);

  // n_mel + 2 equally spaced mel points: feet and centers of the triangles.
  std::vector<double> hz_points(static_cast<size_t>(n_mel) + 2);
  for (int i = 0; i < n_mel + 2; ++i)
    hz_points[static_cast<size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mel + 1));

  MelFilterBank bank;
  bank.n_mel = n_mel;
  bank.n_bins = n_bins;
  bank.f_min = f_min;
  bank.f_max = f_max;
  bank.weights.assign(static_cast<size_t>(n_mel) * n_bins, 0.0);

  const double bin_hz = static_cast<double>(sample_rate) / frame_length;
  for (int m = 0; m < n_mel; ++m) {
    const double left = hz_points[static_cast<size_t>(m)];
    const double center = hz_points[static_cast<size_t>(m) + 1];
    const double right = hz_points[static_cast<size_t>(m) + 2];
    for (int b = 0; b < n_bins; ++b) {
      const double f = b * bin_hz;
      double w = 0.0;
      if (f > left && f < center)
        w = (f - left) / (center - left);
      else if (f >= center && f < right)
        w = (right - f) / (right - center);
      bank.weights[static_cast<size_t>(m) * n_bins + b] = w;
    }
    // Guard against a filter so narrow it straddles no bin: claim its center.
    bool any = false;
    for (int b = 0; b < n_bins; ++b) any |= bank.at(m, b) > 0.0;
    if (!any) {
      int cb = static_cast<int>(std::lround(center / bin_hz));
      cb = std::clamp(cb, 0, n_bins - 1);
      bank.weights[static_cast<size_t>(m) * n_bins + cb] = 1.0;
    }
  }
  return bank;
}

LogMelSpectrogram log_mel(const SpectrogramMatrix& spec, const MelFilterBank& bank,
                          double floor_db, double power_eps) {
  if (bank.n_bins != spec.n_bins)
    raise(Err::DimensionMismatch, "filterbank has " + std::to_string(bank.n_bins) +
                                      " bins, spectrogram has " + std::to_string(spec.n_bins));

  LogMelSpectrogram out;
  out.n_frames = spec.n_frames;
  out.n_mel = bank.n_mel;
  out.values.resize(static_cast<size_t>(spec.n_frames) * bank.n_mel);

  for (int f = 0; f < spec.n_frames; ++f) {
    for (int m = 0; m < bank.n_mel; ++m) {
      double energy = 0.0;
      for (int b = 0; b < spec.n_bins; ++b) {
        const double mag = spec.at(f, b);
        energy += mag * mag * bank.at(m, b);
      }
      double db = 10.0 * std::log10(std::max(energy, power_eps));
      out.values[static_cast<size_t>(f) * bank.n_mel + m] =
          static_cast<float>(std::max(db, floor_db));
    }
  }
  return out;
}

void write_matrix_file(const std::string& path, const LogMelSpectrogram& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write " + path);
  const uint32_t rows = static_cast<uint32_t>(m.n_frames);
  const uint32_t cols = static_cast<uint32_t>(m.n_mel);
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  f.write(reinterpret_cast<const char*>(m.values.data()),
          static_cast<std::streamsize>(m.values.size() * sizeof(float)));
}

LogMelSpectrogram read_matrix_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Err::IoError, "cannot open " + path);
  uint32_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  if (!f) raise(Err::TruncatedFile, "matrix header truncated in " + path);
  LogMelSpectrogram m;
  m.n_frames = static_cast<int>(rows);
  m.n_mel = static_cast<int>(cols);
  m.values.resize(static_cast<size_t>(rows) * cols);
  f.read(reinterpret_cast<char*>(m.values.data()),
         static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (!f) raise(Err::TruncatedFile, "matrix data truncated in " + path);
  return m;
}

}  // namespace phonemeda
