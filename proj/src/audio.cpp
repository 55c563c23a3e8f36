#include "phonemeda/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace phonemeda {

namespace {

uint32_t read_u32(std::span<const uint8_t> b, size_t off) {
  return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
         (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}

uint16_t read_u16(std::span<const uint8_t> b, size_t off) {
  return static_cast<uint16_t>(b[off] | (b[off + 1] << 8));
}

bool tag_is(std::span<const uint8_t> b, size_t off, const char* tag) {
  return std::memcmp(b.data() + off, tag, 4) == 0;
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

}  // namespace

AudioClip parse_wav(std::span<const uint8_t> bytes) {
  if (bytes.size() < 12 || !tag_is(bytes, 0, "RIFF") || !tag_is(bytes, 8, "WAVE"))
    raise(Err::MalformedContainer, "not a RIFF/WAVE container");

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;

  size_t off = 12;
  while (off + 8 <= bytes.size()) {
    uint32_t chunk_len = read_u32(bytes, off + 4);
    if (off + 8 + chunk_len > bytes.size())
      raise(Err::MalformedContainer, "chunk extends past end of file");
    if (tag_is(bytes, off, "fmt ")) {
      if (chunk_len < 16) raise(Err::MalformedContainer, "fmt chunk too short");
      format = read_u16(bytes, off + 8);
      channels = read_u16(bytes, off + 10);
      rate = read_u32(bytes, off + 12);
      bits = read_u16(bytes, off + 22);
      have_fmt = true;
    } else if (tag_is(bytes, off, "data")) {
      data_off = off + 8;
      data_len = chunk_len;
    }
    off += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data_off == 0) raise(Err::MalformedContainer, "missing fmt or data chunk");
  if (format != 1) raise(Err::UnsupportedFormat, "only PCM (format 1) is supported");
  if (bits != 16) raise(Err::UnsupportedFormat, "only 16-bit samples are supported");
  if (channels == 0 || rate == 0) raise(Err::MalformedContainer, "invalid fmt fields");

  size_t frame_bytes = 2u * channels;
  size_t n_frames = data_len / frame_bytes;

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(n_frames);
  for (size_t i = 0; i < n_frames; ++i) {
    double acc = 0.0;
    for (uint16_t c = 0; c < channels; ++c) {
      auto raw = static_cast<int16_t>(read_u16(bytes, data_off + i * frame_bytes + 2 * c));
      acc += raw / 32768.0;
    }
    clip.samples[i] = acc / channels;
  }
  return clip;
}

std::vector<uint8_t> encode_wav(const AudioClip& clip) {
  const auto n = clip.samples.size();
  std::vector<uint8_t> out;
  out.reserve(44 + 2 * n);

  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, static_cast<uint32_t>(36 + 2 * n));
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<uint32_t>(clip.sample_rate * 2));  // byte rate
  put_u16(out, 2);                                            // block align
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, static_cast<uint32_t>(2 * n));
  for (double s : clip.samples) {
    auto v = static_cast<long>(std::lround(s * 32768.0));
    v = std::clamp(v, -32768l, 32767l);
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(v)));
  }
  return out;
}

AudioClip read_wav_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Err::MissingAudioFile, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

void write_wav_file(const std::string& path, const AudioClip& clip) {
  auto bytes = encode_wav(clip);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Symmetric Hann-windowed sinc, normalized to unity gain at DC.
std::vector<double> lowpass_taps(double cutoff_norm, int n_taps) {
  std::vector<double> h(n_taps);
  const int mid = n_taps / 2;
  double sum = 0.0;
  for (int k = 0; k < n_taps; ++k) {
    double t = k - mid;
    double sinc = (t == 0.0) ? 2.0 * cutoff_norm
                             : std::sin(2.0 * std::numbers::pi * cutoff_norm * t) /
                                   (std::numbers::pi * t);
    double win = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * k / (n_taps - 1)));
    h[k] = sinc * win;
    sum += h[k];
  }
  for (double& v : h) v /= sum;
  return h;
}

constexpr int kResampleTaps = 127;

}  // namespace

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0 || clip.sample_rate <= 0 || clip.sample_rate % target_rate != 0)
    raise(Err::NonIntegerFactor, "source rate " + std::to_string(clip.sample_rate) +
                                     " is not an integer multiple of " + std::to_string(target_rate));
  const int factor = clip.sample_rate / target_rate;
  if (factor == 1) return clip;

  // Cutoff sits 10% under the target Nyquist to leave a guard band.
  const double cutoff_norm = 0.45 * target_rate / clip.sample_rate;
  const auto taps = lowpass_taps(cutoff_norm, kResampleTaps);
  const int mid = kResampleTaps / 2;

  const auto& x = clip.samples;
  const auto n = static_cast<long>(x.size());
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(x.size() / static_cast<size_t>(factor));
  for (size_t m = 0; m < out.samples.size(); ++m) {
    const long center = static_cast<long>(m) * factor;
    double acc = 0.0;
    for (int k = 0; k < kResampleTaps; ++k) {
      long idx = center + mid - k;
      if (idx >= 0 && idx < n) acc += taps[k] * x[static_cast<size_t>(idx)];
    }
    out.samples[m] = acc;
  }
  return out;
}

std::vector<AudioClip> normalize_duration(const AudioClip& clip, double duration_s) {
  if (clip.samples.empty()) raise(Err::EmptyClip, "clip has no samples");
  const auto target = static_cast<size_t>(std::llround(duration_s * clip.sample_rate));
  if (target == 0) raise(Err::InvalidConfig, "duration too short for sample rate");

  std::vector<AudioClip> out;
  if (clip.samples.size() <= target) {
    AudioClip padded = clip;
    padded.samples.resize(target, 0.0);
    out.push_back(std::move(padded));
  } else {
    const size_t n_windows = clip.samples.size() / target;
    for (size_t w = 0; w < n_windows; ++w) {
      AudioClip piece;
      piece.sample_rate = clip.sample_rate;
      piece.samples.assign(clip.samples.begin() + static_cast<long>(w * target),
                           clip.samples.begin() + static_cast<long>((w + 1) * target));
      out.push_back(std::move(piece));
    }
  }
  return out;
}

}  // namespace phonemeda
