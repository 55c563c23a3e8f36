#include <array>
#include <cstring>
#include <fstream>

#include "phonemeda/model.hpp"

namespace phonemeda {

namespace {

constexpr std::array<uint8_t, 4> kMagic{'Y', 'V', 'X', 'M'};
constexpr uint32_t kVersion = 1;
constexpr const char* kConfigTensor = "__config__";

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  std::span<const uint8_t> bytes;
  size_t pos = 0;

  void need(size_t n) {
    if (pos + n > bytes.size()) raise(Err::TruncatedFile, "model file ends mid-record");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

void put_tensor(std::vector<uint8_t>& out, const std::string& name,
                const std::vector<int>& shape, std::span<const float> data) {
  put_u16(out, static_cast<uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(static_cast<uint8_t>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<uint32_t>(d));
  for (float v : data) put_f32(out, v);
}

}  // namespace

uint32_t crc32(std::span<const uint8_t> bytes) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (uint8_t b : bytes) crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> serialize_model(const ModelParams& params) {
  const ModelConfig& c = params.config;
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);

  auto& mutable_params = const_cast<ModelParams&>(params);
  auto tensors = params.named_tensors();
  auto buffers = mutable_params.named_buffers();
  put_u32(out, static_cast<uint32_t>(1 + tensors.size() + buffers.size()));

  const std::vector<float> config_vals = {
      static_cast<float>(c.n_mel),       static_cast<float>(c.conv1_filters),
      static_cast<float>(c.conv2_filters), static_cast<float>(c.enc_hidden),
      static_cast<float>(c.dec_hidden),  static_cast<float>(c.dense_hidden),
      static_cast<float>(c.n_tokens),    static_cast<float>(c.max_decode_len)};
  put_tensor(out, kConfigTensor, {static_cast<int>(config_vals.size())}, config_vals);

  for (const auto& [name, t] : tensors) put_tensor(out, name, t->shape, t->data);
  for (const auto& [name, buf] : buffers)
    put_tensor(out, name, {static_cast<int>(buf->size())}, *buf);

  put_u32(out, crc32(out));
  return out;
}

ModelParams deserialize_model(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
    raise(Err::BadMagic, "not a model file (bad magic)");
  if (bytes.size() < 16) raise(Err::TruncatedFile, "model file too short");

  const uint32_t stored_crc = crc32(bytes.subspan(0, bytes.size() - 4));
  Reader tail{bytes.subspan(bytes.size() - 4), 0};
  if (tail.u32() != stored_crc) raise(Err::ChecksumMismatch, "model file checksum mismatch");

  Reader r{bytes.subspan(0, bytes.size() - 4), 4};
  const uint32_t version = r.u32();
  if (version != kVersion)
    raise(Err::UnsupportedVersion, "model file version " + std::to_string(version));
  const uint32_t n_tensors = r.u32();

  struct Raw {
    std::vector<int> shape;
    std::vector<float> data;
  };
  std::vector<std::pair<std::string, Raw>> raw;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const uint16_t name_len = r.u16();
    std::string name = r.str(name_len);
    const uint8_t rank = r.u8();
    Raw t;
    size_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<int>(r.u32()));
      numel *= static_cast<size_t>(t.shape.back());
    }
    t.data.resize(numel);
    for (size_t k = 0; k < numel; ++k) t.data[k] = r.f32();
    raw.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != r.bytes.size())
    raise(Err::BadModelFile, "trailing bytes after the declared tensors");

  auto find = [&](const std::string& name) -> Raw* {
    for (auto& [n, t] : raw)
      if (n == name) return &t;
    return nullptr;
  };

  Raw* cfg_raw = find(kConfigTensor);
  if (cfg_raw == nullptr || cfg_raw->data.size() != 8)
    raise(Err::BadModelFile, "missing or malformed config record");
  ModelConfig cfg;
  cfg.n_mel = static_cast<int>(cfg_raw->data[0]);
  cfg.conv1_filters = static_cast<int>(cfg_raw->data[1]);
  cfg.conv2_filters = static_cast<int>(cfg_raw->data[2]);
  cfg.enc_hidden = static_cast<int>(cfg_raw->data[3]);
  cfg.dec_hidden = static_cast<int>(cfg_raw->data[4]);
  cfg.dense_hidden = static_cast<int>(cfg_raw->data[5]);
  cfg.n_tokens = static_cast<int>(cfg_raw->data[6]);
  cfg.max_decode_len = static_cast<int>(cfg_raw->data[7]);
  try {
    cfg.validate();
  } catch (const Error& e) {
    raise(Err::BadModelFile, std::string("config record invalid: ") + e.what());
  }

  ModelParams params = init_model<float>(cfg, 0);
  size_t used = 1;
  for (auto& [name, tensor] : params.named_tensors()) {
    Raw* t = find(name);
    if (t == nullptr) raise(Err::BadModelFile, "missing tensor " + name);
    if (t->shape != tensor->shape) raise(Err::BadModelFile, "shape mismatch for " + name);
    tensor->data = t->data;
    ++used;
  }
  for (auto& [name, buf] : params.named_buffers()) {
    Raw* t = find(name);
    if (t == nullptr) raise(Err::BadModelFile, "missing buffer " + name);
    if (t->data.size() != buf->size()) raise(Err::BadModelFile, "size mismatch for " + name);
    *buf = t->data;
    ++used;
  }
  if (used != raw.size()) raise(Err::BadModelFile, "model file contains unknown tensors");
  params.zero_grads();
  return params;
}

void save_model_file(const std::string& path, const ModelParams& params) {
  auto bytes = serialize_model(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelParams load_model_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Err::IoError, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace phonemeda
