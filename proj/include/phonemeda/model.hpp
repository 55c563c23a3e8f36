#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "phonemeda/autodiff.hpp"
#include "phonemeda/dsp.hpp"
#include "phonemeda/error.hpp"
#include "phonemeda/rng.hpp"
#include "phonemeda/vocab.hpp"

namespace phonemeda {

// Control-token ids as a function of the total token count; phoneme ids
// occupy 0..T-6 (see Vocabulary).
inline int unk_id(int n_tokens) { return n_tokens - 5; }
inline int beg_id(int n_tokens) { return n_tokens - 4; }
inline int end_id(int n_tokens) { return n_tokens - 3; }
inline int bkg_id(int n_tokens) { return n_tokens - 2; }
inline int noise_id(int n_tokens) { return n_tokens - 1; }

struct ModelConfig {
  int n_mel = 80;
  int conv1_filters = 10;
  int conv2_filters = 1;
  int enc_hidden = 64;
  int dec_hidden = 128;
  int dense_hidden = 64;
  int n_tokens = 31;
  int max_decode_len = 0;  // 0 = derive from the padded sequence length

  void validate() const {
    if (n_mel < 1 || conv1_filters < 1 || enc_hidden < 1 || dense_hidden < 1 || n_tokens < 5 ||
        max_decode_len < 1)
      raise(Err::InvalidConfig, "model dimensions must be positive (and n_tokens >= 5)");
    if (conv2_filters != 1)
      raise(Err::InvalidConfig, "second conv block must reduce to a single channel");
    if (dec_hidden != 2 * enc_hidden)
      raise(Err::InvalidConfig, "decoder state is two concatenated encoder states, so "
                                "dec_hidden must equal 2*enc_hidden");
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

template <typename T>
struct GruCell {
  ad::Tensor<T> wz, wr, wn;  // input weights   [input x hidden]
  ad::Tensor<T> uz, ur, un;  // recurrent       [hidden x hidden]
  ad::Tensor<T> bz, br, bn;  // biases          [1 x hidden]

  void init(int input, int hidden) {
    wz = ad::Tensor<T>({input, hidden}, true);
    wr = ad::Tensor<T>({input, hidden}, true);
    wn = ad::Tensor<T>({input, hidden}, true);
    uz = ad::Tensor<T>({hidden, hidden}, true);
    ur = ad::Tensor<T>({hidden, hidden}, true);
    un = ad::Tensor<T>({hidden, hidden}, true);
    bz = ad::Tensor<T>({1, hidden}, true);
    br = ad::Tensor<T>({1, hidden}, true);
    bn = ad::Tensor<T>({1, hidden}, true);
  }
};

template <typename T>
struct ConvBlock {
  ad::Tensor<T> kernel;  // [Cout, Cin, 5, 1]
  ad::Tensor<T> bias;    // [Cout]
  ad::Tensor<T> gamma, beta;
  ad::BatchNormBuffers<T> running;

  void init(int c_in, int c_out) {
    kernel = ad::Tensor<T>({c_out, c_in, 5, 1}, true);
    bias = ad::Tensor<T>({c_out}, true);
    gamma = ad::Tensor<T>({c_out}, true);
    beta = ad::Tensor<T>({c_out}, true);
    running = ad::BatchNormBuffers<T>(c_out);
  }
};

}  // namespace detail

template <typename T>
struct ModelParamsT {
  ModelConfig config;

  detail::ConvBlock<T> conv1, conv2;
  detail::GruCell<T> enc1_fwd, enc1_bwd, enc2_fwd, enc2_bwd;
  detail::GruCell<T> dec1, dec2;
  ad::Tensor<T> dense1_w, dense1_b, dense2_w, dense2_b;

  // Trainable tensors in their fixed serialization order.
  std::vector<std::pair<std::string, ad::Tensor<T>*>> named_tensors();
  std::vector<std::pair<std::string, const ad::Tensor<T>*>> named_tensors() const;
  // Batch-norm running statistics, serialized but not trained.
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers();

  int64_t parameter_count() const;
  void zero_grads();
};

using ModelParams = ModelParamsT<float>;

template <typename T>
ModelParamsT<T> init_model(const ModelConfig& config, uint64_t seed);

// Model-side view of a spectrogram; float inputs are widened when T = double.
template <typename T>
struct SpecInput {
  int n_frames = 0;
  int n_mel = 0;
  std::vector<T> values;  // row-major [n_frames x n_mel]

  static SpecInput from(const LogMelSpectrogram& m) {
    SpecInput s;
    s.n_frames = m.n_frames;
    s.n_mel = m.n_mel;
    s.values.assign(m.values.begin(), m.values.end());
    return s;
  }

  static SpecInput zeros(int frames, int mel) {
    SpecInput s;
    s.n_frames = frames;
    s.n_mel = mel;
    s.values.assign(static_cast<size_t>(frames) * mel, T(0));
    return s;
  }
};

template <typename T>
struct EncoderOutputsT {
  ad::Var outputs;     // [n_frames x 2*enc_hidden]
  ad::Var outputs_t;   // transposed copy reused by every attention step
  ad::Var state1;      // [1 x dec_hidden]
  ad::Var state2;      // [1 x dec_hidden]
  int n_frames = 0;
};

struct ForwardOptions {
  bool training = false;
  bool update_bn_running = false;
  const TokenSequence* teacher = nullptr;
  double tf_prob = 0.0;
  bool stop_at_end = true;  // free-running only; teacher fixes the step count
  Rng* rng = nullptr;       // required when teacher && 0 < tf_prob < 1
};

template <typename T>
struct ForwardResultT {
  std::vector<ad::Var> step_logits;  // each [1 x n_tokens]
  ad::Var logit_matrix;              // [steps x n_tokens]
  std::vector<int> emitted;          // argmax per step
};

template <typename T>
EncoderOutputsT<T> encode(ad::Tape<T>& tape, const SpecInput<T>& spec, ModelParamsT<T>& params,
                          bool training, bool update_bn_running);

struct DecodeStep {
  ad::Var logits;     // [1 x n_tokens]
  ad::Var state1;     // updated decoder states
  ad::Var state2;
  ad::Var alignment;  // [1 x n_frames], softmax attention weights
  ad::Var context;    // [1 x dec_hidden]
};

template <typename T>
DecodeStep decode_step(ad::Tape<T>& tape, ad::Var prev_onehot, ad::Var state1, ad::Var state2,
                       const EncoderOutputsT<T>& enc, ModelParamsT<T>& params);

template <typename T>
ForwardResultT<T> forward(ad::Tape<T>& tape, const SpecInput<T>& spec, ModelParamsT<T>& params,
                          const ForwardOptions& options);

// --- serialization (float production format) ------------------------------

std::vector<uint8_t> serialize_model(const ModelParams& params);
ModelParams deserialize_model(std::span<const uint8_t> bytes);
void save_model_file(const std::string& path, const ModelParams& params);
ModelParams load_model_file(const std::string& path);

uint32_t crc32(std::span<const uint8_t> bytes);

// --- template implementation ----------------------------------------------

template <typename T>
std::vector<std::pair<std::string, ad::Tensor<T>*>> ModelParamsT<T>::named_tensors() {
  std::vector<std::pair<std::string, ad::Tensor<T>*>> out;
  auto conv = [&](const std::string& prefix, detail::ConvBlock<T>& b) {
    out.emplace_back(prefix + ".kernel", &b.kernel);
    out.emplace_back(prefix + ".bias", &b.bias);
    out.emplace_back(prefix + ".bn.gamma", &b.gamma);
    out.emplace_back(prefix + ".bn.beta", &b.beta);
  };
  auto gru = [&](const std::string& prefix, detail::GruCell<T>& c) {
    out.emplace_back(prefix + ".wz", &c.wz);
    out.emplace_back(prefix + ".wr", &c.wr);
    out.emplace_back(prefix + ".wn", &c.wn);
    out.emplace_back(prefix + ".uz", &c.uz);
    out.emplace_back(prefix + ".ur", &c.ur);
    out.emplace_back(prefix + ".un", &c.un);
    out.emplace_back(prefix + ".bz", &c.bz);
    out.emplace_back(prefix + ".br", &c.br);
    out.emplace_back(prefix + ".bn", &c.bn);
  };
  conv("conv1", conv1);
  conv("conv2", conv2);
  gru("enc1.fwd", enc1_fwd);
  gru("enc1.bwd", enc1_bwd);
  gru("enc2.fwd", enc2_fwd);
  gru("enc2.bwd", enc2_bwd);
  gru("dec1", dec1);
  gru("dec2", dec2);
  out.emplace_back("dense1.w", &dense1_w);
  out.emplace_back("dense1.b", &dense1_b);
  out.emplace_back("dense2.w", &dense2_w);
  out.emplace_back("dense2.b", &dense2_b);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const ad::Tensor<T>*>> ModelParamsT<T>::named_tensors() const {
  auto mutable_list = const_cast<ModelParamsT<T>*>(this)->named_tensors();
  std::vector<std::pair<std::string, const ad::Tensor<T>*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(name, t);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> ModelParamsT<T>::named_buffers() {
  return {
      {"conv1.bn.running_mean", &conv1.running.mean},
      {"conv1.bn.running_var", &conv1.running.var},
      {"conv2.bn.running_mean", &conv2.running.mean},
      {"conv2.bn.running_var", &conv2.running.var},
  };
}

template <typename T>
int64_t ModelParamsT<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += static_cast<int64_t>(t->numel());
  return n;
}

template <typename T>
void ModelParamsT<T>::zero_grads() {
  for (auto& [name, t] : named_tensors()) t->zero_grad();
}

template <typename T>
ModelParamsT<T> init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParamsT<T> p;
  p.config = config;

  p.conv1.init(1, config.conv1_filters);
  p.conv2.init(config.conv1_filters, config.conv2_filters);
  p.enc1_fwd.init(config.n_mel, config.enc_hidden);
  p.enc1_bwd.init(config.n_mel, config.enc_hidden);
  p.enc2_fwd.init(config.enc_hidden, config.enc_hidden);
  p.enc2_bwd.init(config.enc_hidden, config.enc_hidden);
  p.dec1.init(config.n_tokens, config.dec_hidden);
  p.dec2.init(config.dec_hidden, config.dec_hidden);
  p.dense1_w = ad::Tensor<T>({2 * config.dec_hidden, config.dense_hidden}, true);
  p.dense1_b = ad::Tensor<T>({1, config.dense_hidden}, true);
  p.dense2_w = ad::Tensor<T>({config.dense_hidden, config.n_tokens}, true);
  p.dense2_b = ad::Tensor<T>({1, config.n_tokens}, true);

  Rng rng(seed);
  auto fill = [&](ad::Tensor<T>& t, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  auto fill_gru = [&](detail::GruCell<T>& c, int input, int hidden) {
    fill(c.wz, input);
    fill(c.wr, input);
    fill(c.wn, input);
    fill(c.uz, hidden);
    fill(c.ur, hidden);
    fill(c.un, hidden);
    fill(c.bz, hidden);
    fill(c.br, hidden);
    fill(c.bn, hidden);
  };

  fill(p.conv1.kernel, 1 * 5);
  fill(p.conv1.bias, 1 * 5);
  for (auto& v : p.conv1.gamma.data) v = T(1);
  fill(p.conv2.kernel, config.conv1_filters * 5);
  fill(p.conv2.bias, config.conv1_filters * 5);
  for (auto& v : p.conv2.gamma.data) v = T(1);
  fill_gru(p.enc1_fwd, config.n_mel, config.enc_hidden);
  fill_gru(p.enc1_bwd, config.n_mel, config.enc_hidden);
  fill_gru(p.enc2_fwd, config.enc_hidden, config.enc_hidden);
  fill_gru(p.enc2_bwd, config.enc_hidden, config.enc_hidden);
  fill_gru(p.dec1, config.n_tokens, config.dec_hidden);
  fill_gru(p.dec2, config.dec_hidden, config.dec_hidden);
  fill(p.dense1_w, 2 * config.dec_hidden);
  fill(p.dense1_b, 2 * config.dec_hidden);
  fill(p.dense2_w, config.dense_hidden);
  fill(p.dense2_b, config.dense_hidden);
  return p;
}

namespace detail {

// One GRU step: h' = (1 - z) (.) h + z (.) tanh(x Wn + (r (.) h) Un + bn)
template <typename T>
ad::Var gru_step(ad::Tape<T>& tape, GruCell<T>& c, ad::Var x, ad::Var h) {
  using ad::Var;
  Var z = tape.sigmoid(tape.add(tape.add(tape.matmul(x, tape.leaf(c.wz)),
                                         tape.matmul(h, tape.leaf(c.uz))),
                                tape.leaf(c.bz)));
  Var r = tape.sigmoid(tape.add(tape.add(tape.matmul(x, tape.leaf(c.wr)),
                                         tape.matmul(h, tape.leaf(c.ur))),
                                tape.leaf(c.br)));
  Var cand = tape.tanh_op(tape.add(tape.add(tape.matmul(x, tape.leaf(c.wn)),
                                            tape.matmul(tape.hadamard(r, h), tape.leaf(c.un))),
                                   tape.leaf(c.bn)));
  Var one = tape.constant_fill(tape.shape(z), T(1));
  Var keep = tape.add(one, tape.scale(z, T(-1)));  // 1 - z
  return tape.add(tape.hadamard(keep, h), tape.hadamard(z, cand));
}

}  // namespace detail

template <typename T>
EncoderOutputsT<T> encode(ad::Tape<T>& tape, const SpecInput<T>& spec, ModelParamsT<T>& params,
                          bool training, bool update_bn_running) {
  using ad::Var;
  const ModelConfig& cfg = params.config;
  if (spec.n_mel != cfg.n_mel)
    raise(Err::DimensionMismatch, "spectrogram has " + std::to_string(spec.n_mel) +
                                      " mel bins, model expects " + std::to_string(cfg.n_mel));
  if (spec.n_frames < 1) raise(Err::DimensionMismatch, "spectrogram has no frames");

  const int frames = spec.n_frames;
  const int mel = spec.n_mel;

  // conv blocks; 5x1 kernels run along the time axis, padding keeps it intact
  Var img = tape.constant({1, frames, mel}, spec.values);
  // Normalization always uses the running statistics so that training-time
  // and deployed behavior match; single-clip batch statistics would bake a
  // per-clip signature into training that inference cannot reproduce. The
  // running estimates stream forward (momentum 0.1) while training.
  const bool update_stats = training && update_bn_running;
  auto conv_block = [&](Var input, detail::ConvBlock<T>& blk) {
    Var c = tape.conv2d(input, tape.leaf(blk.kernel), tape.leaf(blk.bias), 2, 0);
    Var a = tape.leaky_relu(c, T(0.01));
    return tape.batch_norm(a, tape.leaf(blk.gamma), tape.leaf(blk.beta), &blk.running,
                           /*use_batch_stats=*/false, update_stats);
  };
  Var feat = conv_block(conv_block(img, params.conv1), params.conv2);  // [1, frames, mel]

  // the single-channel image splits into per-frame columns
  std::vector<Var> columns(static_cast<size_t>(frames));
  for (int t = 0; t < frames; ++t)
    columns[static_cast<size_t>(t)] = tape.reshape(tape.slice(feat, 1, t, t + 1), {1, mel});

  const int hid = cfg.enc_hidden;
  Var h1f = tape.constant_fill({1, hid}, T(0));
  Var h1b = tape.constant_fill({1, hid}, T(0));
  Var h2f = tape.constant_fill({1, hid}, T(0));
  Var h2b = tape.constant_fill({1, hid}, T(0));

  std::vector<Var> out_fwd(static_cast<size_t>(frames)), out_bwd(static_cast<size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    h1f = detail::gru_step(tape, params.enc1_fwd, columns[static_cast<size_t>(t)], h1f);
    h2f = detail::gru_step(tape, params.enc2_fwd, h1f, h2f);
    out_fwd[static_cast<size_t>(t)] = h2f;
  }
  for (int t = frames - 1; t >= 0; --t) {
    h1b = detail::gru_step(tape, params.enc1_bwd, columns[static_cast<size_t>(t)], h1b);
    h2b = detail::gru_step(tape, params.enc2_bwd, h1b, h2b);
    out_bwd[static_cast<size_t>(t)] = h2b;
  }

  std::vector<Var> rows(static_cast<size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    std::array<Var, 2> pair{out_fwd[static_cast<size_t>(t)], out_bwd[static_cast<size_t>(t)]};
    rows[static_cast<size_t>(t)] = tape.concat(pair, 1);
  }

  EncoderOutputsT<T> enc;
  enc.n_frames = frames;
  enc.outputs = tape.concat(rows, 0);  // [frames x 2*hid]
  enc.outputs_t = tape.transpose(enc.outputs);
  std::array<Var, 2> s1{h1f, h1b};
  std::array<Var, 2> s2{h2f, h2b};
  enc.state1 = tape.concat(s1, 1);
  enc.state2 = tape.concat(s2, 1);
  return enc;
}

template <typename T>
DecodeStep decode_step(ad::Tape<T>& tape, ad::Var prev_onehot, ad::Var state1, ad::Var state2,
                       const EncoderOutputsT<T>& enc, ModelParamsT<T>& params) {
  using ad::Var;
  Var h1 = detail::gru_step(tape, params.dec1, prev_onehot, state1);
  Var h2 = detail::gru_step(tape, params.dec2, h1, state2);

  // Luong dot attention over the full encoder output sequence
  Var scores = tape.matmul(h2, enc.outputs_t);        // [1 x frames]
  Var alignment = tape.softmax(scores);
  Var context = tape.matmul(alignment, enc.outputs);  // [1 x dec_hidden]

  std::array<Var, 2> cat{context, h2};
  Var joined = tape.concat(cat, 1);  // [1 x 2*dec_hidden]
  Var hidden = tape.tanh_op(tape.add(tape.matmul(joined, tape.leaf(params.dense1_w)),
                                     tape.leaf(params.dense1_b)));
  Var logits = tape.tanh_op(tape.add(tape.matmul(hidden, tape.leaf(params.dense2_w)),
                                     tape.leaf(params.dense2_b)));
  return {logits, h1, h2, alignment, context};
}

template <typename T>
ForwardResultT<T> forward(ad::Tape<T>& tape, const SpecInput<T>& spec, ModelParamsT<T>& params,
                          const ForwardOptions& options) {
  using ad::Var;
  const ModelConfig& cfg = params.config;
  const int n_tok = cfg.n_tokens;
  const int beg = beg_id(n_tok);
  const int end = end_id(n_tok);

  if (options.teacher) {
    if (options.tf_prob < 0.0 || options.tf_prob > 1.0)
      raise(Err::InvalidConfig, "tf_prob must lie in [0, 1]");
    if (options.teacher->length() < 2)
      raise(Err::InvalidConfig, "teacher sequence needs at least BEG and one target");
    if (options.rng == nullptr && options.tf_prob > 0.0 && options.tf_prob < 1.0)
      raise(Err::InvalidConfig, "teacher forcing with 0 < tf_prob < 1 needs an rng");
  }

  EncoderOutputsT<T> enc =
      encode(tape, spec, params, options.training, options.update_bn_running);

  auto onehot = [&](int token) {
    std::vector<T> row(static_cast<size_t>(n_tok), T(0));
    row[static_cast<size_t>(token)] = T(1);
    return tape.constant({1, n_tok}, std::move(row));
  };

  const int n_steps = options.teacher ? options.teacher->length() - 1 : cfg.max_decode_len;

  ForwardResultT<T> result;
  Var state1 = enc.state1;
  Var state2 = enc.state2;
  int prev_token = beg;
  for (int i = 0; i < n_steps; ++i) {
    int input_token = prev_token;
    if (i == 0) {
      input_token = beg;  // the initialization token
    } else if (options.teacher) {
      const bool use_truth =
          options.tf_prob >= 1.0 || (options.tf_prob > 0.0 && options.rng->coin(options.tf_prob));
      if (use_truth) input_token = options.teacher->tokens[static_cast<size_t>(i)];
    }
    DecodeStep step = decode_step(tape, onehot(input_token), state1, state2, enc, params);
    state1 = step.state1;
    state2 = step.state2;
    result.step_logits.push_back(step.logits);
    const int emitted = tape.argmax(step.logits);
    result.emitted.push_back(emitted);
    prev_token = emitted;
    if (!options.teacher && options.stop_at_end && emitted == end) break;
  }

  result.logit_matrix = tape.concat(result.step_logits, 0);
  return result;
}

// Prediction as compared against padded ground truth: BEG plus the emitted ids.
template <typename T>
TokenSequence predicted_sequence(const ForwardResultT<T>& fwd, int n_tokens) {
  TokenSequence seq;
  seq.tokens.push_back(beg_id(n_tokens));
  seq.tokens.insert(seq.tokens.end(), fwd.emitted.begin(), fwd.emitted.end());
  return seq;
}

}  // namespace phonemeda
