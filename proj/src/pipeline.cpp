#include "phonemeda/pipeline.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "phonemeda/dsp.hpp"
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace phonemeda {

namespace {

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> known,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok |= it.key() == k;
    if (!ok) raise(Err::ParseError, "unknown config key '" + it.key() + "' in " + where);
  }
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(Err::ParseError, std::string("config is not valid JSON: ") + e.what());
  }

  PipelineConfig cfg;
  reject_unknown_keys(j,
                      {"sample_rate", "frame_length", "overlap", "n_mel", "f_min", "f_max",
                       "clip_seconds", "floor_db", "power_eps", "n_phonemes", "pad_to", "model",
                       "train", "synth"},
                      "config root");
  cfg.sample_rate = j.value("sample_rate", cfg.sample_rate);
  cfg.frame_length = j.value("frame_length", cfg.frame_length);
  cfg.overlap = j.value("overlap", cfg.overlap);
  cfg.n_mel = j.value("n_mel", cfg.n_mel);
  cfg.f_min = j.value("f_min", cfg.f_min);
  cfg.f_max = j.value("f_max", cfg.f_max);
  cfg.clip_seconds = j.value("clip_seconds", cfg.clip_seconds);
  cfg.floor_db = j.value("floor_db", cfg.floor_db);
  cfg.power_eps = j.value("power_eps", cfg.power_eps);
  cfg.n_phonemes = j.value("n_phonemes", cfg.n_phonemes);
  cfg.pad_to = j.value("pad_to", cfg.pad_to);

  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown_keys(m,
                        {"conv1_filters", "conv2_filters", "enc_hidden", "dec_hidden",
                         "dense_hidden", "max_decode_len"},
                        "model");
    cfg.model.conv1_filters = m.value("conv1_filters", cfg.model.conv1_filters);
    cfg.model.conv2_filters = m.value("conv2_filters", cfg.model.conv2_filters);
    cfg.model.enc_hidden = m.value("enc_hidden", cfg.model.enc_hidden);
    cfg.model.dec_hidden = m.value("dec_hidden", cfg.model.dec_hidden);
    cfg.model.dense_hidden = m.value("dense_hidden", cfg.model.dense_hidden);
    cfg.model.max_decode_len = m.value("max_decode_len", cfg.model.max_decode_len);
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown_keys(t,
                        {"batch_size", "epochs", "tf_prob", "seed", "test_fraction",
                         "learning_rate", "beta1", "beta2", "adam_eps", "loss_eps", "grad_clip"},
                        "train");
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.tf_prob = t.value("tf_prob", cfg.train.tf_prob);
    cfg.train.seed = t.value("seed", cfg.train.seed);
    cfg.train.test_fraction = t.value("test_fraction", cfg.train.test_fraction);
    cfg.train.adam.learning_rate = t.value("learning_rate", cfg.train.adam.learning_rate);
    cfg.train.adam.beta1 = t.value("beta1", cfg.train.adam.beta1);
    cfg.train.adam.beta2 = t.value("beta2", cfg.train.adam.beta2);
    cfg.train.adam.eps = t.value("adam_eps", cfg.train.adam.eps);
    cfg.train.loss_eps = t.value("loss_eps", cfg.train.loss_eps);
    cfg.train.grad_clip = t.value("grad_clip", cfg.train.grad_clip);
  }

  if (j.contains("synth")) {
    const json& s = j["synth"];
    reject_unknown_keys(s,
                        {"n_phonemes", "clips_per_phrase", "noise_clips", "silence_clips",
                         "sample_rate", "clip_seconds", "phrases"},
                        "synth");
    cfg.synth.n_phonemes = s.value("n_phonemes", cfg.synth.n_phonemes);
    cfg.synth.clips_per_phrase = s.value("clips_per_phrase", cfg.synth.clips_per_phrase);
    cfg.synth.noise_clips = s.value("noise_clips", cfg.synth.noise_clips);
    cfg.synth.silence_clips = s.value("silence_clips", cfg.synth.silence_clips);
    cfg.synth.sample_rate = s.value("sample_rate", cfg.synth.sample_rate);
    cfg.synth.clip_seconds = s.value("clip_seconds", cfg.synth.clip_seconds);
    if (s.contains("phrases")) cfg.synth.phrases = s["phrases"].get<std::vector<std::vector<int>>>();
  }

  cfg.validate();
  return cfg;
}

std::string PipelineConfig::to_json_text() const {
  json j{
      {"sample_rate", sample_rate},
      {"frame_length", frame_length},
      {"overlap", overlap},
      {"n_mel", n_mel},
      {"f_min", f_min},
      {"f_max", f_max},
      {"clip_seconds", clip_seconds},
      {"floor_db", floor_db},
      {"power_eps", power_eps},
      {"n_phonemes", n_phonemes},
      {"pad_to", pad_to},
      {"model",
       {{"conv1_filters", model.conv1_filters},
        {"conv2_filters", model.conv2_filters},
        {"enc_hidden", model.enc_hidden},
        {"dec_hidden", model.dec_hidden},
        {"dense_hidden", model.dense_hidden},
        {"max_decode_len", model.max_decode_len}}},
      {"train",
       {{"batch_size", train.batch_size},
        {"epochs", train.epochs},
        {"tf_prob", train.tf_prob},
        {"seed", train.seed},
        {"test_fraction", train.test_fraction},
        {"learning_rate", train.adam.learning_rate},
        {"beta1", train.adam.beta1},
        {"beta2", train.adam.beta2},
        {"adam_eps", train.adam.eps},
        {"loss_eps", train.loss_eps},
        {"grad_clip", train.grad_clip}}},
      {"synth",
       {{"n_phonemes", synth.n_phonemes},
        {"clips_per_phrase", synth.clips_per_phrase},
        {"noise_clips", synth.noise_clips},
        {"silence_clips", synth.silence_clips},
        {"sample_rate", synth.sample_rate},
        {"clip_seconds", synth.clip_seconds},
        {"phrases", synth.phrases}}},
  };
  return j.dump(2) + "\n";
}

void PipelineConfig::validate() const {
  if (sample_rate <= 0) raise(Err::InvalidConfig, "sample_rate must be positive");
  if (frame_length <= 0 || !std::has_single_bit(static_cast<unsigned>(frame_length)))
    raise(Err::InvalidConfig, "frame_length must be a power of two");
  if (overlap < 0 || overlap >= frame_length)
    raise(Err::InvalidConfig, "overlap must satisfy 0 <= overlap < frame_length");
  if (f_max > sample_rate / 2.0) raise(Err::InvalidConfig, "f_max exceeds the Nyquist frequency");
  if (!(f_min >= 0.0 && f_min < f_max)) raise(Err::InvalidConfig, "need 0 <= f_min < f_max");
  if (n_mel < 1) raise(Err::InvalidConfig, "n_mel must be positive");
  if (clip_seconds <= 0.0) raise(Err::InvalidConfig, "clip_seconds must be positive");
  if (clip_samples() < frame_length)
    raise(Err::InvalidConfig, "clip shorter than one analysis frame");
  if (n_phonemes < 1) raise(Err::InvalidConfig, "n_phonemes must be positive");
  if (pad_to != 0 && pad_to < 3) raise(Err::InvalidConfig, "pad_to must be 0 (auto) or >= 3");
}

ModelConfig PipelineConfig::resolved_model(int pad_to_resolved) const {
  ModelConfig m = model;
  m.n_mel = n_mel;
  m.n_tokens = n_phonemes + 5;
  if (m.max_decode_len <= 0) m.max_decode_len = std::max(2, pad_to_resolved - 1);
  m.validate();
  return m;
}

PipelineConfig PipelineConfig::desk_default() {
  PipelineConfig cfg;
  cfg.n_phonemes = 12;
  cfg.train.batch_size = 32;
  cfg.train.epochs = 60;
  cfg.train.seed = 42;
  return cfg;
}

int resolve_thread_count(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("PHONEMEDA_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

namespace {

std::string tokens_for_entry(const ManifestEntry& entry) {
  switch (entry.kind) {
    case ClipKind::Speech: return entry.phonemes;
    case ClipKind::Noise: return "NOISE";
    case ClipKind::Silence: return "BKG";
  }
  return entry.phonemes;
}

int count_symbols(const std::string& transcription) {
  std::istringstream ss(transcription);
  std::string sym;
  int n = 0;
  while (ss >> sym) ++n;
  return n;
}

}  // namespace

PreprocessReport preprocess_dataset(const std::string& manifest_path, const PipelineConfig& cfg,
                                    const std::string& out_dir, int n_threads) {
  cfg.validate();
  // Missing audio surfaces as a per-entry failure instead of aborting the run.
  DatasetManifest manifest = load_manifest(manifest_path, /*validate_paths=*/false);
  fs::create_directories(out_dir);

  int pad_to = cfg.pad_to;
  if (pad_to == 0) {
    int longest = 1;  // non-speech sequences carry one token
    for (const auto& e : manifest.entries)
      longest = std::max(longest, count_symbols(tokens_for_entry(e)));
    pad_to = longest + 2;
  }

  const Vocabulary vocab = Vocabulary::with_generic_phonemes(cfg.n_phonemes);
  const MelFilterBank bank =
      mel_filterbank(cfg.n_mel, cfg.f_min, cfg.f_max, cfg.frame_length, cfg.sample_rate);

  struct Slot {
    bool failed = false;
    std::string message;
    std::vector<std::string> spec_files;  // relative to out_dir
    TokenSequence tokens;
  };
  std::vector<Slot> slots(manifest.entries.size());

  auto process_entry = [&](size_t i) {
    Slot& slot = slots[i];
    const ManifestEntry& entry = manifest.entries[i];
    try {
      AudioClip clip = read_wav_file(entry.path);
      clip = resample(clip, cfg.sample_rate);
      auto pieces = normalize_duration(clip, cfg.clip_seconds);
      slot.tokens = encode_tokens(tokens_for_entry(entry), vocab, pad_to);
      for (size_t s = 0; s < pieces.size(); ++s) {
        SpectrogramMatrix spec = stft(pieces[s], cfg.frame_length, cfg.overlap);
        LogMelSpectrogram mel = log_mel(spec, bank, cfg.floor_db, cfg.power_eps);
        char name[64];
        std::snprintf(name, sizeof(name), "spec_%05zu_%02zu.f32mat", i, s);
        write_matrix_file((fs::path(out_dir) / name).string(), mel);
        slot.spec_files.emplace_back(name);
      }
    } catch (const Error& e) {
      slot.failed = true;
      slot.message = e.what();
    }
  };

  const int workers = resolve_thread_count(n_threads);
  if (workers <= 1 || manifest.entries.size() < 2) {
    for (size_t i = 0; i < manifest.entries.size(); ++i) process_entry(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < manifest.entries.size(); i = next.fetch_add(1))
          process_entry(i);
      });
    for (auto& t : pool) t.join();
  }

  PreprocessReport report;
  report.pad_to = pad_to;
  report.index_path = (fs::path(out_dir) / "index.jsonl").string();
  std::ofstream index(report.index_path, std::ios::trunc);
  if (!index) raise(Err::IoError, "cannot write " + report.index_path);
  index << json{{"pad_to", pad_to},
                {"n_phonemes", cfg.n_phonemes},
                {"n_mel", cfg.n_mel},
                {"sample_rate", cfg.sample_rate},
                {"frame_length", cfg.frame_length},
                {"overlap", cfg.overlap}}
               .dump()
        << '\n';

  for (size_t i = 0; i < slots.size(); ++i) {
    const Slot& slot = slots[i];
    const ManifestEntry& entry = manifest.entries[i];
    if (slot.failed) {
      ++report.n_failed;
      report.failures.push_back({entry.path, slot.message});
      continue;
    }
    ++report.n_ok;
    for (const auto& spec_file : slot.spec_files) {
      index << json{{"spec", spec_file},
                    {"tokens", slot.tokens.tokens},
                    {"kind", kind_name(entry.kind)},
                    {"phonemes", entry.phonemes}}
                   .dump()
            << '\n';
      ++report.n_spectrograms;
    }
  }
  return report;
}

LoadedDataset load_processed(const std::string& index_path) {
  std::ifstream f(index_path);
  if (!f) raise(Err::IoError, "cannot open " + index_path);
  const fs::path base = fs::path(index_path).parent_path();

  LoadedDataset ds;
  std::string line;
  if (!std::getline(f, line)) raise(Err::ParseError, "processed index is empty");
  try {
    json header = json::parse(line);
    ds.pad_to = header.at("pad_to").get<int>();
    ds.n_phonemes = header.at("n_phonemes").get<int>();
    ds.n_mel = header.at("n_mel").get<int>();
  } catch (const json::exception& e) {
    raise(Err::ParseError, std::string("bad index header: ") + e.what());
  }

  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json rec = json::parse(line);
      TrainingExample ex;
      ex.spec = SpecInput<float>::from(read_matrix_file((base / rec.at("spec").get<std::string>()).string()));
      ex.tokens.tokens = rec.at("tokens").get<std::vector<int>>();
      ex.kind = kind_from_name(rec.at("kind").get<std::string>());
      ex.phrase = rec.value("phonemes", std::string());
      ds.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      raise(Err::ParseError, "index line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

TrainReport train_pipeline(const std::string& index_path, const PipelineConfig& cfg,
                           const std::string& out_dir) {
  LoadedDataset ds = load_processed(index_path);
  if (ds.n_phonemes != cfg.n_phonemes)
    raise(Err::InvalidConfig, "config n_phonemes does not match the processed index");
  ModelConfig model_cfg = cfg.resolved_model(ds.pad_to);

  TrainResult result = train(ds.examples, model_cfg, cfg.train);

  fs::create_directories(out_dir);
  TrainReport report;
  report.model_path = (fs::path(out_dir) / "model.yvx").string();
  report.history_path = (fs::path(out_dir) / "history.csv").string();
  save_model_file(report.model_path, result.params);

  std::ofstream hist(report.history_path, std::ios::trunc);
  if (!hist) raise(Err::IoError, "cannot write " + report.history_path);
  hist << "epoch,mean_loss,weighted_accuracy,per\n";
  for (const auto& row : result.history)
    hist << row.epoch << ',' << row.mean_loss << ',' << row.weighted_accuracy << ',' << row.per
         << '\n';

  report.param_count = result.params.parameter_count();
  report.epochs = static_cast<int>(result.history.size());
  report.n_train = static_cast<int>(result.train_indices.size());
  report.n_test = static_cast<int>(result.test_indices.size());
  if (!result.history.empty()) {
    report.final_loss = result.history.back().mean_loss;
    report.test_weighted_accuracy = result.history.back().weighted_accuracy;
    report.test_per = result.history.back().per;
  }
  return report;
}

EvalReport evaluate_pipeline(const std::string& model_path, const std::string& index_path,
                             const PipelineConfig& cfg, const std::string& subset,
                             const std::string& out_dir) {
  if (subset != "test" && subset != "train" && subset != "all")
    raise(Err::InvalidConfig, "subset must be test, train or all");

  ModelParams params = load_model_file(model_path);
  LoadedDataset ds = load_processed(index_path);
  if (params.config.n_tokens != ds.n_phonemes + 5)
    raise(Err::DimensionMismatch, "model token count does not match the processed index");
  if (params.config.n_mel != ds.n_mel)
    raise(Err::DimensionMismatch, "model mel width does not match the processed index");

  std::vector<std::string> keys;
  keys.reserve(ds.examples.size());
  for (const auto& ex : ds.examples) keys.push_back(stratum_key(ex.kind, ex.phrase));
  auto [train_idx, test_idx] =
      stratified_split_indices(keys, cfg.train.test_fraction, cfg.train.seed);

  std::vector<TokenSequence> train_seqs;
  for (size_t i : train_idx) train_seqs.push_back(ds.examples[i].tokens);
  LossWeights weights = compute_loss_weights(train_seqs, params.config.n_tokens);

  const std::vector<size_t>* chosen = &test_idx;
  std::vector<size_t> all_idx;
  if (subset == "train") {
    chosen = &train_idx;
  } else if (subset == "all") {
    all_idx.resize(ds.examples.size());
    for (size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
    chosen = &all_idx;
  }

  const int n_tok = params.config.n_tokens;
  std::vector<EvalPair> pairs;
  pairs.reserve(chosen->size());
  for (size_t idx : *chosen) {
    const auto& ex = ds.examples[idx];
    ad::Tape<float> tape;
    ForwardOptions opt;
    opt.stop_at_end = false;
    auto fwd = forward(tape, ex.spec, params, opt);
    pairs.push_back({ex.tokens, predicted_sequence(fwd, n_tok)});
  }

  EvalReport report;
  report.n_pairs = static_cast<int>(pairs.size());
  for (const auto& pair : pairs) {
    report.weighted_accuracy += weighted_accuracy(pair, weights);
    report.per += per(pair, beg_id(n_tok), end_id(n_tok));
  }
  if (!pairs.empty()) {
    report.weighted_accuracy /= static_cast<double>(pairs.size());
    report.per /= static_cast<double>(pairs.size());
  }

  fs::create_directories(out_dir);
  report.metrics_path = (fs::path(out_dir) / "metrics.json").string();
  report.confusion_path = (fs::path(out_dir) / "confusion.csv").string();

  std::ofstream mf(report.metrics_path, std::ios::trunc);
  if (!mf) raise(Err::IoError, "cannot write " + report.metrics_path);
  mf << json{{"weighted_accuracy", report.weighted_accuracy},
             {"per", report.per},
             {"n_pairs", report.n_pairs}}
            .dump(2)
     << '\n';

  ConfusionMatrix cm = confusion_matrix(pairs, n_tok, beg_id(n_tok), end_id(n_tok));
  write_confusion_csv(report.confusion_path, cm, Vocabulary::with_generic_phonemes(ds.n_phonemes));
  return report;
}

InferReport infer_file(const std::string& model_path, const std::string& wav_path,
                       const PipelineConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };

  ModelParams params = load_model_file(model_path);
  if (params.config.n_mel != cfg.n_mel)
    raise(Err::DimensionMismatch, "model mel width does not match the pipeline config");
  const Vocabulary vocab = Vocabulary::with_generic_phonemes(params.config.n_tokens - 5);

  AudioClip clip = read_wav_file(wav_path);

  const auto t0 = clock::now();
  clip = resample(clip, cfg.sample_rate);
  const auto t1 = clock::now();

  auto pieces = normalize_duration(clip, cfg.clip_seconds);
  const MelFilterBank bank =
      mel_filterbank(cfg.n_mel, cfg.f_min, cfg.f_max, cfg.frame_length, cfg.sample_rate);
  std::vector<LogMelSpectrogram> mels;
  mels.reserve(pieces.size());
  for (const auto& piece : pieces)
    mels.push_back(log_mel(stft(piece, cfg.frame_length, cfg.overlap), bank, cfg.floor_db,
                           cfg.power_eps));
  const auto t2 = clock::now();

  InferReport report;
  report.n_slices = static_cast<int>(mels.size());
  std::string decoded;
  for (const auto& mel : mels) {
    ad::Tape<float> tape;
    ForwardOptions opt;  // greedy free-running decode, stops at END
    auto fwd = forward(tape, SpecInput<float>::from(mel), params, opt);
    TokenSequence seq = predicted_sequence(fwd, params.config.n_tokens);
    const std::string text = decode_tokens(seq, vocab);
    if (!text.empty()) {
      if (!decoded.empty()) decoded += ' ';
      decoded += text;
    }
  }
  const auto t3 = clock::now();

  report.decoded = decoded;
  report.resample_ms = ms(t0, t1);
  report.spectrogram_ms = ms(t1, t2);
  report.forward_ms = ms(t2, t3);
  return report;
}

VerifyReport verify_parity(const std::string& model_a_path, const std::string& model_b_path,
                           double tolerance, const PipelineConfig& cfg) {
  ModelParams a = load_model_file(model_a_path);
  ModelParams b = load_model_file(model_b_path);
  if (!(a.config == b.config))
    raise(Err::DimensionMismatch, "model configurations differ structurally");

  VerifyReport report;
  report.n_frames = cfg.frames_per_clip();
  const auto zero = SpecInput<float>::zeros(report.n_frames, a.config.n_mel);

  auto run = [&](ModelParams& p) {
    ad::Tape<float> tape;
    ForwardOptions opt;
    opt.stop_at_end = false;  // full-length rollout keeps the comparison aligned
    auto fwd = forward(tape, zero, p, opt);
    std::vector<std::vector<float>> columns;
    columns.reserve(fwd.step_logits.size());
    for (ad::Var v : fwd.step_logits) columns.push_back(tape.value(v));
    return columns;
  };
  const auto cols_a = run(a);
  const auto cols_b = run(b);

  report.n_columns = static_cast<int>(cols_a.size());
  double max_diff = 0.0;
  for (size_t c = 0; c < cols_a.size(); ++c)
    for (size_t i = 0; i < cols_a[c].size(); ++i)
      max_diff = std::max(max_diff,
                          std::abs(static_cast<double>(cols_a[c][i]) - cols_b[c][i]));
  report.max_abs_diff = max_diff;
  report.pass = cols_a.size() == cols_b.size() && max_diff <= tolerance;
  return report;
}

SynthReport synth_pipeline(const PipelineConfig& cfg, uint64_t seed, const std::string& out_dir) {
  SynthResult result = synth_generate(cfg.synth, seed, out_dir);

  // A config wired for this corpus: its phoneme count plus desk-scale training.
  PipelineConfig desk = PipelineConfig::desk_default();
  desk.n_phonemes = cfg.synth.n_phonemes;
  desk.synth = cfg.synth;
  desk.train = cfg.train.epochs == PipelineConfig().train.epochs &&
                       cfg.train.batch_size == PipelineConfig().train.batch_size
                   ? desk.train
                   : cfg.train;

  SynthReport report;
  report.manifest_path = result.manifest_path;
  report.config_path = (fs::path(out_dir) / "config.json").string();
  report.n_speech = result.n_speech;
  report.n_noise = result.n_noise;
  report.n_silence = result.n_silence;

  std::ofstream f(report.config_path, std::ios::trunc);
  if (!f) raise(Err::IoError, "cannot write " + report.config_path);
  f << desk.to_json_text();
  return report;
}

}  // namespace phonemeda
