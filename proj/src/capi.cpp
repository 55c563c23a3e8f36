#include "phonemeda.h"

#include <cstring>
#include <string>

#include "phonemeda/pipeline.hpp"
#include <json.hpp>

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

int map_error(phonemeda::Err code) {
  using phonemeda::Err;
  switch (code) {
    case Err::None: return PDA_OK;
    case Err::MalformedContainer: return PDA_ERR_MALFORMED_CONTAINER;
    case Err::UnsupportedFormat: return PDA_ERR_UNSUPPORTED_FORMAT;
    case Err::NonIntegerFactor: return PDA_ERR_NON_INTEGER_FACTOR;
    case Err::EmptyClip: return PDA_ERR_EMPTY_CLIP;
    case Err::NonPowerOfTwoLength: return PDA_ERR_NON_POWER_OF_TWO;
    case Err::ClipTooShort: return PDA_ERR_CLIP_TOO_SHORT;
    case Err::InvalidRange: return PDA_ERR_INVALID_RANGE;
    case Err::DimensionMismatch: return PDA_ERR_DIMENSION_MISMATCH;
    case Err::SequenceTooLong: return PDA_ERR_SEQUENCE_TOO_LONG;
    case Err::ParseError: return PDA_ERR_PARSE;
    case Err::MissingAudioFile: return PDA_ERR_MISSING_AUDIO_FILE;
    case Err::InvalidConfig: return PDA_ERR_INVALID_CONFIG;
    case Err::DatasetTooSmall: return PDA_ERR_DATASET_TOO_SMALL;
    case Err::ShapeMismatch: return PDA_ERR_SHAPE_MISMATCH;
    case Err::NonScalarLoss: return PDA_ERR_NON_SCALAR_LOSS;
    case Err::BadMagic: return PDA_ERR_BAD_MAGIC;
    case Err::UnsupportedVersion: return PDA_ERR_UNSUPPORTED_VERSION;
    case Err::TruncatedFile: return PDA_ERR_TRUNCATED_FILE;
    case Err::ChecksumMismatch: return PDA_ERR_CHECKSUM_MISMATCH;
    case Err::BadModelFile: return PDA_ERR_BAD_MODEL_FILE;
    case Err::EmptyTrainingSet: return PDA_ERR_EMPTY_TRAINING_SET;
    case Err::NonOneHotTarget: return PDA_ERR_NON_ONE_HOT_TARGET;
    case Err::MissingGradient: return PDA_ERR_MISSING_GRADIENT;
    case Err::EmptyGroundTruth: return PDA_ERR_EMPTY_GROUND_TRUTH;
    case Err::TokenOutOfRange: return PDA_ERR_TOKEN_OUT_OF_RANGE;
    case Err::IoError: return PDA_ERR_IO;
  }
  return PDA_ERR_INTERNAL;
}

char* alloc_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return PDA_OK;
  } catch (const phonemeda::Error& e) {
    g_last_error = e.what();
    return map_error(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PDA_ERR_INTERNAL;
  }
}

phonemeda::PipelineConfig parse_config(const char* config_json) {
  if (config_json == nullptr || config_json[0] == '\0') return phonemeda::PipelineConfig{};
  return phonemeda::PipelineConfig::from_json_text(config_json);
}

int require(bool ok, const char* message) {
  if (ok) return PDA_OK;
  g_last_error = message;
  return PDA_ERR_INVALID_ARGUMENT;
}

}  // namespace

struct pda_model_s {
  phonemeda::ModelParams params;
};

extern "C" {

const char* pda_version(void) { return "1.0.0"; }

const char* pda_last_error(void) { return g_last_error.c_str(); }

void pda_string_free(char* s) { std::free(s); }

int pda_default_config(char** out_json) {
  if (int rc = require(out_json != nullptr, "out_json is null")) return rc;
  return guarded([&] { *out_json = alloc_string(phonemeda::PipelineConfig{}.to_json_text()); });
}

int pda_synth(const char* config_json, uint64_t seed, const char* out_dir, char** out_report) {
  if (int rc = require(out_dir != nullptr, "out_dir is null")) return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::synth_pipeline(cfg, seed, out_dir);
    if (out_report != nullptr)
      *out_report = alloc_string(json{{"manifest", report.manifest_path},
                                      {"config", report.config_path},
                                      {"n_speech", report.n_speech},
                                      {"n_noise", report.n_noise},
                                      {"n_silence", report.n_silence}}
                                     .dump(2));
  });
}

int pda_preprocess(const char* manifest_path, const char* config_json, const char* out_dir,
                   int n_threads, char** out_report) {
  if (int rc = require(manifest_path != nullptr && out_dir != nullptr,
                       "manifest_path/out_dir is null"))
    return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::preprocess_dataset(manifest_path, cfg, out_dir, n_threads);
    if (out_report != nullptr) {
      json failures = json::array();
      for (const auto& f : report.failures)
        failures.push_back({{"path", f.path}, {"message", f.message}});
      *out_report = alloc_string(json{{"n_ok", report.n_ok},
                                      {"n_failed", report.n_failed},
                                      {"n_spectrograms", report.n_spectrograms},
                                      {"pad_to", report.pad_to},
                                      {"index", report.index_path},
                                      {"failures", failures}}
                                     .dump(2));
    }
  });
}

int pda_train(const char* index_path, const char* config_json, const char* out_dir,
              char** out_report) {
  if (int rc = require(index_path != nullptr && out_dir != nullptr, "index_path/out_dir is null"))
    return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::train_pipeline(index_path, cfg, out_dir);
    if (out_report != nullptr)
      *out_report = alloc_string(json{{"model", report.model_path},
                                      {"history", report.history_path},
                                      {"param_count", report.param_count},
                                      {"epochs", report.epochs},
                                      {"n_train", report.n_train},
                                      {"n_test", report.n_test},
                                      {"final_loss", report.final_loss},
                                      {"test_weighted_accuracy", report.test_weighted_accuracy},
                                      {"test_per", report.test_per}}
                                     .dump(2));
  });
}

int pda_evaluate(const char* model_path, const char* index_path, const char* config_json,
                 const char* subset, const char* out_dir, char** out_report) {
  if (int rc = require(model_path != nullptr && index_path != nullptr && out_dir != nullptr,
                       "model_path/index_path/out_dir is null"))
    return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::evaluate_pipeline(model_path, index_path, cfg,
                                               subset != nullptr ? subset : "test", out_dir);
    if (out_report != nullptr)
      *out_report = alloc_string(json{{"weighted_accuracy", report.weighted_accuracy},
                                      {"per", report.per},
                                      {"n_pairs", report.n_pairs},
                                      {"aggregation", "per_clip_mean"},
                                      {"metrics", report.metrics_path},
                                      {"confusion", report.confusion_path}}
                                     .dump(2));
  });
}

int pda_infer(const char* model_path, const char* wav_path, const char* config_json,
              char** out_report) {
  if (int rc = require(model_path != nullptr && wav_path != nullptr, "model/wav path is null"))
    return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::infer_file(model_path, wav_path, cfg);
    if (out_report != nullptr)
      *out_report = alloc_string(json{{"decoded", report.decoded},
                                      {"n_slices", report.n_slices},
                                      {"resample_ms", report.resample_ms},
                                      {"spectrogram_ms", report.spectrogram_ms},
                                      {"forward_ms", report.forward_ms}}
                                     .dump(2));
  });
}

int pda_verify(const char* model_a_path, const char* model_b_path, double tolerance,
               const char* config_json, char** out_report) {
  if (int rc = require(model_a_path != nullptr && model_b_path != nullptr,
                       "model paths are null"))
    return rc;
  return guarded([&] {
    auto cfg = parse_config(config_json);
    auto report = phonemeda::verify_parity(model_a_path, model_b_path, tolerance, cfg);
    if (out_report != nullptr)
      *out_report = alloc_string(json{{"max_abs_diff", report.max_abs_diff},
                                      {"pass", report.pass},
                                      {"n_columns", report.n_columns},
                                      {"n_frames", report.n_frames}}
                                     .dump(2));
  });
}

int pda_model_open(const char* path, pda_model** out_model) {
  if (int rc = require(path != nullptr && out_model != nullptr, "path/out_model is null"))
    return rc;
  return guarded([&] {
    auto* handle = new pda_model_s{phonemeda::load_model_file(path)};
    *out_model = handle;
  });
}

void pda_model_close(pda_model* model) { delete model; }

int64_t pda_model_parameter_count(const pda_model* model) {
  return model != nullptr ? model->params.parameter_count() : -1;
}

int pda_model_token_count(const pda_model* model) {
  return model != nullptr ? model->params.config.n_tokens : -1;
}

int pda_model_mel_bins(const pda_model* model) {
  return model != nullptr ? model->params.config.n_mel : -1;
}

int pda_model_forward_zero(pda_model* model, int n_frames, float* out_logits, size_t cap,
                           size_t* out_rows, size_t* out_cols) {
  if (int rc = require(model != nullptr, "model is null")) return rc;
  if (int rc = require(n_frames >= 1, "n_frames must be >= 1")) return rc;
  return guarded([&] {
    namespace pm = phonemeda;
    pm::ad::Tape<float> tape;
    pm::ForwardOptions opt;
    opt.stop_at_end = false;
    auto zero = pm::SpecInput<float>::zeros(n_frames, model->params.config.n_mel);
    auto fwd = pm::forward(tape, zero, model->params, opt);
    const size_t rows = fwd.step_logits.size();
    const size_t cols = static_cast<size_t>(model->params.config.n_tokens);
    if (out_rows != nullptr) *out_rows = rows;
    if (out_cols != nullptr) *out_cols = cols;
    if (out_logits != nullptr) {
      size_t written = 0;
      for (size_t r = 0; r < rows && written < cap; ++r) {
        const auto& row = tape.value(fwd.step_logits[r]);
        for (size_t c = 0; c < cols && written < cap; ++c) out_logits[written++] = row[c];
      }
    }
  });
}

}  // extern "C"
