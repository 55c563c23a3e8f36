#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phonemeda/metrics.hpp"
#include "phonemeda/model.hpp"
#include "phonemeda/synth.hpp"
#include "phonemeda/training.hpp"
#include "phonemeda/vocab.hpp"

namespace phonemeda {

// Every pipeline constant in one place; defaults follow the deployed
// recognizer (8820 Hz, 2 s clips, 1024/128 framing, 80 mel bins, 0-4410 Hz).
struct PipelineConfig {
  int sample_rate = 8820;
  int frame_length = 1024;
  int overlap = 128;
  int n_mel = 80;
  double f_min = 0.0;
  double f_max = 4410.0;
  double clip_seconds = 2.0;
  double floor_db = -100.0;
  double power_eps = 1e-10;
  int n_phonemes = 26;  // 26 phonemes + 5 control tokens = 31
  int pad_to = 0;       // 0 = longest transcription + 2, resolved at preprocess

  ModelConfig model;  // n_mel / n_tokens / max_decode_len resolved from above
  TrainConfig train;
  SynthConfig synth = SynthConfig::desk_default();

  static PipelineConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  void validate() const;

  int hop() const { return frame_length - overlap; }
  int clip_samples() const {
    return static_cast<int>(std::llround(clip_seconds * sample_rate));
  }
  int frames_per_clip() const { return (clip_samples() - frame_length) / hop() + 1; }

  // Model config with the pipeline-derived fields filled in.
  ModelConfig resolved_model(int pad_to_resolved) const;

  // Small-corpus profile used by the bundled demo: 12 phonemes, batch 32.
  static PipelineConfig desk_default();
};

struct PreprocessFailure {
  std::string path;
  std::string message;
};

struct PreprocessReport {
  int n_ok = 0;
  int n_failed = 0;
  int n_spectrograms = 0;
  int pad_to = 0;
  std::string index_path;
  std::vector<PreprocessFailure> failures;
};

// Decode -> resample -> pad/slice -> STFT -> log-mel -> token encoding for
// every manifest entry; spectrograms and a JSON-Lines index land in out_dir.
// Worker count: n_threads, or hardware concurrency when 0, capped by the
// PHONEMEDA_THREADS environment variable.
PreprocessReport preprocess_dataset(const std::string& manifest_path, const PipelineConfig& cfg,
                                    const std::string& out_dir, int n_threads = 0);

struct LoadedDataset {
  std::vector<TrainingExample> examples;
  int n_phonemes = 0;
  int pad_to = 0;
  int n_mel = 0;

  Vocabulary vocabulary() const { return Vocabulary::with_generic_phonemes(n_phonemes); }
};

LoadedDataset load_processed(const std::string& index_path);

struct TrainReport {
  std::string model_path;
  std::string history_path;
  int64_t param_count = 0;
  int epochs = 0;
  int n_train = 0;
  int n_test = 0;
  double final_loss = 0.0;
  double test_weighted_accuracy = 0.0;
  double test_per = 0.0;
};

TrainReport train_pipeline(const std::string& index_path, const PipelineConfig& cfg,
                           const std::string& out_dir);

struct EvalReport {
  double weighted_accuracy = 0.0;
  double per = 0.0;
  int n_pairs = 0;
  std::string metrics_path;
  std::string confusion_path;
};

// subset: "test", "train" or "all"; the split is reproduced from the config
// seed and fraction, weights always come from the train subset.
EvalReport evaluate_pipeline(const std::string& model_path, const std::string& index_path,
                             const PipelineConfig& cfg, const std::string& subset,
                             const std::string& out_dir);

struct InferReport {
  std::string decoded;  // space-separated symbols, BEG/END stripped
  int n_slices = 0;
  double resample_ms = 0.0;
  double spectrogram_ms = 0.0;
  double forward_ms = 0.0;
};

InferReport infer_file(const std::string& model_path, const std::string& wav_path,
                       const PipelineConfig& cfg);

struct VerifyReport {
  double max_abs_diff = 0.0;
  bool pass = false;
  int n_columns = 0;
  int n_frames = 0;
};

// Free-running forward of both models over the all-zero spectrogram of the
// configured shape; configs must match structurally before any forward pass.
VerifyReport verify_parity(const std::string& model_a_path, const std::string& model_b_path,
                           double tolerance, const PipelineConfig& cfg);

struct SynthReport {
  std::string manifest_path;
  std::string config_path;  // ready-to-use desk config next to the corpus
  int n_speech = 0;
  int n_noise = 0;
  int n_silence = 0;
};

SynthReport synth_pipeline(const PipelineConfig& cfg, uint64_t seed, const std::string& out_dir);

int resolve_thread_count(int requested);

}  // namespace phonemeda
