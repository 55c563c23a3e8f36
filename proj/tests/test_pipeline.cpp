#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "phonemeda/pipeline.hpp"

namespace fs = std::filesystem;
using namespace phonemeda;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

SynthConfig small_synth() {
  SynthConfig cfg = SynthConfig::desk_default();
  cfg.clips_per_phrase = 2;
  cfg.noise_clips = 2;
  cfg.silence_clips = 2;
  cfg.phrases = {{0, 1, 2}, {3, 4}, {5, 0, 3, 2}};
  cfg.sample_rate = 44100;
  return cfg;
}

PipelineConfig small_config() {
  PipelineConfig cfg = PipelineConfig::desk_default();
  cfg.synth = small_synth();
  return cfg;
}

}  // namespace

TEST_CASE("pipeline config defaults follow the deployed constants") {
  PipelineConfig cfg;
  CHECK(cfg.sample_rate == 8820);
  CHECK(cfg.frame_length == 1024);
  CHECK(cfg.overlap == 128);
  CHECK(cfg.hop() == 896);
  CHECK(cfg.n_mel == 80);
  CHECK(cfg.f_max == 4410.0);
  CHECK(cfg.clip_seconds == 2.0);
  CHECK(cfg.frames_per_clip() == 19);
  CHECK(cfg.n_phonemes + 5 == 31);
  CHECK(cfg.train.batch_size == 1024);
  CHECK(cfg.train.epochs == 1200);
  CHECK(cfg.train.adam.learning_rate == 0.001);
  cfg.validate();
}

TEST_CASE("config JSON round trip preserves every field") {
  PipelineConfig cfg = PipelineConfig::desk_default();
  cfg.train.epochs = 77;
  cfg.synth.noise_clips = 13;
  auto text = cfg.to_json_text();
  auto back = PipelineConfig::from_json_text(text);
  CHECK(back.train.epochs == 77);
  CHECK(back.synth.noise_clips == 13);
  CHECK(back.n_phonemes == 12);
  CHECK(back.to_json_text() == text);
}

TEST_CASE("config validation and unknown keys") {
  CHECK_THROWS_AS(PipelineConfig::from_json_text("{\"frame_length\": 1000}"), Error);
  CHECK_THROWS_AS(PipelineConfig::from_json_text("{\"f_max\": 9999}"), Error);
  CHECK_THROWS_AS(PipelineConfig::from_json_text("not json"), Error);
  try {
    PipelineConfig::from_json_text("{\"frame_len\": 1024}");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ParseError);
    CHECK(std::string(e.what()).find("frame_len") != std::string::npos);
  }
}

TEST_CASE("preprocess produces one 19x80 spectrogram per short clip") {
  TempDir corpus("phonemeda_pre_corpus");
  TempDir out("phonemeda_pre_out");
  PipelineConfig cfg = small_config();
  auto synth_report = synth_pipeline(cfg, 42, corpus.path.string());

  auto report = preprocess_dataset(synth_report.manifest_path, cfg, out.path.string(), 1);
  CHECK(report.n_failed == 0);
  CHECK(report.n_ok == 10);            // 3 phrases x 2 + 2 noise + 2 silence
  CHECK(report.n_spectrograms == 12);  // noise WAVs are 4 s and slice into two
  CHECK(report.pad_to == 6);           // longest phrase (4) + 2

  auto ds = load_processed(report.index_path);
  CHECK(ds.examples.size() == 12);
  CHECK(ds.n_mel == 80);
  CHECK(ds.pad_to == 6);
  for (const auto& ex : ds.examples) {
    CHECK(ex.spec.n_frames == 19);
    CHECK(ex.spec.n_mel == 80);
    CHECK(ex.tokens.tokens.size() == 6);
    CHECK(ex.tokens.tokens.front() == beg_id(17));
  }
}

TEST_CASE("preprocess reports missing audio per entry and keeps going") {
  TempDir corpus("phonemeda_pre_missing");
  TempDir out("phonemeda_pre_missing_out");
  PipelineConfig cfg = small_config();
  auto synth_report = synth_pipeline(cfg, 42, corpus.path.string());

  // break one entry
  auto manifest = load_manifest(synth_report.manifest_path);
  fs::remove(manifest.entries[3].path);

  auto report = preprocess_dataset(synth_report.manifest_path, cfg, out.path.string(), 1);
  CHECK(report.n_failed == 1);
  CHECK(report.n_ok == 9);
  REQUIRE(report.failures.size() == 1);
  CHECK(report.failures[0].path == manifest.entries[3].path);
  CHECK(!report.failures[0].message.empty());
}

TEST_CASE("preprocess output is byte-identical across reruns and thread counts") {
  TempDir corpus("phonemeda_pre_det");
  TempDir out_a("phonemeda_pre_det_a");
  TempDir out_b("phonemeda_pre_det_b");
  PipelineConfig cfg = small_config();
  auto synth_report = synth_pipeline(cfg, 7, corpus.path.string());

  auto ra = preprocess_dataset(synth_report.manifest_path, cfg, out_a.path.string(), 1);
  auto rb = preprocess_dataset(synth_report.manifest_path, cfg, out_b.path.string(), 3);
  CHECK(ra.n_spectrograms == rb.n_spectrograms);

  std::map<std::string, std::vector<uint8_t>> files_a, files_b;
  for (const auto& e : fs::directory_iterator(out_a.path))
    files_a[e.path().filename().string()] = file_bytes(e.path());
  for (const auto& e : fs::directory_iterator(out_b.path))
    files_b[e.path().filename().string()] = file_bytes(e.path());
  CHECK(files_a == files_b);
  CHECK(files_a.size() == static_cast<size_t>(ra.n_spectrograms) + 1);  // + index
}

TEST_CASE("train, evaluate, infer and verify close the loop on a tiny corpus") {
  TempDir corpus("phonemeda_loop_corpus");
  TempDir processed("phonemeda_loop_processed");
  TempDir run("phonemeda_loop_run");

  PipelineConfig cfg = small_config();
  cfg.train.batch_size = 8;
  cfg.train.epochs = 3;
  cfg.train.test_fraction = 0.25;
  cfg.train.seed = 11;

  auto synth_report = synth_pipeline(cfg, 42, corpus.path.string());
  auto pre = preprocess_dataset(synth_report.manifest_path, cfg, processed.path.string(), 1);
  REQUIRE(pre.n_failed == 0);

  auto trained = train_pipeline(pre.index_path, cfg, run.path.string());
  CHECK(fs::exists(trained.model_path));
  CHECK(fs::exists(trained.history_path));
  CHECK(trained.epochs == 3);
  CHECK(trained.n_train + trained.n_test == 12);
  CHECK(trained.param_count > 0);

  // history has a header and one row per epoch
  std::ifstream hist(trained.history_path);
  std::string line;
  std::getline(hist, line);
  CHECK(line == "epoch,mean_loss,weighted_accuracy,per");
  int rows = 0;
  while (std::getline(hist, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  auto eval = evaluate_pipeline(trained.model_path, pre.index_path, cfg, "test",
                                run.path.string());
  CHECK(eval.n_pairs == trained.n_test);
  CHECK(fs::exists(eval.metrics_path));
  CHECK(fs::exists(eval.confusion_path));
  CHECK(eval.weighted_accuracy >= 0.0);
  CHECK(eval.weighted_accuracy <= 1.0);

  auto manifest = load_manifest(synth_report.manifest_path);
  auto infer = infer_file(trained.model_path, manifest.entries[0].path, cfg);
  CHECK(infer.n_slices == 1);
  CHECK(infer.resample_ms >= 0.0);
  CHECK(infer.spectrogram_ms >= 0.0);
  CHECK(infer.forward_ms >= 0.0);

  // parity against a byte-for-byte copy
  const auto copy_path = run.path / "copy.yvx";
  fs::copy_file(trained.model_path, copy_path);
  auto parity = verify_parity(trained.model_path, copy_path.string(), 1e-6, cfg);
  CHECK(parity.pass);
  CHECK(parity.max_abs_diff == 0.0);
  CHECK(parity.n_frames == 19);

  // a perturbed weight must trip the check
  auto params = load_model_file(trained.model_path);
  params.dense2_w.data[0] += 1e-3f;
  const auto tweaked_path = run.path / "tweaked.yvx";
  save_model_file(tweaked_path.string(), params);
  auto broken = verify_parity(trained.model_path, tweaked_path.string(), 1e-6, cfg);
  CHECK(!broken.pass);
  CHECK(broken.max_abs_diff > 0.0);

  // structural mismatch is rejected before any forward pass
  PipelineConfig other = cfg;
  other.n_phonemes = 5;
  auto other_params = init_model<float>(other.resolved_model(6), 1);
  const auto other_path = run.path / "other.yvx";
  save_model_file(other_path.string(), other_params);
  try {
    verify_parity(trained.model_path, other_path.string(), 1e-6, cfg);
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::DimensionMismatch);
  }
}

TEST_CASE("thread count resolution honors the environment cap") {
  setenv("PHONEMEDA_THREADS", "2", 1);
  CHECK(resolve_thread_count(8) == 2);
  CHECK(resolve_thread_count(1) == 1);
  unsetenv("PHONEMEDA_THREADS");
  CHECK(resolve_thread_count(3) == 3);
}
