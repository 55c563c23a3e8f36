// Command-line front end for the phonemeda pipeline. Everything goes through
// the C API in phonemeda.h; this translation unit never touches the C++ core.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "phonemeda.h"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    std::cerr << "error: cannot read config file " << path << "\n";
    std::exit(1);
  }
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Loads --config (if any) and applies flag overrides on the JSON document.
std::string effective_config(const std::string& config_path, std::optional<uint64_t> seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    try {
      j = nlohmann::json::parse(read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "error: config file is not valid JSON: " << e.what() << "\n";
      std::exit(1);
    }
  }
  if (seed.has_value()) j["train"]["seed"] = *seed;
  return j.dump();
}

int fail(int status) {
  std::cerr << "error: " << pda_last_error() << "\n";
  return status == PDA_OK ? 1 : status;
}

void print_report(char* report) {
  if (report != nullptr) {
    std::cout << report << "\n";
    pda_string_free(report);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phonemeda: low-resource phoneme recognition pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, manifest_path, model_path, model_b_path, wav_path;
  std::string subset = "test";
  uint64_t seed = 42;
  bool seed_given = false;
  int threads = 0;
  double tolerance = 1e-6;

  auto add_common = [&](CLI::App* cmd, bool with_seed) {
    cmd->add_option("--config", config_path, "pipeline config JSON file");
    if (with_seed)
      cmd->add_option("--seed", seed, "random seed")->each([&](const std::string&) {
        seed_given = true;
      });
  };

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
  add_common(synth, true);
  synth->add_option("--out", out_dir, "output directory")->required();

  auto* preprocess = app.add_subcommand("preprocess", "WAVs to spectrograms and tokens");
  add_common(preprocess, false);
  preprocess->add_option("--manifest", manifest_path, "dataset manifest (JSON lines)")->required();
  preprocess->add_option("--out", out_dir, "output directory")->required();
  preprocess->add_option("--threads", threads, "worker threads (0 = auto)");

  auto* train = app.add_subcommand("train", "train a model on a preprocessed index");
  add_common(train, true);
  train->add_option("--manifest", manifest_path, "preprocessed index.jsonl")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a model on a preprocessed index");
  add_common(eval, true);
  eval->add_option("--model", model_path, "model file")->required();
  eval->add_option("--manifest", manifest_path, "preprocessed index.jsonl")->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--split", subset, "test | train | all");

  auto* infer = app.add_subcommand("infer", "decode one WAV file");
  add_common(infer, false);
  infer->add_option("--model", model_path, "model file")->required();
  infer->add_option("wav", wav_path, "input WAV file")->required();

  auto* verify = app.add_subcommand("verify", "deployment parity check of two model files");
  add_common(verify, false);
  verify->add_option("--model", model_path, "first model file")->required();
  verify->add_option("--model-b", model_b_path, "second model file")->required();
  verify->add_option("--tolerance", tolerance, "max per-logit difference");

  CLI11_PARSE(app, argc, argv);

  char* report = nullptr;

  if (synth->parsed()) {
    const std::string cfg = effective_config(config_path, std::nullopt);
    const int rc = pda_synth(cfg.empty() ? nullptr : cfg.c_str(), seed, out_dir.c_str(), &report);
    if (rc != PDA_OK) return fail(rc);
    print_report(report);
    return 0;
  }

  if (preprocess->parsed()) {
    const std::string cfg = effective_config(config_path, std::nullopt);
    const int rc =
        pda_preprocess(manifest_path.c_str(), cfg.c_str(), out_dir.c_str(), threads, &report);
    if (rc != PDA_OK) return fail(rc);
    int n_failed = 0;
    if (report != nullptr) n_failed = nlohmann::json::parse(report).value("n_failed", 0);
    print_report(report);
    return n_failed > 0 ? 1 : 0;
  }

  if (train->parsed()) {
    const std::string cfg =
        effective_config(config_path, seed_given ? std::optional<uint64_t>(seed) : std::nullopt);
    const int rc = pda_train(manifest_path.c_str(), cfg.c_str(), out_dir.c_str(), &report);
    if (rc != PDA_OK) return fail(rc);
    print_report(report);
    return 0;
  }

  if (eval->parsed()) {
    const std::string cfg =
        effective_config(config_path, seed_given ? std::optional<uint64_t>(seed) : std::nullopt);
    const int rc = pda_evaluate(model_path.c_str(), manifest_path.c_str(), cfg.c_str(),
                                subset.c_str(), out_dir.c_str(), &report);
    if (rc != PDA_OK) return fail(rc);
    print_report(report);
    return 0;
  }

  if (infer->parsed()) {
    const std::string cfg = effective_config(config_path, std::nullopt);
    const int rc = pda_infer(model_path.c_str(), wav_path.c_str(), cfg.c_str(), &report);
    if (rc != PDA_OK) return fail(rc);
    if (report != nullptr) {
      const auto j = nlohmann::json::parse(report);
      std::cout << "decoded: " << j.value("decoded", std::string()) << "\n";
      std::printf("slices:      %d\n", j.value("n_slices", 0));
      std::printf("resample:    %.3f ms\n", j.value("resample_ms", 0.0));
      std::printf("spectrogram: %.3f ms\n", j.value("spectrogram_ms", 0.0));
      std::printf("forward:     %.3f ms\n", j.value("forward_ms", 0.0));
      pda_string_free(report);
    }
    return 0;
  }

  if (verify->parsed()) {
    const std::string cfg = effective_config(config_path, std::nullopt);
    const int rc = pda_verify(model_path.c_str(), model_b_path.c_str(), tolerance, cfg.c_str(),
                              &report);
    if (rc != PDA_OK) return fail(rc);
    bool pass = false;
    if (report != nullptr) pass = nlohmann::json::parse(report).value("pass", false);
    print_report(report);
    return pass ? 0 : 1;
  }

  return 1;
}
