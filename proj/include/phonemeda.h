/*
 * phonemeda C API
 *
 * Stable C surface over the phoneme-recognition pipeline: corpus synthesis,
 * preprocessing, training, evaluation, inference and deployment parity
 * checks. All functions return PDA_OK (0) on success or a PDA_ERR_* status;
 * pda_last_error() describes the most recent failure on the calling thread.
 *
 * Strings returned through char** out-parameters are heap-allocated JSON
 * reports; release them with pda_string_free().
 */

#ifndef PHONEMEDA_H
#define PHONEMEDA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define PDA_OK 0
#define PDA_ERR_MALFORMED_CONTAINER 1
#define PDA_ERR_UNSUPPORTED_FORMAT 2
#define PDA_ERR_NON_INTEGER_FACTOR 3
#define PDA_ERR_EMPTY_CLIP 4
#define PDA_ERR_NON_POWER_OF_TWO 5
#define PDA_ERR_CLIP_TOO_SHORT 6
#define PDA_ERR_INVALID_RANGE 7
#define PDA_ERR_DIMENSION_MISMATCH 8
#define PDA_ERR_SEQUENCE_TOO_LONG 9
#define PDA_ERR_PARSE 10
#define PDA_ERR_MISSING_AUDIO_FILE 11
#define PDA_ERR_INVALID_CONFIG 12
#define PDA_ERR_DATASET_TOO_SMALL 13
#define PDA_ERR_SHAPE_MISMATCH 14
#define PDA_ERR_NON_SCALAR_LOSS 15
#define PDA_ERR_BAD_MAGIC 16
#define PDA_ERR_UNSUPPORTED_VERSION 17
#define PDA_ERR_TRUNCATED_FILE 18
#define PDA_ERR_CHECKSUM_MISMATCH 19
#define PDA_ERR_BAD_MODEL_FILE 20
#define PDA_ERR_EMPTY_TRAINING_SET 21
#define PDA_ERR_NON_ONE_HOT_TARGET 22
#define PDA_ERR_MISSING_GRADIENT 23
#define PDA_ERR_EMPTY_GROUND_TRUTH 24
#define PDA_ERR_TOKEN_OUT_OF_RANGE 25
#define PDA_ERR_IO 26
#define PDA_ERR_INVALID_ARGUMENT 90
#define PDA_ERR_INTERNAL 99

/* Loaded model handle; opaque. */
typedef struct pda_model_s pda_model;

/* Library version, e.g. "1.0.0". Static storage, do not free. */
const char* pda_version(void);

/* Last error message for the calling thread. Static storage, do not free. */
const char* pda_last_error(void);

void pda_string_free(char* s);

/* Default pipeline configuration as a JSON document. */
int pda_default_config(char** out_json);

/*
 * Generate the synthetic corpus under out_dir (WAV files, manifest.jsonl and
 * a ready-to-train config.json). config_json may be NULL for defaults.
 * Report: {"manifest","config","n_speech","n_noise","n_silence"}.
 */
int pda_synth(const char* config_json, uint64_t seed, const char* out_dir, char** out_report);

/*
 * Run the feature pipeline over every manifest entry, writing spectrogram
 * files and index.jsonl into out_dir. n_threads = 0 picks the hardware
 * concurrency; the PHONEMEDA_THREADS environment variable caps it either way.
 * Returns PDA_OK even when some entries fail; the report lists failures and
 * callers should treat n_failed > 0 as a partial failure.
 */
int pda_preprocess(const char* manifest_path, const char* config_json, const char* out_dir,
                   int n_threads, char** out_report);

/*
 * Train on a preprocessed index, writing model.yvx and history.csv into
 * out_dir. Report includes parameter count, split sizes and final metrics.
 */
int pda_train(const char* index_path, const char* config_json, const char* out_dir,
              char** out_report);

/*
 * Evaluate a model over a preprocessed index. subset is "test", "train" or
 * "all"; the train/test split is reproduced from the config seed. Writes
 * metrics.json and confusion.csv into out_dir.
 */
int pda_evaluate(const char* model_path, const char* index_path, const char* config_json,
                 const char* subset, const char* out_dir, char** out_report);

/*
 * Decode one WAV file: {"decoded","n_slices","resample_ms","spectrogram_ms",
 * "forward_ms"}.
 */
int pda_infer(const char* model_path, const char* wav_path, const char* config_json,
              char** out_report);

/*
 * Deployment parity: run both models on the all-zero spectrogram of the
 * configured shape and compare logits. Report: {"max_abs_diff","pass",
 * "n_columns","n_frames"}. The status is PDA_OK even when parity fails;
 * inspect "pass".
 */
int pda_verify(const char* model_a_path, const char* model_b_path, double tolerance,
               const char* config_json, char** out_report);

/* --- model handles ------------------------------------------------------ */

int pda_model_open(const char* path, pda_model** out_model);
void pda_model_close(pda_model* model);

int64_t pda_model_parameter_count(const pda_model* model);
int pda_model_token_count(const pda_model* model);
int pda_model_mel_bins(const pda_model* model);

/*
 * Free-running forward over an all-zero spectrogram with n_frames frames.
 * Writes up to cap floats (row-major, one row of token_count logits per
 * decoder step) and reports the emitted matrix shape.
 */
int pda_model_forward_zero(pda_model* model, int n_frames, float* out_logits, size_t cap,
                           size_t* out_rows, size_t* out_cols);

#ifdef __cplusplus
}
#endif

#endif /* PHONEMEDA_H */
