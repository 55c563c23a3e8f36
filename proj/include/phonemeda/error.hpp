#pragma once

#include <stdexcept>
#include <string>

namespace phonemeda {

// Every failure the library can raise, one code per condition. The C API
// maps these 1:1 onto its integer status values.
enum class Err {
  None = 0,

  // audio
  MalformedContainer,
  UnsupportedFormat,
  NonIntegerFactor,
  EmptyClip,

  // dsp
  NonPowerOfTwoLength,
  ClipTooShort,
  InvalidRange,
  DimensionMismatch,

  // vocabulary / dataset
  SequenceTooLong,
  ParseError,
  MissingAudioFile,
  InvalidConfig,
  DatasetTooSmall,

  // autodiff
  ShapeMismatch,
  NonScalarLoss,

  // model files
  BadMagic,
  UnsupportedVersion,
  TruncatedFile,
  ChecksumMismatch,
  BadModelFile,

  // training
  EmptyTrainingSet,
  NonOneHotTarget,
  MissingGradient,

  // metrics
  EmptyGroundTruth,
  TokenOutOfRange,

  // filesystem / misc
  IoError,
};

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& what) { throw Error(code, what); }

}  // namespace phonemeda
