#pragma once

#include <stdexcept>
#include <string>

namespace nspforge {

// Root of all library failures. The CLI maps ConfigError to exit 1 (bad
// operator input) and every other Error to exit 2 (runtime failure); anything
// else escaping main is a bug. kind() feeds the --json-errors output.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
  virtual const char* kind() const { return "error"; }
};

// Tensor / latent dimensions disagree with the operation's contract.
struct ShapeError : Error {
  using Error::Error;
  const char* kind() const override { return "shape_error"; }
};

// Scalar argument outside its admissible range (t not in [0,1], sigma < 0, ...).
struct DomainError : Error {
  using Error::Error;
  const char* kind() const override { return "domain_error"; }
};

// Unknown config key, unparseable value, or contradictory override.
struct ConfigError : Error {
  using Error::Error;
  const char* kind() const override { return "config_error"; }
};

// Non-finite value surfaced where the math requires finiteness.
// batch_index >= 0 pinpoints the offending sample when known.
struct NumericsError : Error {
  explicit NumericsError(const std::string& msg, int batch_index = -1)
      : Error(msg), batch_index(batch_index) {}
  const char* kind() const override { return "numerics_error"; }
  int batch_index = -1;
};

// Token id outside the vocabulary, or an ill-formed token sequence.
struct TokenError : Error {
  using Error::Error;
  const char* kind() const override { return "token_error"; }
};

// Stochastic drift evaluated where its 1/(2t) factor blows up.
struct SingularityError : Error {
  using Error::Error;
  const char* kind() const override { return "singularity_error"; }
};

// API misuse: calling into an object in a state its contract forbids.
struct ProtocolError : Error {
  using Error::Error;
  const char* kind() const override { return "protocol_error"; }
};

// Dataset file is missing, truncated, or fails validation.
struct DatasetError : Error {
  using Error::Error;
  const char* kind() const override { return "dataset_error"; }
};

// Dataset serialization hit an I/O failure.
struct DatasetWriteError : Error {
  using Error::Error;
  const char* kind() const override { return "dataset_write_error"; }
};

// Checkpoint file is missing, corrupt, or belongs to a different config.
struct CheckpointError : Error {
  using Error::Error;
  const char* kind() const override { return "checkpoint_error"; }
};

// Filesystem trouble that is not specific to one artifact format.
struct IoError : Error {
  using Error::Error;
  const char* kind() const override { return "io_error"; }
};

}  // namespace nspforge
