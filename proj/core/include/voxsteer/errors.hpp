#pragma once

#include <stdexcept>
#include <string>

namespace voxsteer {

// Process exit codes used by the CLI. Library code throws the typed
// exceptions below; the CLI maps them to these codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitBadArgs = 2,
  kExitMissingPrerequisite = 3,
  kExitNumericFault = 4,
  kExitDegenerateOutput = 5,
  kExitIoError = 6,
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return kExitFailure; }
};

// Violated API precondition (programming error or malformed request).
struct ContractError : Error {
  using Error::Error;
  int exit_code() const override { return kExitBadArgs; }
};

struct BadArgsError : Error {
  using Error::Error;
  int exit_code() const override { return kExitBadArgs; }
};

// A required artifact (checkpoint, dataset) is absent or out of order.
struct MissingPrerequisiteError : Error {
  using Error::Error;
  int exit_code() const override { return kExitMissingPrerequisite; }
};

// NaN/Inf encountered in tensor data.
struct NumericFault : Error {
  using Error::Error;
  int exit_code() const override { return kExitNumericFault; }
};

// A pipeline produced an empty/unusable result (e.g. empty geometry).
struct DegenerateOutputError : Error {
  using Error::Error;
  int exit_code() const override { return kExitDegenerateOutput; }
};

struct IoError : Error {
  using Error::Error;
  int exit_code() const override { return kExitIoError; }
};

}  // namespace voxsteer
