#pragma once

#include <stdexcept>
#include <string>

namespace dpstride {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Input lies outside the mathematical domain of an operation
// (time outside [0,1], non-positive variance, off-lattice decoder target).
class DomainError : public Error {
public:
  using Error::Error;
};

// Arguments are inconsistent with each other (s > t, size mismatch,
// budget out of range).
class ArgumentError : public Error {
public:
  using Error::Error;
};

// A division by the signal scale f would blow up because f < 1e-12.
class SingularityError : public Error {
public:
  using Error::Error;
};

// A noise schedule violates monotonicity, boundary values, or produces a
// negative transition variance beyond rounding tolerance.
class ScheduleError : public Error {
public:
  using Error::Error;
};

// Optimization produced a non-finite loss.
class TrainingError : public Error {
public:
  using Error::Error;
};

// Configuration or metadata is inconsistent (table built with learned
// variances fed to a model without variance outputs, dimension mismatch,
// unknown enum value).
class ValidationError : public Error {
public:
  using Error::Error;
};

// A serialized artifact is corrupt: bad magic, unsupported version,
// truncated payload.
class FileFormatError : public Error {
public:
  using Error::Error;
};

// No feasible path exists for the requested budget.
class InfeasibleError : public Error {
public:
  using Error::Error;
};

}  // namespace dpstride
