#pragma once

#include <stdexcept>
#include <string>

namespace ipcs {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or length disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition on the input values does not hold.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A reduction was requested over an empty selection.
class EmptySupportError : public Error {
 public:
  using Error::Error;
};

/// Instance statistics requested on a batch with no rows.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// The loss handed to backward was never produced on the tape.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// An operation was called in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written for a different network architecture.
class IncompatibleCheckpointError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace ipcs
