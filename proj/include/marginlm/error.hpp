#pragma once

#include <stdexcept>
#include <string>

namespace marginlm {

// Bad arguments or inconsistent configuration supplied by a caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor shapes that cannot be combined.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Value outside the mathematical domain of an operation (log of a
// non-positive number, arccos outside [-1, 1], zero-norm vectors...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed input files: corpora, vocabularies, checkpoints.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Divergence during training (NaN/Inf loss or parameters).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace marginlm
