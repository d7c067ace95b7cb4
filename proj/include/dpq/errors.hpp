#ifndef DPQ_ERRORS_HPP
#define DPQ_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dpq {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
  using Error::Error;
};

// A finite-difference oracle evaluated the function to a non-finite value.
class OracleFailure : public Error {
public:
  using Error::Error;
};

// A code outside {0..K-1} reached reverse-discretization.
class CorruptCodebook : public Error {
public:
  using Error::Error;
};

class InvalidBatch : public Error {
public:
  using Error::Error;
};

class InvalidState : public Error {
public:
  using Error::Error;
};

class InvalidDataset : public Error {
public:
  using Error::Error;
};

class CorruptFile : public Error {
public:
  using Error::Error;
};

class UnsupportedFile : public Error {
public:
  using Error::Error;
};

class TrainingDiverged : public Error {
public:
  TrainingDiverged(std::size_t epoch, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

private:
  std::size_t epoch_;
};

}  // namespace dpq

#endif  // DPQ_ERRORS_HPP
