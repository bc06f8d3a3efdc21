#pragma once

#include <stdexcept>
#include <string>

namespace floodseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class AxisError : public Error {
 public:
  using Error::Error;
};

/// Unsupported layer or training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input tensor does not satisfy a model's input_spec.
class InputSpecError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during a forward pass or in a loss.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::string layer)
      : Error(what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ManifestError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

}  // namespace floodseg
