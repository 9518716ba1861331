#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace mmmpp {

// Base class for every error raised by the library. `kind()` is a stable
// machine-readable tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// A parameter or specification violates a constraint; `field()` names it.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error("validation", field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class LayoutError : public Error {
 public:
  explicit LayoutError(const std::string& what) : Error("layout", what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class CovariateError : public Error {
 public:
  CovariateError(std::string name, const std::string& what)
      : Error("covariate", name + ": " + what), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

// A step function does not cover the requested time range.
class CoverageError : public Error {
 public:
  explicit CoverageError(const std::string& what) : Error("coverage", what) {}
};

// Every state assigns zero density to the observation at event `tau`
// (or the forward vector underflowed even after rescaling).
class ImpossibleObservation : public Error {
 public:
  explicit ImpossibleObservation(std::size_t tau, const std::string& record_id = {})
      : Error("impossible-observation",
              "impossible observation at event " + std::to_string(tau) +
                  (record_id.empty() ? std::string{} : " of record '" + record_id + "'")),
        tau_(tau),
        record_id_(record_id) {}
  std::size_t tau() const noexcept { return tau_; }
  const std::string& record_id() const noexcept { return record_id_; }

 private:
  std::size_t tau_;
  std::string record_id_;
};

// Wraps an error raised while processing a particular dataset record.
class RecordError : public Error {
 public:
  RecordError(std::string record_id, const Error& cause)
      : Error(cause.kind(), "record '" + record_id + "': " + cause.what()),
        record_id_(std::move(record_id)) {}
  const std::string& record_id() const noexcept { return record_id_; }

 private:
  std::string record_id_;
};

class EstimationError : public Error {
 public:
  explicit EstimationError(const std::string& what) : Error("estimation", what) {}
};

class ReducibleChain : public Error {
 public:
  explicit ReducibleChain(const std::string& what) : Error("reducible-chain", what) {}
};

// Malformed input file; carries file and 1-based line when known.
class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, const std::string& what)
      : Error("parse", file + (line ? ":" + std::to_string(line) : std::string{}) + ": " + what),
        file_(std::move(file)),
        line_(line) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

}  // namespace mmmpp
