#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace polyclock {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed Newick / FASTA / table text. `offset` is a byte offset into the
// input for Newick, `line` a 1-based line number for line-oriented formats.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset, std::size_t line = 0)
      : Error(what), offset_(offset), line_(line) {}
  std::size_t offset() const noexcept { return offset_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t offset_;
  std::size_t line_;
};

// Tip dates disagree with branch lengths, or a tip has no date.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

// Tree is not a rooted binary tree with at least two tips.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Tree and alignment taxa do not match.
class BindError : public Error {
 public:
  using Error::Error;
};

// Invalid model parameter (non-simplex frequencies, kappa <= 0, ...).
class ModelError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite value in a transition matrix or partial likelihood.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, int branch = -1) : Error(what), branch_(branch) {}
  int branch() const noexcept { return branch_; }

 private:
  int branch_;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::string key, std::size_t line)
      : Error(what), key_(std::move(key)), line_(line) {}
  const std::string& key() const noexcept { return key_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

}  // namespace polyclock
