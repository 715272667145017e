#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pwrm {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed CSV input. Row and column are 1-based file positions
/// (column 0 when the error concerns a whole row).
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::size_t col, const std::string& what)
      : Error(format(row, col, what)), row_(row), col_(col) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  static std::string format(std::size_t row, std::size_t col, const std::string& what) {
    std::string s = "line " + std::to_string(row);
    if (col != 0) s += ", column " + std::to_string(col);
    return s + ": " + what;
  }

  std::size_t row_;
  std::size_t col_;
};

class InvalidData : public Error {
 public:
  using Error::Error;
};

class SingularSegment : public Error {
 public:
  using Error::Error;
};

class EmptyCluster : public Error {
 public:
  EmptyCluster(int cluster, const std::string& what) : Error(what), cluster_(cluster) {}
  int cluster() const noexcept { return cluster_; }

 private:
  int cluster_;
};

class InfeasibleSegmentation : public Error {
 public:
  using Error::Error;
};

class FitFailed : public Error {
 public:
  using Error::Error;
};

class EquivalenceViolation : public Error {
 public:
  EquivalenceViolation(int iteration, const std::string& what)
      : Error(what), iteration_(iteration) {}
  /// First iteration at which the two trajectories differ.
  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

class SelectionFailed : public Error {
 public:
  using Error::Error;
};

}  // namespace pwrm
