#pragma once

#include <stdexcept>
#include <string>

namespace otflow {

// Inconsistent dimensions or invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical quantity became non-finite during a solve or a training step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int step, long sample = -1)
      : std::runtime_error(what), step_(step), sample_(sample) {}

  int step() const { return step_; }
  long sample() const { return sample_; }

 private:
  int step_;
  long sample_;
};

// Malformed input file. Row and column are 1-based; 0 means "not applicable".
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, long row, long column)
      : std::runtime_error(what), row_(row), column_(column) {}

  long row() const { return row_; }
  long column() const { return column_; }

 private:
  long row_;
  long column_;
};

}  // namespace otflow
