#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "otflow/potential.hpp"

namespace otflow {

// Train/validation/test rows (samples) in standardized coordinates, together
// with the training-set statistics that map them back.
struct DatasetSplit {
  Matrix train, val, test;
  Vector mean, std;
  std::string source;
  std::uint64_t seed = 0;
  long dropped_rows = 0;

  Index dim() const { return train.cols(); }
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

const std::vector<std::string>& toy_names();

// n x 2 draws from a named 2-D benchmark density. Throws std::invalid_argument
// listing the valid names when `name` is unknown.
Matrix sample_toy(const std::string& name, Index n, std::uint64_t seed);

// Mixture of 8 isotropic Gaussians (std 0.5) centered on a radius-4 octagon.
Vector eight_gaussians_log_density(const Matrix& x);
Matrix eight_gaussians_centers();

Matrix sample_latent(Index n, Index d, std::uint64_t seed);

// Column means and (population) standard deviations.
void column_stats(const Matrix& x, Vector& mean, Vector& std);
Matrix standardize(const Matrix& x, const Vector& mean, const Vector& std);
Matrix unstandardize(const Matrix& x, const Vector& mean, const Vector& std);

// Shuffles rows with `seed`, splits by `fractions`, and (when `standardize`)
// standardizes all three parts with statistics of the training part; otherwise
// the stored statistics are mean 0, std 1. Throws ConfigError for fewer than
// 10 rows or a constant training column.
DatasetSplit split_and_standardize(const Matrix& x, const SplitFractions& fractions,
                                   std::uint64_t seed, std::string source,
                                   bool standardize = true);

// Toy samples split like tabular data but kept in their raw coordinates.
DatasetSplit make_toy_split(const std::string& name, Index n, std::uint64_t seed,
                            const SplitFractions& fractions = {});

enum class Delimiter { automatic, comma, whitespace };

struct CsvTable {
  Matrix rows;
  long dropped_rows = 0;
  bool had_header = false;
};

// Numeric rectangular text. The first row is treated as a header when any of
// its cells is non-numeric. Rows with non-finite values are dropped and
// counted. Throws ParseError with a 1-based row/column for ragged rows,
// non-numeric cells, or an empty file.
CsvTable read_csv(const std::string& path, Delimiter delimiter = Delimiter::automatic);
CsvTable parse_csv(const std::string& text, Delimiter delimiter = Delimiter::automatic);

DatasetSplit load_csv(const std::string& path, Delimiter delimiter = Delimiter::automatic,
                      const SplitFractions& fractions = {}, std::uint64_t seed = 0);

void write_csv(const std::string& path, const Matrix& rows,
               const std::vector<std::string>& header = {});

}  // namespace otflow
