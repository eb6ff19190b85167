#include "otflow/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "otflow/errors.hpp"

namespace otflow {
namespace {

constexpr double kPi = std::numbers::pi;

Matrix eight_gaussians(Index n, std::mt19937_64& rng) {
  const Matrix centers = eight_gaussians_centers();
  std::uniform_int_distribution<int> pick(0, 7);
  std::normal_distribution<double> noise(0.0, 0.5);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const int k = pick(rng);
    x(i, 0) = centers(k, 0) + noise(rng);
    x(i, 1) = centers(k, 1) + noise(rng);
  }
  return x;
}

// Uniform on the cells of [-4, 4]^2 (side 2) whose index sum is even.
Matrix checkerboard(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coord(-4.0, 4.0);
  Matrix x(n, 2);
  for (Index i = 0; i < n;) {
    const double a = coord(rng);
    const double b = coord(rng);
    const auto cell = static_cast<long>(std::floor(a / 2.0)) + static_cast<long>(std::floor(b / 2.0));
    if (cell % 2 != 0) continue;
    x(i, 0) = a;
    x(i, 1) = b;
    ++i;
  }
  return x;
}

Matrix two_moons(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, kPi);
  std::bernoulli_distribution lower(0.5);
  std::normal_distribution<double> noise(0.0, 0.1);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double a = angle(rng);
    double px = std::cos(a);
    double py = std::sin(a);
    if (lower(rng)) {
      px = 1.0 - px;
      py = 0.5 - py;
    }
    x(i, 0) = 2.0 * (px + noise(rng)) - 1.0;
    x(i, 1) = 2.0 * (py + noise(rng)) - 0.5;
  }
  return x;
}

Matrix spiral(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::bernoulli_distribution flip(0.5);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double r = std::sqrt(u01(rng)) * 3.0 * kPi;
    const double sign = flip(rng) ? -1.0 : 1.0;
    x(i, 0) = sign * (-std::cos(r) * r) + 0.5 * u01(rng);
    x(i, 1) = sign * (std::sin(r) * r) + 0.5 * u01(rng);
  }
  return x / 3.0;
}

Matrix pinwheel(Index n, std::mt19937_64& rng) {
  constexpr int arms = 5;
  constexpr double radial_std = 0.3;
  constexpr double tangential_std = 0.1;
  constexpr double rate = 0.25;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, arms - 1);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double fx = radial_std * n01(rng) + 1.0;
    const double fy = tangential_std * n01(rng);
    const double a = 2.0 * kPi * pick(rng) / arms + rate * std::exp(fx);
    x(i, 0) = 2.0 * (std::cos(a) * fx - std::sin(a) * fy);
    x(i, 1) = 2.0 * (std::sin(a) * fx + std::cos(a) * fy);
  }
  return x;
}

Matrix circles(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * kPi);
  std::bernoulli_distribution inner(0.5);
  std::normal_distribution<double> noise(0.0, 0.08);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double a = angle(rng);
    const double r = inner(rng) ? 0.5 : 1.0;
    x(i, 0) = 3.0 * (r * std::cos(a) + noise(rng));
    x(i, 1) = 3.0 * (r * std::sin(a) + noise(rng));
  }
  return x;
}

Matrix swissroll(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double t = 1.5 * kPi * (1.0 + 2.0 * u01(rng));
    x(i, 0) = (t * std::cos(t) + noise(rng)) / 5.0;
    x(i, 1) = (t * std::sin(t) + noise(rng)) / 5.0;
  }
  return x;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_double(std::string_view cell, double& out) {
  cell = trim(cell);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  if (cell.empty()) return false;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return ec == std::errc() && ptr == cell.data() + cell.size();
}

std::vector<std::string_view> split_cells(std::string_view line, bool comma) {
  std::vector<std::string_view> cells;
  if (comma) {
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      cells.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
  } else {
    std::size_t pos = 0;
    while (pos < line.size()) {
      pos = line.find_first_not_of(" \t\r", pos);
      if (pos == std::string_view::npos) break;
      const auto end = line.find_first_of(" \t\r", pos);
      cells.push_back(line.substr(pos, end == std::string_view::npos ? end : end - pos));
      pos = end;
    }
  }
  return cells;
}

}  // namespace

const std::vector<std::string>& toy_names() {
  static const std::vector<std::string> names = {
      "eight-gaussians", "checkerboard", "two-moons", "spiral", "pinwheel", "circles", "swissroll"};
  return names;
}

Matrix sample_toy(const std::string& name, Index n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("toy sample count must be >= 1");
  std::mt19937_64 rng(seed);
  if (name == "eight-gaussians") return eight_gaussians(n, rng);
  if (name == "checkerboard") return checkerboard(n, rng);
  if (name == "two-moons") return two_moons(n, rng);
  if (name == "spiral") return spiral(n, rng);
  if (name == "pinwheel") return pinwheel(n, rng);
  if (name == "circles") return circles(n, rng);
  if (name == "swissroll") return swissroll(n, rng);
  throw std::invalid_argument(
      fmt::format("unknown toy '{}'; valid names: {}", name, fmt::join(toy_names(), ", ")));
}

Matrix eight_gaussians_centers() {
  Matrix c(8, 2);
  for (int k = 0; k < 8; ++k) {
    c(k, 0) = 4.0 * std::cos(k * kPi / 4.0);
    c(k, 1) = 4.0 * std::sin(k * kPi / 4.0);
  }
  return c;
}

Vector eight_gaussians_log_density(const Matrix& x) {
  if (x.cols() != 2) throw std::invalid_argument("eight-gaussians density is 2-D");
  const Matrix centers = eight_gaussians_centers();
  const double var = 0.25;
  const double log_norm = -std::log(2.0 * kPi * var) - std::log(8.0);
  Vector out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    Eigen::Matrix<double, 8, 1> e;
    for (int k = 0; k < 8; ++k) e(k) = -0.5 * (x.row(i) - centers.row(k)).squaredNorm() / var;
    const double top = e.maxCoeff();
    out(i) = top + std::log((e.array() - top).exp().sum()) + log_norm;
  }
  return out;
}

Matrix sample_latent(Index n, Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix y(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) y(i, j) = n01(rng);
  return y;
}

void column_stats(const Matrix& x, Vector& mean, Vector& std) {
  mean = x.colwise().mean().transpose();
  std = ((x.rowwise() - mean.transpose()).cwiseAbs2().colwise().sum() /
         static_cast<double>(x.rows()))
            .cwiseSqrt()
            .transpose();
}

Matrix standardize(const Matrix& x, const Vector& mean, const Vector& std) {
  return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
}

Matrix unstandardize(const Matrix& x, const Vector& mean, const Vector& std) {
  Matrix out = x.array().rowwise() * std.transpose().array();
  out.rowwise() += mean.transpose();
  return out;
}

DatasetSplit split_and_standardize(const Matrix& x, const SplitFractions& fractions,
                                   std::uint64_t seed, std::string source, bool standardize) {
  const Index n = x.rows();
  if (n < 10) throw ConfigError(fmt::format("need at least 10 rows, got {}", n));
  if (fractions.train <= 0.0 || fractions.val < 0.0 || fractions.test < 0.0 ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<Index>(std::llround(fractions.train * static_cast<double>(n)));
  const auto n_val = std::min<Index>(
      n - n_train, static_cast<Index>(std::llround(fractions.val * static_cast<double>(n))));
  const Index n_test = n - n_train - n_val;
  auto gather = [&](Index begin, Index count) {
    Matrix out(count, x.cols());
    for (Index i = 0; i < count; ++i) out.row(i) = x.row(order[static_cast<std::size_t>(begin + i)]);
    return out;
  };

  DatasetSplit split;
  split.source = std::move(source);
  split.seed = seed;
  const Matrix train = gather(0, n_train);
  column_stats(train, split.mean, split.std);
  for (Index j = 0; j < split.std.size(); ++j) {
    if (!(split.std(j) > 0.0)) {
      throw ConfigError(fmt::format("column {} is constant on the training split", j + 1));
    }
  }
  if (!standardize) {
    split.mean = Vector::Zero(x.cols());
    split.std = Vector::Ones(x.cols());
  }
  split.train = otflow::standardize(train, split.mean, split.std);
  split.val = otflow::standardize(gather(n_train, n_val), split.mean, split.std);
  split.test = otflow::standardize(gather(n_train + n_val, n_test), split.mean, split.std);
  return split;
}

DatasetSplit make_toy_split(const std::string& name, Index n, std::uint64_t seed,
                            const SplitFractions& fractions) {
  return split_and_standardize(sample_toy(name, n, seed), fractions, seed, "toy:" + name, false);
}

CsvTable parse_csv(const std::string& text, Delimiter delimiter) {
  std::vector<double> values;
  Index cols = -1;
  long line_no = 0;
  long dropped = 0;
  bool header = false;
  bool first = true;
  std::istringstream in(text);
  std::string line;
  std::vector<double> row;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const bool comma = delimiter == Delimiter::comma ||
                       (delimiter == Delimiter::automatic && line.find(',') != std::string::npos);
    const auto cells = split_cells(line, comma);
    row.assign(cells.size(), 0.0);
    long bad_col = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!parse_double(cells[c], row[c])) {
        bad_col = static_cast<long>(c) + 1;
        break;
      }
    }
    if (first) {
      first = false;
      if (bad_col != 0) {
        header = true;
        cols = static_cast<Index>(cells.size());
        continue;
      }
    }
    if (bad_col != 0) {
      throw ParseError(fmt::format("row {}, column {}: non-numeric cell '{}'", line_no, bad_col,
                                   trim(cells[static_cast<std::size_t>(bad_col - 1)])),
                       line_no, bad_col);
    }
    if (cols < 0) cols = static_cast<Index>(cells.size());
    if (static_cast<Index>(cells.size()) != cols) {
      throw ParseError(fmt::format("row {}: expected {} columns, found {}", line_no, cols,
                                   cells.size()),
                       line_no, std::min<long>(static_cast<long>(cells.size()), cols) + 1);
    }
    if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      ++dropped;
      continue;
    }
    values.insert(values.end(), row.begin(), row.end());
  }
  if (cols <= 0 || (values.empty() && dropped == 0)) {
    throw ParseError("no numeric rows in input", line_no, 0);
  }
  CsvTable table;
  table.dropped_rows = dropped;
  table.had_header = header;
  const Index n = static_cast<Index>(values.size()) / cols;
  table.rows = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>(values.data(), n, cols);
  return table;
}

CsvTable read_csv(const std::string& path, Delimiter delimiter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open '{}'", path), 0, 0);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str(), delimiter);
}

DatasetSplit load_csv(const std::string& path, Delimiter delimiter,
                      const SplitFractions& fractions, std::uint64_t seed) {
  const CsvTable table = read_csv(path, delimiter);
  DatasetSplit split = split_and_standardize(table.rows, fractions, seed, "csv:" + path);
  split.dropped_rows = table.dropped_rows;
  return split;
}

void write_csv(const std::string& path, const Matrix& rows,
               const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path));
  if (!header.empty()) out << fmt::format("{}\n", fmt::join(header, ","));
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index j = 0; j < rows.cols(); ++j) {
      if (j > 0) out << ',';
      out << fmt::format("{:.6g}", rows(i, j));
    }
    out << '\n';
  }
}

}  // namespace otflow
