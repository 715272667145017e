#pragma once

// Curve data: in-memory representation, CSV ingestion/emission and the
// synthetic piecewise-linear generator used by the simulation studies.

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "pwrm/errors.hpp"

namespace pwrm {

using Index = Eigen::Index;

/// A set of n curves observed on a shared grid of m time points.
struct CurveSet {
  Eigen::MatrixXd values;   // n x m, row i is curve i
  Eigen::VectorXd grid;     // m strictly increasing time points
  std::vector<int> labels;  // optional ground truth, 1-based

  Index n() const { return values.rows(); }
  Index m() const { return values.cols(); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (values.rows() < 1) throw InvalidData("curve set needs at least one curve");
    if (values.cols() < 2) throw InvalidData("curves need at least two time points");
    if (grid.size() != values.cols()) throw InvalidData("grid length does not match curve length");
    for (Index j = 1; j < grid.size(); ++j)
      if (!(grid[j] > grid[j - 1])) throw InvalidData("time grid must be strictly increasing");
    if (!values.allFinite()) throw InvalidData("curve values must be finite");
    if (!labels.empty()) {
      if (static_cast<Index>(labels.size()) != values.rows())
        throw InvalidData("label count does not match curve count");
      for (int l : labels)
        if (l < 1) throw InvalidData("labels must be positive integers");
    }
  }

  /// The curves at the given row indices, in that order.
  CurveSet subset(const std::vector<Index>& rows) const {
    CurveSet out;
    out.values.resize(static_cast<Index>(rows.size()), m());
    for (std::size_t r = 0; r < rows.size(); ++r) out.values.row(static_cast<Index>(r)) = values.row(rows[r]);
    out.grid = grid;
    if (has_labels()) {
      out.labels.reserve(rows.size());
      for (Index i : rows) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return out;
  }
};

inline Eigen::VectorXd default_grid(Index m) {
  return Eigen::VectorXd::LinSpaced(m, 1.0, static_cast<double>(m));
}

/// Declares how a CSV file is laid out. The grid header, when present, is
/// the first non-comment line and starts with the marker cell `#grid`.
struct CsvLayout {
  bool grid_header = false;
  bool label_column = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  auto issp = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && issp(s.front())) s.remove_prefix(1);
  while (!s.empty() && issp(s.back())) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return cells;
}

inline double parse_real(std::string_view cell, std::size_t row, std::size_t col) {
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
    throw ParseError(row, col, "non-numeric cell '" + std::string(cell) + "'");
  if (!std::isfinite(v)) throw ParseError(row, col, "non-finite value");
  return v;
}

inline int parse_label(std::string_view cell, std::size_t row, std::size_t col) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
    throw ParseError(row, col, "label is not an integer: '" + std::string(cell) + "'");
  if (v < 1) throw ParseError(row, col, "labels must be >= 1");
  return v;
}

inline bool is_grid_header(std::string_view line) {
  return trim(line).substr(0, 5) == "#grid";
}

inline bool is_comment(std::string_view line) {
  auto t = trim(line);
  return !t.empty() && t.front() == '#' && !is_grid_header(t);
}

inline std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Infers the layout of a stream: a `#grid` header is detected by its
/// marker; with a header, a label column is present iff data rows are as
/// wide as the header. Without a header the label column cannot be
/// inferred and is reported absent.
inline CsvLayout detect_layout(std::istream& in) {
  CsvLayout layout;
  std::string line;
  std::size_t header_width = 0;
  while (std::getline(in, line)) {
    auto t = detail::trim(line);
    if (t.empty() || detail::is_comment(t)) continue;
    if (detail::is_grid_header(t)) {
      layout.grid_header = true;
      header_width = detail::split_cells(t).size();
      continue;
    }
    if (layout.grid_header) layout.label_column = detail::split_cells(t).size() == header_width;
    break;
  }
  return layout;
}

inline CsvLayout detect_layout(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidData("cannot open " + path.string());
  return detect_layout(in);
}

inline CurveSet parse_csv(std::istream& in, CsvLayout layout) {
  std::vector<double> flat;
  std::vector<int> labels;
  std::vector<double> grid;
  std::size_t width = 0;  // data cells per row (excluding label)
  std::size_t rows = 0;
  std::size_t lineno = 0;
  bool seen_content = false;
  std::string line;
  const std::size_t lead = layout.label_column ? 1 : 0;

  while (std::getline(in, line)) {
    ++lineno;
    auto t = detail::trim(line);
    if (t.empty() || detail::is_comment(t)) continue;
    if (detail::is_grid_header(t)) {
      if (!layout.grid_header) throw ParseError(lineno, 0, "unexpected #grid header");
      if (seen_content) throw ParseError(lineno, 0, "#grid header must precede data rows");
      auto cells = detail::split_cells(t);
      for (std::size_t c = 1; c < cells.size(); ++c) grid.push_back(detail::parse_real(cells[c], lineno, c + 1));
      seen_content = true;
      continue;
    }
    if (layout.grid_header && grid.empty()) throw ParseError(lineno, 0, "missing #grid header");
    seen_content = true;
    auto cells = detail::split_cells(t);
    if (cells.size() <= lead) throw ParseError(lineno, 0, "row has no values");
    const std::size_t w = cells.size() - lead;
    if (rows == 0) {
      width = w;
    } else if (w != width) {
      throw ParseError(lineno, 0,
                       "ragged row: expected " + std::to_string(width) + " values, found " + std::to_string(w));
    }
    if (layout.label_column) labels.push_back(detail::parse_label(cells[0], lineno, 1));
    for (std::size_t c = lead; c < cells.size(); ++c) flat.push_back(detail::parse_real(cells[c], lineno, c + 1));
    ++rows;
  }

  if (rows == 0) throw InvalidData("no data rows");
  if (width < 2) throw InvalidData("curves need at least two time points");
  if (layout.grid_header && grid.size() != width)
    throw InvalidData("grid header has " + std::to_string(grid.size()) + " points but rows have " +
                      std::to_string(width));

  CurveSet cs;
  cs.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), static_cast<Index>(rows), static_cast<Index>(width));
  cs.grid = layout.grid_header ? Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(grid.data(), static_cast<Index>(grid.size())))
                               : default_grid(static_cast<Index>(width));
  cs.labels = std::move(labels);
  cs.validate();
  return cs;
}

inline CurveSet load_csv(const std::filesystem::path& path, CsvLayout layout) {
  std::ifstream in(path);
  if (!in) throw InvalidData("cannot open " + path.string());
  return parse_csv(in, layout);
}

/// Writes the curve CSV format: `#grid` header, then one row per curve,
/// prefixed by the label when the set carries labels. Values use the
/// shortest round-tripping decimal representation.
inline void write_csv(std::ostream& out, const CurveSet& cs) {
  out << "#grid";
  for (Index j = 0; j < cs.m(); ++j) out << ',' << detail::format_real(cs.grid[j]);
  out << '\n';
  for (Index i = 0; i < cs.n(); ++i) {
    if (cs.has_labels()) out << cs.labels[static_cast<std::size_t>(i)] << ',';
    for (Index j = 0; j < cs.m(); ++j) {
      if (j) out << ',';
      out << detail::format_real(cs.values(i, j));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Mean of one regime, a + b*j in the raw 1-based time index j.
struct RegimeMean {
  double intercept = 0.0;
  double slope = 0.0;
  double operator()(double j) const { return intercept + slope * j; }
};

struct ClusterSpec {
  std::vector<int> boundaries;  // 0 = xi_1 < ... < xi_{R+1} = m
  std::vector<RegimeMean> means;
  std::vector<double> sigmas;

  int regimes() const { return static_cast<int>(means.size()); }
};

struct SimulationSpec {
  int n = 100;
  int m = 160;
  std::vector<double> mixing;
  std::vector<ClusterSpec> clusters;
  std::uint64_t seed = 0;

  int K() const { return static_cast<int>(clusters.size()); }

  void validate() const {
    if (n < 1) throw InvalidData("n must be >= 1");
    if (m < 2) throw InvalidData("m must be >= 2");
    if (clusters.empty() || mixing.size() != clusters.size())
      throw InvalidData("mixing proportions and clusters disagree in count");
    double total = 0.0;
    for (double a : mixing) {
      if (!(a >= 0.0)) throw InvalidData("mixing proportions must be non-negative");
      total += a;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidData("mixing proportions must sum to 1");
    for (const auto& c : clusters) {
      const auto R = c.means.size();
      if (R == 0 || c.sigmas.size() != R || c.boundaries.size() != R + 1)
        throw InvalidData("cluster needs R means, R sigmas and R+1 boundaries");
      if (c.boundaries.front() != 0 || c.boundaries.back() != m)
        throw InvalidData("boundaries must start at 0 and end at m");
      for (std::size_t r = 0; r < R; ++r)
        if (c.boundaries[r + 1] <= c.boundaries[r]) throw InvalidData("boundaries must be strictly increasing");
      for (double s : c.sigmas)
        if (!(s >= 0.0)) throw InvalidData("negative sigma");
    }
  }
};

/// Draws z_i ~ Categorical(mixing), then y_ij = mean_kr(j) + sigma_kr * e.
/// Deterministic for a fixed spec (including seed).
inline CurveSet generate(const SimulationSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<double> cum(spec.mixing.size());
  std::partial_sum(spec.mixing.begin(), spec.mixing.end(), cum.begin());

  CurveSet cs;
  cs.values.resize(spec.n, spec.m);
  cs.grid = default_grid(spec.m);
  cs.labels.resize(static_cast<std::size_t>(spec.n));
  for (int i = 0; i < spec.n; ++i) {
    const double u = unif(rng);
    int k = 0;
    while (k + 1 < spec.K() && !(u < cum[static_cast<std::size_t>(k)])) ++k;
    // Skip zero-probability clusters that the cumulative scan could land on.
    while (spec.mixing[static_cast<std::size_t>(k)] == 0.0 && k > 0) --k;
    cs.labels[static_cast<std::size_t>(i)] = k + 1;
    const auto& c = spec.clusters[static_cast<std::size_t>(k)];
    for (int r = 0; r < c.regimes(); ++r) {
      const auto& mean = c.means[static_cast<std::size_t>(r)];
      const double sd = c.sigmas[static_cast<std::size_t>(r)];
      for (int j = c.boundaries[static_cast<std::size_t>(r)]; j < c.boundaries[static_cast<std::size_t>(r) + 1]; ++j)
        cs.values(i, j) = mean(static_cast<double>(j + 1)) + sd * noise(rng);
    }
  }
  return cs;
}

/// The two-cluster, five-regime piecewise-linear design on m = 160 points,
/// with `noise_shift` added to every regime standard deviation.
inline SimulationSpec table1_spec(double noise_shift = 0.0, std::uint64_t seed = 0) {
  SimulationSpec spec;
  spec.n = 100;
  spec.m = 160;
  spec.mixing = {0.5, 0.5};
  spec.seed = seed;

  ClusterSpec c1;
  c1.boundaries = {0, 20, 60, 115, 140, 160};
  c1.means = {{5.0, 0.0}, {2.5, 0.125}, {10.0, 0.0}, {10.0, 0.0}, {6.0, 0.0}};
  c1.sigmas = {0.8, 0.8, 0.6, 0.8, 0.8};

  ClusterSpec c2;
  c2.boundaries = {0, 20, 70, 90, 140, 160};
  c2.means = {{5.0, 0.0}, {3.0, 0.1}, {10.0, 0.0}, {10.0, 0.0}, {5.5, 0.0}};
  c2.sigmas = {0.8, 0.8, 0.8, 0.6, 0.8};

  spec.clusters = {c1, c2};
  for (auto& c : spec.clusters)
    for (double& s : c.sigmas) {
      s += noise_shift;
      if (s < 0.0) throw InvalidData("negative sigma");
    }
  return spec;
}

/// Unbalanced variant: mixing (0.2, 0.8), cluster-1 regimes 3 and 4 with
/// standard deviations 0.7 and 0.6.
inline SimulationSpec table1_unbalanced_spec(double noise_shift = 0.0, std::uint64_t seed = 0) {
  auto spec = table1_spec(0.0, seed);
  spec.mixing = {0.2, 0.8};
  spec.clusters[0].sigmas[2] = 0.7;
  spec.clusters[0].sigmas[3] = 0.6;
  for (auto& c : spec.clusters)
    for (double& s : c.sigmas) {
      s += noise_shift;
      if (s < 0.0) throw InvalidData("negative sigma");
    }
  return spec;
}

/// Sidecar metadata, one `key: value` pair per line.
inline void write_metadata(std::ostream& out, const SimulationSpec& spec) {
  auto join = [](const auto& xs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? " " : "") << xs[i];
    return os.str();
  };
  out << "n: " << spec.n << '\n';
  out << "m: " << spec.m << '\n';
  out << "K: " << spec.K() << '\n';
  out << "seed: " << spec.seed << '\n';
  std::vector<std::string> mix;
  for (double a : spec.mixing) mix.push_back(detail::format_real(a));
  out << "mixing: " << join(mix) << '\n';
  for (int k = 0; k < spec.K(); ++k) {
    const auto& c = spec.clusters[static_cast<std::size_t>(k)];
    std::vector<std::string> icpt, slope, sd;
    for (const auto& mean : c.means) {
      icpt.push_back(detail::format_real(mean.intercept));
      slope.push_back(detail::format_real(mean.slope));
    }
    for (double s : c.sigmas) sd.push_back(detail::format_real(s));
    out << "cluster" << k + 1 << ".boundaries: " << join(c.boundaries) << '\n';
    out << "cluster" << k + 1 << ".intercepts: " << join(icpt) << '\n';
    out << "cluster" << k + 1 << ".slopes: " << join(slope) << '\n';
    out << "cluster" << k + 1 << ".sigmas: " << join(sd) << '\n';
  }
}

}  // namespace pwrm
