// pwrm: generate curve data, fit mixtures, select models, evaluate, sweep.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pwrm/pwrm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pwrm;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

/// Thrown for command-line mistakes that the parser cannot catch.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return pwrm::detail::format_real(v);
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidData("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Key/value record written as manifest.txt, once per output directory.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& argv) : started_(utc_now()) {
    add("command", std::move(command));
    std::string line;
    for (const auto& a : argv) line += (line.empty() ? "" : " ") + a;
    add("argv", line);
    add("version", kVersion);
  }

  void add(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }
  void add(const std::string& key, double value) { add(key, real(value)); }
  void add(const std::string& key, std::int64_t value) { add(key, std::to_string(value)); }
  void add(const std::string& key, int value) { add(key, std::to_string(value)); }
  void add(const std::string& key, std::uint64_t value) { add(key, std::to_string(value)); }
  void add_input(const std::string& key, const fs::path& path) {
    add(key, fs::absolute(path).string());
    add(key + ".sha256", sha256_file(path));
  }

  void write(const fs::path& dir) const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    std::ofstream out(dir / "manifest.txt");
    for (const auto& [k, v] : entries_) out << k << ": " << v << '\n';
    out << "started_at: " << started_ << '\n';
    out << "wall_clock_seconds: " << std::fixed << std::setprecision(3) << secs << '\n';
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::string started_;
  std::chrono::steady_clock::time_point clock_ = std::chrono::steady_clock::now();
};

std::map<std::string, std::string> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidData("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(": ");
    if (colon != std::string::npos) kv[line.substr(0, colon)] = line.substr(colon + 2);
  }
  return kv;
}

fs::path prepare_dir(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidData("cannot write " + path.string());
  return out;
}

CurveSet load_curves(const fs::path& path) { return load_csv(path, detect_layout(path)); }

// ---------------------------------------------------------------------------
// Tabular outputs. Header lines start with '#', so every file reads back
// through load_csv as a numeric table.

void write_labels(const fs::path& path, const std::vector<int>& labels0) {
  auto out = open_out(path);
  out << "# curve,label\n";
  for (std::size_t i = 0; i < labels0.size(); ++i) out << i + 1 << ',' << labels0[i] + 1 << '\n';
}

void write_tau(const fs::path& path, const Eigen::MatrixXd& tau) {
  auto out = open_out(path);
  out << "# curve";
  for (Index k = 0; k < tau.cols(); ++k) out << ",tau" << k + 1;
  out << '\n';
  for (Index i = 0; i < tau.rows(); ++i) {
    out << i + 1;
    for (Index k = 0; k < tau.cols(); ++k) out << ',' << real(tau(i, k));
    out << '\n';
  }
}

void write_trace(const fs::path& path, const std::string& name, const std::vector<double>& trace) {
  auto out = open_out(path);
  out << "# iteration," << name << '\n';
  for (std::size_t q = 0; q < trace.size(); ++q) out << q << ',' << real(trace[q]) << '\n';
}

/// Prototypes in the curve format: `#grid` header, cluster number as label.
void write_prototypes(const fs::path& path, const Eigen::VectorXd& grid, const std::vector<Eigen::VectorXd>& g) {
  CurveSet cs;
  cs.grid = grid;
  cs.values.resize(static_cast<Index>(g.size()), grid.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    cs.values.row(static_cast<Index>(k)) = g[k].transpose();
    cs.labels.push_back(static_cast<int>(k) + 1);
  }
  auto out = open_out(path);
  write_csv(out, cs);
}

struct SegmentRow {
  int cluster, segment, begin, end;
  double sigma2;
  Eigen::VectorXd beta;
};

/// Models without per-segment variances leave sigma2 NaN; the column is
/// then omitted.
void write_segments(const fs::path& path, const Eigen::VectorXd& grid, const std::vector<SegmentRow>& rows, int p) {
  const bool sigma = std::none_of(rows.begin(), rows.end(), [](const SegmentRow& r) { return std::isnan(r.sigma2); });
  auto out = open_out(path);
  out << "# cluster,segment,begin,end,t_begin,t_end" << (sigma ? ",sigma2" : "");
  for (int q = 0; q <= p; ++q) out << ",beta" << q;
  out << '\n';
  for (const auto& r : rows) {
    out << r.cluster + 1 << ',' << r.segment + 1 << ',' << r.begin << ',' << r.end << ',' << real(grid[r.begin])
        << ',' << real(grid[r.end - 1]);
    if (sigma) out << ',' << real(r.sigma2);
    for (Index q = 0; q < r.beta.size(); ++q) out << ',' << real(r.beta[q]);
    out << '\n';
  }
}

json events_json(const std::vector<FitEvent>& events) {
  json a = json::array();
  for (const auto& e : events)
    a.push_back({{"kind", to_string(e.kind)},
                 {"restart", e.restart},
                 {"iteration", e.iteration},
                 {"cluster", e.cluster + 1},
                 {"detail", e.detail}});
  return a;
}

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// ---------------------------------------------------------------------------
// Fitting

enum class Model { PwrmEm, PwrmCem, KMeans, PrmEm, PrmCem, GmmEm };

const std::map<std::string, Model> kModels{{"pwrm-em", Model::PwrmEm}, {"pwrm-cem", Model::PwrmCem},
                                           {"kmeans", Model::KMeans},  {"prm-em", Model::PrmEm},
                                           {"prm-cem", Model::PrmCem}, {"gmm-em", Model::GmmEm}};

struct FitOptions {
  std::string model = "pwrm-em";
  int K = 2;
  std::vector<int> R{5};
  int p = 1;
  int restarts = 10;
  double tol = 1e-6;
  int max_iter = 1000;
  std::uint64_t seed = 0;
  std::string covariance = "diag";
  std::string segmentation_init = "random";

  FitConfig config(int threads) const {
    FitConfig c;
    c.K = K;
    c.R = R;
    c.p = p;
    c.n_restarts = restarts;
    c.tol = tol;
    c.max_iter = max_iter;
    c.seed = seed;
    c.threads = threads;
    if (segmentation_init == "uniform") c.segmentation_init = SegmentationInit::Uniform;
    else if (segmentation_init == "optimal") c.segmentation_init = SegmentationInit::Optimal;
    else c.segmentation_init = SegmentationInit::RandomContiguous;
    return c;
  }

  void echo(Manifest& m) const {
    m.add("model", model);
    m.add("K", K);
    std::string r;
    for (int x : R) r += (r.empty() ? "" : ",") + std::to_string(x);
    m.add("R", r);
    m.add("p", p);
    m.add("restarts", restarts);
    m.add("tol", tol);
    m.add("max_iter", max_iter);
    m.add("seed", seed);
    m.add("covariance", covariance);
    m.add("segmentation_init", segmentation_init);
  }
};

void add_fit_flags(CLI::App* cmd, FitOptions& o) {
  cmd->add_option("--model", o.model, "Model to fit")
      ->check(CLI::IsMember({"pwrm-em", "pwrm-cem", "kmeans", "prm-em", "prm-cem", "gmm-em"}))
      ->capture_default_str();
  cmd->add_option("--K", o.K, "Number of clusters")->capture_default_str();
  cmd->add_option("--R", o.R, "Regimes per cluster: one value or K comma-separated values")
      ->delimiter(',')
      ->capture_default_str();
  cmd->add_option("--p", o.p, "Polynomial degree")->capture_default_str();
  cmd->add_option("--restarts", o.restarts, "Random restarts")->capture_default_str();
  cmd->add_option("--tol", o.tol, "Relative convergence tolerance")->capture_default_str();
  cmd->add_option("--max-iter", o.max_iter, "Iteration cap per restart")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Base seed")->capture_default_str();
  cmd->add_option("--covariance", o.covariance, "GMM covariance")
      ->check(CLI::IsMember({"diag", "spherical"}))
      ->capture_default_str();
  cmd->add_option("--segmentation-init", o.segmentation_init, "First segmentation of each restart")
      ->check(CLI::IsMember({"random", "uniform", "optimal"}))
      ->capture_default_str();
}

/// Everything a fit command writes, independent of the model.
struct FitOutput {
  json params;
  std::vector<int> labels;  // 0-based
  std::optional<Eigen::MatrixXd> tau;
  std::string trace_name;
  std::vector<double> trace;
  std::vector<Eigen::VectorXd> prototypes;
  std::vector<SegmentRow> segments;
};

json summary_json(const std::string& model, double L, double Lc, int nu, Index n) {
  return {{"model", model},
          {"log_likelihood", finite_or_null(L)},
          {"complete_log_likelihood", finite_or_null(Lc)},
          {"free_parameters", nu},
          {"bic", finite_or_null(bic(L, nu, n))},
          {"icl", finite_or_null(icl(Lc, nu, n))}};
}

template <class Params>
void fill_common(FitOutput& out, const FitResult<Params>& fit, const std::string& trace_name) {
  out.labels = fit.labels;
  out.tau = fit.tau;
  out.trace_name = trace_name;
  out.trace = fit.criterion_trace;
  out.params["iterations"] = fit.iterations;
  out.params["converged"] = fit.converged;
  out.params["restart"] = fit.restart;
  out.params["degenerate"] = fit.degenerate;
  out.params["events"] = events_json(fit.events);
}

FitOutput run_fit(const CurveSet& cs, const FitOptions& o, int threads) {
  const Model model = kModels.at(o.model);
  FitConfig cfg = o.config(threads);
  FitOutput out;
  const Index n = cs.n();
  switch (model) {
    case Model::PwrmEm:
    case Model::PwrmCem: {
      const bool em = model == Model::PwrmEm;
      const auto fit = em ? fit_em(cs, cfg) : fit_cem(cs, cfg);
      const PolyBasis basis(cs.grid, cfg.p);
      out.params = summary_json(o.model, fit.log_likelihood, fit.complete_log_likelihood,
                                fit.params.free_parameters(), n);
      out.params["K"] = fit.params.K();
      out.params["degree"] = fit.params.degree;
      out.params["alpha"] = vec_json(fit.params.alpha);
      json clusters = json::array();
      for (int k = 0; k < fit.params.K(); ++k) {
        const auto& c = fit.params.clusters[static_cast<std::size_t>(k)];
        json segs = json::array();
        for (int r = 0; r < c.regimes(); ++r) {
          const auto& f = c.fits[static_cast<std::size_t>(r)];
          segs.push_back({{"begin", c.segmentation.begin(r)},
                          {"end", c.segmentation.end(r)},
                          {"beta", vec_json(f.beta)},
                          {"sigma2", f.sigma2},
                          {"floored", f.floored}});
          out.segments.push_back({k, r, c.segmentation.begin(r), c.segmentation.end(r), f.sigma2, f.beta});
        }
        clusters.push_back({{"segments", segs}});
      }
      out.params["clusters"] = clusters;
      fill_common(out, fit, em ? "log_likelihood" : "complete_log_likelihood");
      out.prototypes = prototypes(cs, fit);
      break;
    }
    case Model::KMeans: {
      if (cfg.p != 0) throw InvalidData("kmeans requires p=0");
      const auto fit = fit_kmeans_like(cs, cfg);
      const int nu = fit.model.free_parameters();
      out.params = {{"model", o.model},
                    {"distortion", fit.distortion},
                    {"free_parameters", nu},
                    {"icl", icl(fit, n)},
                    {"K", fit.model.K()},
                    {"degree", 0}};
      json clusters = json::array();
      for (int k = 0; k < fit.model.K(); ++k) {
        const auto& s = fit.model.segmentations[static_cast<std::size_t>(k)];
        const auto& g = fit.model.prototypes[static_cast<std::size_t>(k)];
        json segs = json::array();
        for (int r = 0; r < s.segments(); ++r) {
          const double level = g[s.begin(r)];
          segs.push_back({{"begin", s.begin(r)}, {"end", s.end(r)}, {"level", level}});
          out.segments.push_back({k, r, s.begin(r), s.end(r), std::nan(""), Eigen::VectorXd::Constant(1, level)});
        }
        clusters.push_back({{"segments", segs}});
      }
      out.params["clusters"] = clusters;
      out.params["iterations"] = fit.iterations;
      out.params["converged"] = fit.converged;
      out.params["restart"] = fit.restart;
      out.params["events"] = events_json(fit.events);
      out.labels = fit.labels;
      out.trace_name = "distortion";
      out.trace = fit.distortion_trace;
      out.prototypes = prototypes(cs, fit);
      break;
    }
    case Model::PrmEm:
    case Model::PrmCem: {
      const bool em = model == Model::PrmEm;
      const auto fit = fit_prm(cs, cfg, em ? PrmAlgorithm::Em : PrmAlgorithm::Cem);
      out.params = summary_json(o.model, fit.log_likelihood, fit.complete_log_likelihood,
                                fit.params.free_parameters(), n);
      out.params["K"] = fit.params.K();
      out.params["degree"] = fit.params.degree;
      out.params["alpha"] = vec_json(fit.params.alpha);
      json clusters = json::array();
      for (int k = 0; k < fit.params.K(); ++k) {
        const auto& beta = fit.params.beta[static_cast<std::size_t>(k)];
        const double s2 = fit.params.sigma2[static_cast<std::size_t>(k)];
        clusters.push_back({{"beta", vec_json(beta)}, {"sigma2", s2}});
        out.segments.push_back({k, 0, 0, static_cast<int>(cs.m()), s2, beta});
      }
      out.params["clusters"] = clusters;
      fill_common(out, fit, em ? "log_likelihood" : "complete_log_likelihood");
      out.prototypes = prototypes(cs, fit);
      break;
    }
    case Model::GmmEm: {
      const auto cov = o.covariance == "spherical" ? Covariance::Spherical : Covariance::Diagonal;
      const auto fit = fit_gmm(cs, cfg, cov);
      out.params = summary_json(o.model, fit.log_likelihood, fit.complete_log_likelihood,
                                fit.params.free_parameters(), n);
      out.params["K"] = fit.params.K();
      out.params["covariance"] = o.covariance;
      out.params["alpha"] = vec_json(fit.params.alpha);
      json clusters = json::array();
      for (int k = 0; k < fit.params.K(); ++k)
        clusters.push_back({{"mean", vec_json(fit.params.means[static_cast<std::size_t>(k)])},
                            {"variance", vec_json(fit.params.variances[static_cast<std::size_t>(k)])}});
      out.params["clusters"] = clusters;
      fill_common(out, fit, "log_likelihood");
      out.prototypes = prototypes(cs, fit);
      break;
    }
  }
  out.params["time_basis"] = {{"t0", cs.grid[0]}, {"t1", cs.grid[cs.m() - 1]},
                              {"note", "beta applies to powers of (t - t0) / (t1 - t0)"}};
  return out;
}

void write_fit(const fs::path& dir, const CurveSet& cs, const FitOutput& f, int p) {
  {
    auto out = open_out(dir / "params.json");
    out << f.params.dump(2) << '\n';
  }
  write_labels(dir / "labels.csv", f.labels);
  if (f.tau) write_tau(dir / "tau.csv", *f.tau);
  write_trace(dir / "trace.csv", f.trace_name, f.trace);
  write_prototypes(dir / "prototypes.csv", cs.grid, f.prototypes);
  if (!f.segments.empty()) write_segments(dir / "segments.csv", cs.grid, f.segments, p);
}

// ---------------------------------------------------------------------------
// Commands

struct GenerateOptions {
  bool table1 = false;
  bool unbalanced = false;
  double noise_shift = 0.0;
  std::uint64_t seed = 0;
  std::string spec_file;
  std::string out = ".";
};

ClusterSpec cluster_from_json(const json& j) {
  ClusterSpec c;
  c.boundaries = j.at("boundaries").get<std::vector<int>>();
  for (const auto& mu : j.at("means")) {
    RegimeMean r;
    if (mu.is_number()) {
      r.intercept = mu.get<double>();
    } else {
      r.intercept = mu.value("intercept", 0.0);
      r.slope = mu.value("slope", 0.0);
    }
    c.means.push_back(r);
  }
  c.sigmas = j.at("sigmas").get<std::vector<double>>();
  return c;
}

/// Custom generator input: {"n", "m", "mixing", "clusters": [{"boundaries",
/// "means", "sigmas"}]} with means given as numbers or {intercept, slope}.
SimulationSpec spec_from_json(const fs::path& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw InvalidData("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
    SimulationSpec s;
    s.n = j.value("n", s.n);
    s.m = j.value("m", s.m);
    s.mixing = j.at("mixing").get<std::vector<double>>();
    for (const auto& c : j.at("clusters")) s.clusters.push_back(cluster_from_json(c));
    s.seed = seed;
    return s;
  } catch (const json::exception& e) {
    throw InvalidData(std::string("bad simulation spec: ") + e.what());
  }
}

int cmd_generate(const GenerateOptions& o, Manifest& m) {
  if (o.table1 == !o.spec_file.empty()) throw UsageError("give exactly one of --table1 or --spec");
  SimulationSpec spec;
  if (o.table1) {
    spec = o.unbalanced ? table1_unbalanced_spec(o.noise_shift, o.seed) : table1_spec(o.noise_shift, o.seed);
  } else {
    if (o.unbalanced || o.noise_shift != 0.0) throw UsageError("--unbalanced and --noise-shift need --table1");
    spec = spec_from_json(o.spec_file, o.seed);
    m.add_input("spec", o.spec_file);
  }
  const auto cs = generate(spec);
  const auto dir = prepare_dir(o.out);
  {
    auto out = open_out(dir / "curves.csv");
    write_csv(out, cs);
  }
  {
    std::vector<int> z0;
    for (int l : cs.labels) z0.push_back(l - 1);
    write_labels(dir / "truth.csv", z0);
  }
  {
    auto out = open_out(dir / "spec.txt");
    write_metadata(out, spec);
  }
  m.add("preset", o.table1 ? (o.unbalanced ? "table1-unbalanced" : "table1") : "custom");
  m.add("noise_shift", o.noise_shift);
  m.add("seed", o.seed);
  m.add("n", static_cast<std::int64_t>(cs.n()));
  m.add("m", static_cast<std::int64_t>(cs.m()));
  m.write(dir);
  std::cout << "wrote " << cs.n() << " curves of length " << cs.m() << " to " << (dir / "curves.csv").string()
            << '\n';
  return 0;
}

int cmd_fit(const FitOptions& o, const std::string& input, const std::string& outdir, int threads, Manifest& m) {
  const auto cs = load_curves(input);
  m.add_input("input", input);
  o.echo(m);
  m.add("threads", threads);
  const auto f = run_fit(cs, o, threads);
  const auto dir = prepare_dir(outdir);
  write_fit(dir, cs, f, o.model == "kmeans" ? 0 : o.p);
  if (cs.has_labels()) {
    const auto match = misclassification(cs.labels, f.labels);
    m.add("misclassification_vs_input_labels", match.rate);
  }
  m.write(dir);
  std::cout << o.model << ": ";
  for (const char* key : {"log_likelihood", "complete_log_likelihood", "distortion", "bic", "icl"})
    if (f.params.contains(key) && !f.params[key].is_null()) std::cout << key << '=' << f.params[key] << ' ';
  std::cout << '\n';
  return 0;
}

IntRange parse_range(const std::string& s) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, dots)), std::stoi(s.substr(dots + 2))};
  } catch (const std::logic_error&) {
    throw UsageError("bad range '" + s + "', expected lo..hi");
  }
}

SelectionGridSpec parse_grid(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
  if (parts.size() != 3) throw UsageError("--grid expects Kmin..Kmax,Rmin..Rmax,pmin..pmax");
  return {parse_range(parts[0]), parse_range(parts[1]), parse_range(parts[2])};
}

int cmd_select(const FitOptions& o, const std::string& grid, const std::string& criterion, const std::string& input,
               const std::string& outdir, int threads, Manifest& m) {
  const auto cs = load_curves(input);
  m.add_input("input", input);
  const auto spec = parse_grid(grid);
  const Algorithm algo = o.model == "pwrm-em"    ? Algorithm::PwrmEm
                         : o.model == "pwrm-cem" ? Algorithm::PwrmCem
                         : o.model == "kmeans"   ? Algorithm::KMeansLike
                                                 : throw UsageError("select supports pwrm-em, pwrm-cem, kmeans");
  const Criterion crit = criterion == "bic" ? Criterion::Bic : Criterion::Icl;
  m.add("grid", grid);
  m.add("criterion", criterion);
  o.echo(m);
  m.add("threads", threads);
  const auto g = select_model(cs, spec, algo, crit, o.config(threads));
  const auto dir = prepare_dir(outdir);
  {
    auto out = open_out(dir / "grid.csv");
    out << "K,R,p,status,log_likelihood,complete_log_likelihood,free_parameters,bic,icl,iterations,note\n";
    for (const auto& c : g.cells)
      out << c.K << ',' << c.R << ',' << c.p << ',' << to_string(c.status) << ',' << real(c.log_likelihood) << ','
          << real(c.complete_log_likelihood) << ',' << c.free_parameters << ',' << real(c.bic) << ','
          << real(c.icl) << ',' << c.iterations << ',' << '"' << c.note << '"' << '\n';
  }
  const auto& b = g.best();
  {
    auto out = open_out(dir / "chosen.txt");
    out << "K: " << b.K << "\nR: " << b.R << "\np: " << b.p << "\n" << criterion << ": " << real(b.score(crit))
        << '\n';
  }
  m.add("chosen", std::to_string(b.K) + "," + std::to_string(b.R) + "," + std::to_string(b.p));
  m.write(dir);
  std::cout << "chosen K=" << b.K << " R=" << b.R << " p=" << b.p << ' ' << criterion << '=' << real(b.score(crit))
            << '\n';
  return 0;
}

/// Truth labels from a labelled curve CSV or a `curve,label` table.
std::vector<int> load_truth(const fs::path& path) {
  const auto layout = detect_layout(path);
  if (layout.grid_header) {
    const auto cs = load_csv(path, layout);
    if (!cs.has_labels()) throw InvalidData(path.string() + " carries no labels");
    return cs.labels;
  }
  const auto t = load_csv(path, layout);
  std::vector<int> labels;
  for (Index i = 0; i < t.n(); ++i) {
    const double v = t.values(i, t.m() - 1);
    if (v != std::floor(v)) throw InvalidData("label column must hold integers");
    labels.push_back(static_cast<int>(v));
  }
  return labels;
}

int cmd_evaluate(const std::string& fit_dir, const std::string& truth, std::string input, Manifest& m) {
  const fs::path dir(fit_dir);
  if (input.empty()) {
    const auto kv = read_manifest(dir / "manifest.txt");
    const auto it = kv.find("input");
    if (it == kv.end()) throw InvalidData("fit manifest names no input; pass --input");
    input = it->second;
  }
  const auto cs = load_curves(input);
  const auto labels1 = load_truth(dir / "labels.csv");
  std::vector<int> est;
  for (int l : labels1) est.push_back(l - 1);
  const auto protos_cs = load_curves(dir / "prototypes.csv");
  std::vector<Eigen::VectorXd> g;
  for (Index k = 0; k < protos_cs.n(); ++k) g.push_back(protos_cs.values.row(k).transpose());
  for (int z : est)
    if (z < 0 || z >= static_cast<int>(g.size())) throw InvalidData("label without a prototype");
  if (static_cast<Index>(est.size()) != cs.n()) throw InvalidData("label count does not match curve count");
  const double inertia = intra_inertia(cs, est, g);

  m.add("fit", fs::absolute(dir).string());
  m.add_input("input", input);
  json report{{"intra_inertia", inertia}};
  if (!truth.empty()) {
    m.add_input("truth", truth);
    const auto match = misclassification(load_truth(truth), est);
    // Estimated cluster k+1 -> true label.
    std::vector<int> perm(match.permutation.begin(),
                          match.permutation.begin() + std::min(match.permutation.size(), g.size()));
    report["misclassification_rate"] = match.rate;
    report["errors"] = match.errors;
    report["matching"] = perm;
  }
  const auto out_dir = dir / "eval";
  fs::create_directories(out_dir);
  {
    auto out = open_out(out_dir / "report.json");
    out << report.dump(2) << '\n';
  }
  m.write(out_dir);
  std::cout << report.dump() << '\n';
  return 0;
}

struct SweepOptions {
  std::vector<double> noise_levels{0.0, 0.5, 1.0, 1.5};
  int datasets = 10;
  std::vector<std::string> algorithms{"pwrm-em", "pwrm-cem", "kmeans", "prm-em", "prm-cem", "gmm-em"};
  bool unbalanced = false;
  int prm_degree = 10;
  std::string out = "sweep";
};

int cmd_sweep(const SweepOptions& s, const FitOptions& base, int threads, Manifest& m) {
  for (const auto& a : s.algorithms)
    if (!kModels.count(a)) throw UsageError("unknown algorithm '" + a + "'");
  if (s.datasets < 1) throw UsageError("--datasets must be >= 1");
  const auto dir = prepare_dir(s.out);
  auto out = open_out(dir / "sweep.csv");
  out << "noise_shift,dataset,algorithm,misclassification\n";
  std::map<std::pair<double, std::string>, double> sums;
  for (double shift : s.noise_levels) {
    for (int d = 0; d < s.datasets; ++d) {
      const std::uint64_t seed = base.seed + static_cast<std::uint64_t>(d);
      const auto cs = generate(s.unbalanced ? table1_unbalanced_spec(shift, seed) : table1_spec(shift, seed));
      for (const auto& a : s.algorithms) {
        FitOptions o = base;
        o.model = a;
        o.seed = seed;
        if (a == "kmeans") o.p = 0;
        if (a == "prm-em" || a == "prm-cem") o.p = s.prm_degree;
        const auto f = run_fit(cs, o, threads);
        const double rate = misclassification(cs.labels, f.labels).rate;
        sums[{shift, a}] += rate;
        out << real(shift) << ',' << d + 1 << ',' << a << ',' << real(rate) << '\n';
      }
    }
  }
  auto mean = open_out(dir / "sweep_mean.csv");
  mean << "noise_shift,algorithm,mean_misclassification\n";
  for (double shift : s.noise_levels)
    for (const auto& a : s.algorithms) {
      const double v = sums[{shift, a}] / s.datasets;
      mean << real(shift) << ',' << a << ',' << real(v) << '\n';
      std::cout << "shift " << real(shift) << ' ' << a << ' ' << real(v) << '\n';
    }
  std::string levels, algos;
  for (double v : s.noise_levels) levels += (levels.empty() ? "" : ",") + real(v);
  for (const auto& a : s.algorithms) algos += (algos.empty() ? "" : ",") + a;
  m.add("noise_levels", levels);
  m.add("datasets", s.datasets);
  m.add("algorithms", algos);
  m.add("preset", s.unbalanced ? "table1-unbalanced" : "table1");
  m.add("prm_degree", s.prm_degree);
  base.echo(m);
  m.add("threads", threads);
  m.write(dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustering and segmentation of curves with piecewise regression mixtures"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for restarts and grid cells")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.fallthrough();

  GenerateOptions gen;
  auto* g = app.add_subcommand("generate", "Simulate labelled curves");
  g->add_flag("--table1", gen.table1, "Two-cluster, five-regime benchmark");
  g->add_flag("--unbalanced", gen.unbalanced, "Benchmark with proportions 0.2/0.8");
  g->add_option("--noise-shift", gen.noise_shift, "Added to every noise standard deviation");
  g->add_option("--spec", gen.spec_file, "JSON description of a custom simulation")->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output directory")->capture_default_str();

  FitOptions fit_opts;
  std::string fit_input, fit_out = "fit";
  auto* f = app.add_subcommand("fit", "Fit one model");
  add_fit_flags(f, fit_opts);
  f->add_option("--input", fit_input, "Curve CSV")->required()->check(CLI::ExistingFile);
  f->add_option("-o,--out", fit_out, "Output directory")->capture_default_str();

  FitOptions sel_opts;
  sel_opts.model = "pwrm-cem";
  std::string grid = "1..5,1..8,0..3", criterion = "icl", sel_input, sel_out = "select";
  auto* s = app.add_subcommand("select", "Choose (K, R, p) by BIC or ICL");
  add_fit_flags(s, sel_opts);
  s->add_option("--grid", grid, "Kmin..Kmax,Rmin..Rmax,pmin..pmax")->capture_default_str();
  s->add_option("--criterion", criterion)->check(CLI::IsMember({"bic", "icl"}))->capture_default_str();
  s->add_option("--input", sel_input, "Curve CSV")->required()->check(CLI::ExistingFile);
  s->add_option("-o,--out", sel_out, "Output directory")->capture_default_str();

  std::string eval_fit, eval_truth, eval_input;
  auto* e = app.add_subcommand("evaluate", "Score a fit against true labels");
  e->add_option("--fit", eval_fit, "Fit output directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--truth", eval_truth, "Labelled curve CSV or curve,label table")->check(CLI::ExistingFile);
  e->add_option("--input", eval_input, "Curve CSV (default: the fit's input)")->check(CLI::ExistingFile);

  SweepOptions sweep;
  FitOptions sweep_fit;
  sweep_fit.restarts = 10;
  auto* w = app.add_subcommand("sweep", "Misclassification versus noise level on simulated data");
  add_fit_flags(w, sweep_fit);
  w->add_option("--noise-levels", sweep.noise_levels, "Noise shifts")->delimiter(',')->capture_default_str();
  w->add_option("--datasets", sweep.datasets, "Datasets per noise level")->capture_default_str();
  w->add_option("--algorithms", sweep.algorithms, "Models to compare")->delimiter(',')->capture_default_str();
  w->add_flag("--unbalanced", sweep.unbalanced, "Use the unbalanced benchmark");
  w->add_option("--prm-degree", sweep.prm_degree, "Polynomial degree for PRM")->capture_default_str();
  w->add_option("-o,--out", sweep.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitUsage;
  }

  const std::vector<std::string> args(argv, argv + argc);
  try {
    if (*g) {
      Manifest m("generate", args);
      return cmd_generate(gen, m);
    }
    if (*f) {
      Manifest m("fit", args);
      return cmd_fit(fit_opts, fit_input, fit_out, threads, m);
    }
    if (*s) {
      Manifest m("select", args);
      return cmd_select(sel_opts, grid, criterion, sel_input, sel_out, threads, m);
    }
    if (*e) {
      Manifest m("evaluate", args);
      return cmd_evaluate(eval_fit, eval_truth, eval_input, m);
    }
    if (*w) {
      Manifest m("sweep", args);
      return cmd_sweep(sweep, sweep_fit, threads, m);
    }
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const InvalidData& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const InfeasibleSegmentation& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const Error& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitNumerical;
  }
  return kExitUsage;
}
