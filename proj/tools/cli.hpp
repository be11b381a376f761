#pragma once

#include "poisoncert/class_cert.hpp"
#include "poisoncert/data.hpp"
#include "poisoncert/mean_cert.hpp"
#include "poisoncert/meta.hpp"
#include "poisoncert/simulate.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace poisoncert::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kSolver = 3, kViolation = 4 };

struct AttackResult {
  std::string policy;
  double mean = 0.0;
  double stderr_ = 0.0;
  int seeds = 0;
  long T = 0;
  long burn_in = 0;
};

/// One certified (and optionally attacked) instance.
struct Record {
  std::string problem;  // "mean" or "class"
  int cell = 0;
  std::uint64_t seed = 0;
  double epsilon = 0.0;
  double eta = 0.0;
  std::optional<double> sigma;  // classification only
  std::optional<double> r;      // mean only
  std::string s_digest;         // mean only: trace and hash of S
  std::optional<double> certificate_solver, certificate_verified;
  std::string solver_status;
  std::string branch;
  std::string label;  // free-form tag, e.g. the defense name in meta runs
  double benign_loss = 0.0;
  std::optional<double> objective;  // benign + kappa * certificate (grid)
  std::vector<AttackResult> attack_results;
  bool violation = false;
  double wall_time = 0.0;
};

struct RunReport {
  std::string command;
  std::string subcommand;
  std::uint64_t config_hash = 0;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<Record> records;
  nlohmann::json summary = nlohmann::json::object();

  int violations() const;
};

/// Shared simulation settings.
struct SimSettings {
  long T = 50000;
  long burn_in = 10000;
  int seeds = 8;
  double step = 0.1;
  int pgd_steps = 10;
  int horizon = 1;
  int threads = 1;
};

std::vector<AttackPolicy> parse_attacks(const std::string& list, const SimSettings& sim);
std::vector<double> parse_list(const std::string& list);

/// Attack mean must not exceed the certificate by more than 2 stderr.
bool dominance_violated(double certificate, const AttackResult& a);

struct MeanCell {
  MeanInstance inst;
  std::vector<AttackPolicy> attacks;
  SimSettings sim;
  std::uint64_t seed = 0;
  MeanCertifyOptions certify;
};
Record run_mean_cell(const MeanCell& cell);

struct ClassCell {
  ClassInstance inst;
  std::vector<AttackPolicy> attacks;
  SimSettings sim;
  std::uint64_t seed = 0;
  ClassCertifyOptions certify;
};
Record run_class_cell(const ClassCell& cell);

/// Loads `blobs` (generated with n, d, margin, seed) or a feature CSV and
/// returns label-multiplied points in the unit ball.
Mat load_class_points(const std::string& source, int n, int d, double margin, int proj_dim, std::uint64_t seed);

struct ClassGrid {
  Mat points;
  std::vector<double> epsilons{0.01, 0.02, 0.03, 0.04, 0.05};
  std::vector<double> etas{5e-5, 1e-4, 5e-4, 1e-3, 5e-3};
  std::vector<double> sigmas{3e-3, 6e-3, 1e-2, 3e-2, 6e-2};
  std::vector<AttackPolicy> attacks;
  SimSettings sim;
  ClassCertifyOptions certify;
  double kappa = 1.0;
  std::uint64_t base_seed = 0;
  int threads = 1;
};
/// Cells in epsilon-major, then eta, then sigma order; cell i uses seed base ^ i.
std::vector<Record> run_class_grid(const ClassGrid& grid);

struct GridSummary {
  int monotone_pairs = 0;
  int monotone_violations = 0;
  nlohmann::json selected;  // best (eta, sigma) per epsilon
};
GridSummary summarize_grid(const std::vector<Record>& records, const std::vector<double>& epsilons,
                           double kappa);

nlohmann::json to_json(const Record& rec);
nlohmann::json to_json(const RunReport& report);
Record record_from_json(const nlohmann::json& j);

/// Fixed columns: epsilon, eta, sigma, certificate, attack_mean, attack_stderr, then policy.
void write_table(std::ostream& out, const std::vector<Record>& records);
/// report.json + table.csv + config.txt inside dir (created if missing).
void write_run(const RunReport& report, const std::string& dir);

/// Full command line entry point; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace poisoncert::cli
