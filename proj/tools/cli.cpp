#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace poisoncert::cli {

using nlohmann::json;

namespace {

// Shortest decimal that reads back to the same double.
std::string fmt_double(double v) {
  char buf[40];
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split_commas(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int resolve_threads(int threads) {
  require(threads >= 0, "--threads must be >= 0");
  if (threads == 0) return std::max(1u, std::thread::hardware_concurrency());
  return threads;
}

/// Runs fn(i) for i in [0, n) on a small pool; the first exception wins.
template <class Fn>
void parallel_for(int n, int threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string matrix_digest(const Mat& S) {
  std::ostringstream text;
  for (Eigen::Index i = 0; i < S.size(); ++i) text << fmt_double(S.data()[i]) << ';';
  char buf[64];
  std::snprintf(buf, sizeof buf, "trace=%.6g fnv=%s", S.trace(), hex64(fnv1a(text.str())).c_str());
  return buf;
}

std::vector<AttackResult> simulate_attacks(const LearningRule& rule, const ContaminatedStream& stream,
                                           const AdversarialObjective& obj, const Region& adv_set,
                                           const std::vector<AttackPolicy>& attacks, const SimSettings& sim,
                                           std::uint64_t seed, const Vec& theta0) {
  std::vector<AttackResult> out;
  for (const AttackPolicy& policy : attacks) {
    const auto runs =
        run_seeds(rule, stream, obj, policy, adv_set, sim.T, sim.burn_in, seed, sim.seeds, theta0, sim.threads);
    const RewardEstimate est = estimate_avg_reward(runs);
    out.push_back({policy.name(), est.mean, est.stderr_, est.runs, sim.T, sim.burn_in});
  }
  return out;
}

void mark_violation(Record& rec) {
  rec.violation = false;
  if (!rec.certificate_verified) return;
  for (const AttackResult& a : rec.attack_results)
    if (dominance_violated(*rec.certificate_verified, a)) rec.violation = true;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

double hinge_mean(const Mat& points, const Vec& theta) {
  return (1.0 - (points * theta).array()).max(0.0).mean();
}

// ---------------------------------------------------------------- options

/// Canonical "name=value" lines of every option of a subcommand except the
/// output directory and thread count, which do not change results.
std::vector<std::pair<std::string, std::string>> canonical_config(const CLI::App& app) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const CLI::Option* opt : app.get_options()) {
    if (opt == app.get_help_ptr()) continue;
    const std::string key = opt->get_single_name();
    if (key == "out" || key == "threads") continue;
    std::string value;
    if (opt->get_type_size() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else {
      std::vector<std::string> parts;
      if (opt->count() > 0) {
        for (const std::string& r : opt->results())
          for (const std::string& p : split_commas(r)) parts.push_back(p);
      } else {
        parts = split_commas(opt->get_default_str());
      }
      for (std::string& p : parts) {
        char* end = nullptr;
        const double v = std::strtod(p.c_str(), &end);
        if (end && *end == '\0' && end != p.c_str()) p = fmt_double(v);
      }
      for (std::size_t i = 0; i < parts.size(); ++i) value += (i ? "," : "") + parts[i];
    }
    out.emplace_back(key, value);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t config_hash(const std::string& sub, const std::vector<std::pair<std::string, std::string>>& cfg) {
  std::string text = sub + "\n";
  for (const auto& [k, v] : cfg) text += k + "=" + v + "\n";
  return fnv1a(text);
}

struct Common {
  std::uint64_t seed = 0;
  std::string out = "poisoncert_out";
  int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Base random seed")->capture_default_str();
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads (0 = all cores)")->capture_default_str();
}

struct SimArgs {
  SimSettings sim;
  std::string attacks;
};

void add_sim(CLI::App* app, SimArgs& a, const std::string& default_attacks) {
  a.attacks = default_attacks;
  app->add_option("--attacks", a.attacks, "Comma list: none,greedy,fgsm,pgd,label_flip")->capture_default_str();
  app->add_option("--T", a.sim.T, "Steps per trajectory")->capture_default_str();
  app->add_option("--burn-in", a.sim.burn_in, "Steps discarded before averaging")->capture_default_str();
  app->add_option("--seeds", a.sim.seeds, "Independent trajectories per attack")->capture_default_str();
  app->add_option("--step", a.sim.step, "FGSM/PGD ascent step")->capture_default_str();
  app->add_option("--pgd-steps", a.sim.pgd_steps, "PGD iterations")->capture_default_str();
  app->add_option("--horizon", a.sim.horizon, "Lookahead depth of gradient attacks")->capture_default_str();
}

struct MeanArgs {
  int d = 2;
  double epsilon = 0.05;
  double eta = 0.1;
  double r = 1.0;
  double s = 0.0;
};

void add_mean(CLI::App* app, MeanArgs& a, bool with_point) {
  app->add_option("--d", a.d, "Dimension")->capture_default_str();
  if (with_point) {
    app->add_option("--epsilon", a.epsilon, "Contamination rate")->capture_default_str();
    app->add_option("--eta", a.eta, "Learning rate")->capture_default_str();
  }
  app->add_option("--r", a.r, "Adversary budget ||z - mu||^2 <= r")->capture_default_str();
  app->add_option("--s", a.s, "Defense noise S = s I")->capture_default_str();
}

MeanInstance mean_instance(const MeanArgs& a, double epsilon, double eta, std::uint64_t seed) {
  require(a.d >= 1, "--d must be >= 1");
  const MeanTask task = gen_gaussian_task(a.d, seed);
  MeanInstance inst{task.mu, task.Sigma, eta, a.s * Mat::Identity(a.d, a.d), epsilon, a.r};
  inst.validate();
  return inst;
}

struct ClassArgs {
  std::string data = "blobs";
  int n = 100;
  int d = 2;
  double margin = 2.0;
  double epsilon = 0.05;
  double eta = 1e-3;
  double sigma = 1e-2;
  int max_points = 200;
};

void add_class(CLI::App* app, ClassArgs& a, bool with_point) {
  app->add_option("--data", a.data, "'blobs' or a feature CSV path")->capture_default_str();
  app->add_option("--n", a.n, "Blob count")->capture_default_str();
  app->add_option("--d", a.d, "Projected dimension (bias excluded)")->capture_default_str();
  app->add_option("--margin", a.margin, "Blob separation")->capture_default_str();
  if (with_point) {
    app->add_option("--epsilon", a.epsilon, "Contamination rate")->capture_default_str();
    app->add_option("--eta", a.eta, "Learning rate")->capture_default_str();
    app->add_option("--sigma", a.sigma, "Regularization")->capture_default_str();
  }
  app->add_option("--max-points", a.max_points, "Relaxed indicator cap")->capture_default_str();
}

ClassCertifyOptions class_options(const ClassArgs& a) {
  require(a.max_points >= 1, "--max-points must be >= 1");
  ClassCertifyOptions opt;
  opt.max_points = a.max_points;
  return opt;
}

SimSettings checked(SimSettings sim, int threads) {
  require(sim.T >= 1 && sim.burn_in >= 0 && sim.burn_in < sim.T, "need T >= 1 and 0 <= burn-in < T");
  require(sim.seeds >= 2, "--seeds must be >= 2 for a standard error");
  sim.threads = threads;
  return sim;
}

// --------------------------------------------------------------- commands

RunReport cmd_certify_mean(const MeanArgs& m, const SimArgs& s, const Common& c) {
  MeanCell cell{mean_instance(m, m.epsilon, m.eta, c.seed), parse_attacks(s.attacks, s.sim),
                checked(s.sim, resolve_threads(c.threads)), c.seed, {}};
  RunReport rep;
  rep.records.push_back(run_mean_cell(cell));
  return rep;
}

RunReport cmd_certify_class(const ClassArgs& a, const SimArgs& s, const Common& c) {
  ClassCell cell;
  cell.inst.points = load_class_points(a.data, a.n, a.d, a.margin, a.d, c.seed);
  cell.inst.eta = a.eta;
  cell.inst.sigma = a.sigma;
  cell.inst.epsilon = a.epsilon;
  cell.attacks = parse_attacks(s.attacks, s.sim);
  cell.sim = checked(s.sim, resolve_threads(c.threads));
  cell.seed = c.seed;
  cell.certify = class_options(a);
  RunReport rep;
  rep.records.push_back(run_class_cell(cell));
  return rep;
}

struct GridArgs {
  std::string problem = "class";
  std::string epsilons = "0.01,0.02,0.03,0.04,0.05";
  std::string etas = "5e-5,1e-4,5e-4,1e-3,5e-3";
  std::string sigmas = "3e-3,6e-3,1e-2,3e-2,6e-2";
  double kappa = 1.0;
};

json summary_json(const GridSummary& g) {
  const double frac = g.monotone_pairs ? double(g.monotone_violations) / g.monotone_pairs : 0.0;
  return {{"monotone_pairs", g.monotone_pairs},
          {"monotone_violations", g.monotone_violations},
          {"monotone_violation_fraction", frac},
          {"monotone_ok", frac <= 0.05},
          {"selected", g.selected}};
}

RunReport cmd_grid(const GridArgs& g, const ClassArgs& ca, const MeanArgs& ma, const SimArgs& s, const Common& c) {
  RunReport rep;
  const int threads = resolve_threads(c.threads);
  const std::vector<double> eps = parse_list(g.epsilons), etas = parse_list(g.etas);
  require(!eps.empty() && !etas.empty(), "grid lists must be non-empty");
  if (g.problem == "class") {
    ClassGrid grid;
    grid.points = load_class_points(ca.data, ca.n, ca.d, ca.margin, ca.d, c.seed);
    grid.epsilons = eps;
    grid.etas = etas;
    grid.sigmas = parse_list(g.sigmas);
    require(!grid.sigmas.empty(), "grid lists must be non-empty");
    grid.attacks = parse_attacks(s.attacks, s.sim);
    grid.sim = checked(s.sim, 1);
    grid.certify = class_options(ca);
    grid.kappa = g.kappa;
    grid.base_seed = c.seed;
    grid.threads = threads;
    rep.records = run_class_grid(grid);
  } else if (g.problem == "mean") {
    const auto attacks = parse_attacks(s.attacks, s.sim);
    const SimSettings sim = checked(s.sim, 1);
    const int n = static_cast<int>(eps.size() * etas.size());
    rep.records.resize(n);
    parallel_for(n, threads, [&](int i) {
      const double e = eps[i / etas.size()], eta = etas[i % etas.size()];
      const std::uint64_t seed = c.seed ^ static_cast<std::uint64_t>(i);
      // One task for the whole grid so that cells differ only in (epsilon, eta).
      MeanCell cell{mean_instance(ma, e, eta, c.seed), attacks, sim, seed, {}};
      Record rec = run_mean_cell(cell);
      rec.cell = i;
      rec.objective = rec.benign_loss + g.kappa * *rec.certificate_verified;
      rep.records[i] = std::move(rec);
    });
  } else {
    throw ContractViolation("--problem must be 'class' or 'mean'");
  }
  rep.summary = summary_json(summarize_grid(rep.records, eps, g.kappa));
  return rep;
}

RunReport cmd_simulate(const std::string& problem, const ClassArgs& ca, const MeanArgs& ma, const SimArgs& s,
                       const Common& c, const std::string& dump, int stride) {
  const SimSettings sim = checked(s.sim, resolve_threads(c.threads));
  const auto attacks = parse_attacks(s.attacks, s.sim);
  require(stride >= 1, "--stride must be >= 1");
  LearningRule rule = MeanRule{};
  ContaminatedStream stream = ContaminatedStream::gaussian(0.0, Vec::Zero(1), Mat::Identity(1, 1));
  AdversarialObjective obj = SquaredDistance{Vec::Zero(1)};
  Region adv;
  Vec theta0;
  Record rec;
  rec.problem = problem;
  if (problem == "mean") {
    const MeanInstance inst = mean_instance(ma, ma.epsilon, ma.eta, c.seed);
    rule = inst.rule();
    stream = inst.stream();
    obj = inst.objective();
    adv = mean_adversary_set(inst);
    theta0 = inst.mu;
    rec.epsilon = inst.epsilon;
    rec.eta = inst.eta;
    rec.r = inst.r;
    rec.s_digest = matrix_digest(inst.S);
    rec.benign_loss = benign_loss(inst.eta, inst.S);
  } else if (problem == "class") {
    ClassInstance inst;
    inst.points = load_class_points(ca.data, ca.n, ca.d, ca.margin, ca.d, c.seed);
    inst.eta = ca.eta;
    inst.sigma = ca.sigma;
    inst.epsilon = ca.epsilon;
    inst.validate();
    rule = inst.rule();
    stream = inst.stream();
    obj = inst.objective();
    adv = inst.adversary_set();
    theta0 = hinge_warm_start(inst.points, inst.sigma);
    rec.epsilon = inst.epsilon;
    rec.eta = inst.eta;
    rec.sigma = inst.sigma;
    rec.benign_loss = hinge_mean(inst.points, theta0);
  } else {
    throw ContractViolation("--problem must be 'class' or 'mean'");
  }
  const auto start = std::chrono::steady_clock::now();
  rec.seed = c.seed;
  rec.solver_status = "skipped";
  rec.attack_results = simulate_attacks(rule, stream, obj, adv, attacks, sim, c.seed, theta0);
  rec.wall_time = seconds_since(start);
  if (!dump.empty()) {
    require(!attacks.empty(), "--dump-thetas needs an attack");
    const Trajectory tr = run_online(rule, stream, obj, attacks.front(), adv, sim.T, sim.burn_in, c.seed, theta0,
                                     RunOptions{true, stride});
    Mat m(static_cast<Eigen::Index>(tr.thetas.size()), theta0.size());
    for (std::size_t i = 0; i < tr.thetas.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = tr.thetas[i].transpose();
    const std::filesystem::path p(dump);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p);
    require(static_cast<bool>(f), "cannot write " + dump);
    write_matrix_csv(f, m, "theta");
  }
  RunReport rep;
  rep.records.push_back(std::move(rec));
  return rep;
}

struct MetaArgs {
  int d = 2;
  int tasks = 10;
  int test_tasks = 10;
  int iters = 10;
  double kappa = 1.0;
  double epsilon = 0.05;
  double eta = 0.1;
  double r = 1.0;
  double trace_cap = 1e3;
  std::string iso_scales = "0,0.01,0.1,1";
};

RunReport cmd_meta(const MetaArgs& m, const SimArgs& s, const Common& c, const std::string& out_dir) {
  require(m.tasks >= 1 && m.test_tasks >= 1, "task counts must be >= 1");
  const int threads = resolve_threads(c.threads);
  const SimSettings sim = checked(s.sim, threads);
  const auto attacks = parse_attacks(s.attacks, s.sim);
  require(attacks.size() == 1, "meta takes exactly one attack");
  const auto train = sample_tasks(m.d, m.tasks, {}, c.seed);
  const auto test = sample_tasks(m.d, m.test_tasks, {}, c.seed ^ fnv1a("held-out tasks"));

  MetaConfig cfg;
  cfg.kappa = m.kappa;
  cfg.T = m.iters;
  cfg.K = m.tasks;
  cfg.seed = c.seed;
  cfg.trace_cap = m.trace_cap;
  cfg.threads = threads;
  const auto start = std::chrono::steady_clock::now();
  const MetaTrace trace = meta_train(train, m.eta, m.epsilon, m.r, cfg);

  const EvalConfig ev{sim.T, sim.burn_in, sim.seeds, c.seed, threads};
  const double iso = best_isotropic_scale(parse_list(m.iso_scales), train, m.eta, m.epsilon, m.r, attacks[0], ev);
  const Mat eye = Mat::Identity(m.d, m.d);
  const std::vector<std::pair<std::string, Mat>> defenses{
      {"learned", trace.S}, {"zero", Mat::Zero(m.d, m.d)}, {"isotropic", iso * eye}};

  RunReport rep;
  for (std::size_t k = 0; k < defenses.size(); ++k) {
    const auto& [name, S] = defenses[k];
    const DefenseEvaluation e = eval_defense(S, test, m.eta, m.epsilon, m.r, attacks[0], ev);
    Record rec;
    rec.problem = "meta";
    rec.label = name;
    rec.cell = static_cast<int>(k);
    rec.seed = c.seed;
    rec.epsilon = m.epsilon;
    rec.eta = m.eta;
    rec.r = m.r;
    rec.s_digest = matrix_digest(S);
    rec.solver_status = "skipped";
    rec.benign_loss = benign_loss(m.eta, S);
    rec.attack_results.push_back(
        {attacks[0].name(), e.mean, e.stderr_, static_cast<int>(e.per_seed.size()), sim.T, sim.burn_in});
    rep.records.push_back(std::move(rec));
  }
  const double wall = seconds_since(start);
  for (Record& r : rep.records) r.wall_time = wall;

  json S = json::array();
  for (Eigen::Index i = 0; i < trace.S.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < trace.S.cols(); ++j) row.push_back(trace.S(i, j));
    S.push_back(row);
  }
  rep.summary = {{"objective", trace.objective},
                 {"objective_after_a", trace.objective_after_a},
                 {"s_step_gap", trace.s_step_gap},
                 {"isotropic_scale", iso},
                 {"S", S},
                 {"improvement_over_zero",
                  rep.records[1].attack_results[0].mean - rep.records[0].attack_results[0].mean}};

  std::filesystem::create_directories(out_dir);
  std::ofstream f(std::filesystem::path(out_dir) / "S.csv");
  require(static_cast<bool>(f), "cannot write S.csv in " + out_dir);
  write_matrix_csv(f, trace.S, "s");
  return rep;
}

RunReport cmd_report(const std::vector<std::string>& inputs) {
  require(!inputs.empty(), "report needs at least one input directory");
  RunReport rep;
  std::string hashes;
  json sources = json::array();
  for (const std::string& dir : inputs) {
    std::ifstream f(std::filesystem::path(dir) / "report.json");
    require(static_cast<bool>(f), "no report.json in " + dir);
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ContractViolation("malformed report.json in " + dir + ": " + e.what());
    }
    for (const json& r : j.at("records")) rep.records.push_back(record_from_json(r));
    hashes += j.at("config_hash").get<std::string>() + "\n";
    sources.push_back({{"dir", dir},
                       {"command", j.value("command", "")},
                       {"config_hash", j.at("config_hash")},
                       {"records", j.at("records").size()}});
  }
  rep.summary = {{"sources", sources}};
  rep.config = {{"inputs_hashes", hashes}};
  return rep;
}

}  // namespace

// ------------------------------------------------------------ public API

int RunReport::violations() const {
  return static_cast<int>(std::count_if(records.begin(), records.end(), [](const Record& r) { return r.violation; }));
}

std::vector<AttackPolicy> parse_attacks(const std::string& list, const SimSettings& sim) {
  std::vector<AttackPolicy> out;
  for (const std::string& name : split_commas(list)) {
    switch (parse_attack_kind(name)) {
      case AttackPolicy::Kind::none: out.push_back(AttackPolicy::none()); break;
      case AttackPolicy::Kind::greedy: out.push_back(AttackPolicy::greedy()); break;
      case AttackPolicy::Kind::label_flip: out.push_back(AttackPolicy::label_flip()); break;
      case AttackPolicy::Kind::fgsm: out.push_back(AttackPolicy::fgsm(sim.step)); break;
      case AttackPolicy::Kind::pgd: out.push_back(AttackPolicy::pgd(sim.pgd_steps, sim.step)); break;
    }
    out.back().horizon = sim.horizon;
    out.back().validate();
  }
  return out;
}

std::vector<double> parse_list(const std::string& list) {
  std::vector<double> out;
  for (const std::string& item : split_commas(list)) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    require(end && *end == '\0' && std::isfinite(v), "not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

bool dominance_violated(double certificate, const AttackResult& a) {
  return a.mean > certificate + 2.0 * a.stderr_;
}

Record run_mean_cell(const MeanCell& cell) {
  const auto start = std::chrono::steady_clock::now();
  const MeanInstance& inst = cell.inst;
  inst.validate();
  Record rec;
  rec.problem = "mean";
  rec.seed = cell.seed;
  rec.epsilon = inst.epsilon;
  rec.eta = inst.eta;
  rec.r = inst.r;
  rec.s_digest = matrix_digest(inst.S);
  rec.benign_loss = benign_loss(inst.eta, inst.S);
  const CertificateResult cert = certify_mean(inst, 1e-6, cell.certify);
  rec.certificate_solver = cert.solver_value;
  rec.certificate_verified = cert.verified_value;
  rec.solver_status = cert.solver_status;
  rec.branch = cert.branch;
  rec.attack_results = simulate_attacks(inst.rule(), inst.stream(), inst.objective(), mean_adversary_set(inst),
                                        cell.attacks, cell.sim, cell.seed, inst.mu);
  mark_violation(rec);
  rec.wall_time = seconds_since(start);
  return rec;
}

Record run_class_cell(const ClassCell& cell) {
  const auto start = std::chrono::steady_clock::now();
  const ClassInstance& inst = cell.inst;
  inst.validate();
  Record rec;
  rec.problem = "class";
  rec.seed = cell.seed;
  rec.epsilon = inst.epsilon;
  rec.eta = inst.eta;
  rec.sigma = inst.sigma;
  const Vec theta0 = hinge_warm_start(inst.target_points(), inst.sigma);
  rec.benign_loss = hinge_mean(inst.target_points(), theta0);
  ClassCertifyOptions opt = cell.certify;
  opt.subsample_seed ^= cell.seed;
  const CertificateResult cert = certify_class(inst, 1e-6, opt);
  rec.certificate_solver = cert.solver_value;
  rec.certificate_verified = cert.verified_value;
  rec.solver_status = cert.solver_status;
  rec.branch = cert.branch;
  rec.attack_results = simulate_attacks(inst.rule(), inst.stream(), inst.objective(), inst.adversary_set(),
                                        cell.attacks, cell.sim, cell.seed, theta0);
  mark_violation(rec);
  rec.wall_time = seconds_since(start);
  return rec;
}

Mat load_class_points(const std::string& source, int n, int d, double margin, int proj_dim,
                      std::uint64_t seed) {
  FeatureTable table;
  if (source == "blobs") {
    require(n >= 2 && d >= 1, "blobs need n >= 2 and d >= 1");
    table = gen_blobs(d, n, margin, seed);
  } else {
    table = read_feature_csv(source);
    require(table.has_labels(), source + ": classification data needs a label column");
  }
  return preprocess(table, proj_dim).Z;
}

std::vector<Record> run_class_grid(const ClassGrid& grid) {
  const int ne = static_cast<int>(grid.epsilons.size()), nh = static_cast<int>(grid.etas.size()),
            ns = static_cast<int>(grid.sigmas.size());
  const int n = ne * nh * ns;
  std::vector<Record> out(n);
  parallel_for(n, grid.threads, [&](int i) {
    ClassCell cell;
    cell.inst.points = grid.points;
    cell.inst.epsilon = grid.epsilons[i / (nh * ns)];
    cell.inst.eta = grid.etas[(i / ns) % nh];
    cell.inst.sigma = grid.sigmas[i % ns];
    cell.attacks = grid.attacks;
    cell.sim = grid.sim;
    cell.sim.threads = 1;
    cell.seed = grid.base_seed ^ static_cast<std::uint64_t>(i);
    cell.certify = grid.certify;
    Record rec = run_class_cell(cell);
    rec.cell = i;
    rec.objective = rec.benign_loss + grid.kappa * *rec.certificate_verified;
    out[i] = std::move(rec);
  });
  return out;
}

GridSummary summarize_grid(const std::vector<Record>& records, const std::vector<double>& epsilons,
                           double kappa) {
  GridSummary s;
  s.selected = json::array();
  // Group cells by (eta, sigma); each group is one certificate curve in epsilon.
  std::map<std::pair<double, double>, std::map<double, double>> curves;
  for (const double e : epsilons) {
    const Record* best = nullptr;
    double best_obj = 0.0;
    for (const Record& r : records) {
      if (r.epsilon != e || !r.certificate_verified) continue;
      const double obj = r.benign_loss + kappa * *r.certificate_verified;
      if (!best || obj < best_obj) best = &r, best_obj = obj;
    }
    if (best)
      s.selected.push_back({{"epsilon", e},
                            {"eta", best->eta},
                            {"sigma", opt_json(best->sigma)},
                            {"objective", best_obj},
                            {"certificate", *best->certificate_verified},
                            {"cell", best->cell}});
  }
  for (const Record& r : records)
    if (r.certificate_verified) curves[{r.eta, r.sigma.value_or(0.0)}][r.epsilon] = *r.certificate_verified;
  for (const auto& [key, curve] : curves) {
    const double* prev = nullptr;
    for (const auto& [e, c] : curve) {
      if (prev) {
        ++s.monotone_pairs;
        if (c < *prev - 1e-6 * std::max(1.0, std::abs(*prev))) ++s.monotone_violations;
      }
      prev = &c;
    }
  }
  return s;
}

json to_json(const Record& rec) {
  json attacks = json::array();
  for (const AttackResult& a : rec.attack_results)
    attacks.push_back(
        {{"policy", a.policy}, {"mean", a.mean}, {"stderr", a.stderr_}, {"seeds", a.seeds}, {"T", a.T},
         {"burn_in", a.burn_in}});
  return {{"problem", rec.problem},
          {"cell", rec.cell},
          {"seed", rec.seed},
          {"epsilon", rec.epsilon},
          {"eta", rec.eta},
          {"sigma", opt_json(rec.sigma)},
          {"r", opt_json(rec.r)},
          {"s_digest", rec.s_digest},
          {"certificate_solver", opt_json(rec.certificate_solver)},
          {"certificate_verified", opt_json(rec.certificate_verified)},
          {"solver_status", rec.solver_status},
          {"branch", rec.branch},
          {"label", rec.label},
          {"benign_loss", rec.benign_loss},
          {"objective", opt_json(rec.objective)},
          {"attack_results", attacks},
          {"violation", rec.violation},
          {"wall_time", rec.wall_time}};
}

Record record_from_json(const json& j) {
  try {
    Record rec;
    rec.problem = j.at("problem").get<std::string>();
    rec.cell = j.at("cell").get<int>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.epsilon = j.at("epsilon").get<double>();
    rec.eta = j.at("eta").get<double>();
    rec.sigma = opt_from(j, "sigma");
    rec.r = opt_from(j, "r");
    rec.s_digest = j.value("s_digest", "");
    rec.certificate_solver = opt_from(j, "certificate_solver");
    rec.certificate_verified = opt_from(j, "certificate_verified");
    rec.solver_status = j.value("solver_status", "");
    rec.branch = j.value("branch", "");
    rec.label = j.value("label", "");
    rec.benign_loss = j.at("benign_loss").get<double>();
    rec.objective = opt_from(j, "objective");
    for (const json& a : j.at("attack_results"))
      rec.attack_results.push_back({a.at("policy").get<std::string>(), a.at("mean").get<double>(),
                                    a.at("stderr").get<double>(), a.at("seeds").get<int>(), a.at("T").get<long>(),
                                    a.at("burn_in").get<long>()});
    rec.violation = j.at("violation").get<bool>();
    rec.wall_time = j.at("wall_time").get<double>();
    return rec;
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("malformed record: ") + e.what());
  }
}

json to_json(const RunReport& report) {
  json config = json::object();
  for (const auto& [k, v] : report.config) config[k] = v;
  json records = json::array();
  for (const Record& r : report.records) records.push_back(to_json(r));
  return {{"command", report.command},
          {"subcommand", report.subcommand},
          {"config_hash", hex64(report.config_hash)},
          {"config", config},
          {"records", records},
          {"violations", report.violations()},
          {"summary", report.summary}};
}

void write_table(std::ostream& out, const std::vector<Record>& records) {
  out << "epsilon,eta,sigma,certificate,attack_mean,attack_stderr,policy\n";
  const auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
  for (const Record& r : records) {
    const std::string head =
        fmt_double(r.epsilon) + "," + fmt_double(r.eta) + "," + opt(r.sigma) + "," + opt(r.certificate_verified);
    if (r.attack_results.empty()) {
      out << head << ",,," << r.label << "\n";
      continue;
    }
    for (const AttackResult& a : r.attack_results) {
      std::string policy = a.policy;
      if (!r.label.empty()) policy = r.label + ":" + policy;
      out << head << "," << fmt_double(a.mean) << "," << fmt_double(a.stderr_) << "," << policy << "\n";
    }
  }
}

void write_run(const RunReport& report, const std::string& dir) {
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);
  {
    std::ofstream f(root / "report.json");
    require(static_cast<bool>(f), "cannot write " + (root / "report.json").string());
    f << to_json(report).dump(2) << "\n";
  }
  {
    std::ofstream f(root / "table.csv");
    write_table(f, report.records);
  }
  {
    std::ofstream f(root / "config.txt");
    f << "# " << report.subcommand << "\n";
    for (const auto& [k, v] : report.config) f << k << " = " << v << "\n";
    f << "config_hash = " << hex64(report.config_hash) << "\n";
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Certified bounds and attack simulations for poisoned online learners", "poisoncert"};
  app.require_subcommand(1);

  Common common;
  SimArgs sim_cm, sim_cc, sim_g, sim_s, sim_m;
  MeanArgs mean;
  ClassArgs cls;
  GridArgs grid;
  MetaArgs meta;
  std::string problem = "class", dump;
  int stride = 1;
  std::vector<std::string> inputs;

  CLI::App* certify = app.add_subcommand("certify", "Certify one instance and attack it");
  certify->require_subcommand(1);
  CLI::App* c_mean = certify->add_subcommand("mean", "Mean estimation on a sampled Gaussian task");
  CLI::App* c_class = certify->add_subcommand("class", "Linear hinge classification");
  add_mean(c_mean, mean, true);
  add_sim(c_mean, sim_cm, "greedy,fgsm");
  add_common(c_mean, common);
  add_class(c_class, cls, true);
  add_sim(c_class, sim_cc, "fgsm,pgd,label_flip");
  add_common(c_class, common);

  CLI::App* g = app.add_subcommand("grid", "Certificate grid over epsilon x eta (x sigma)");
  g->add_option("--problem", grid.problem, "class or mean")->capture_default_str();
  g->add_option("--epsilons", grid.epsilons, "Comma list")->capture_default_str();
  g->add_option("--etas", grid.etas, "Comma list")->capture_default_str();
  g->add_option("--sigmas", grid.sigmas, "Comma list (class only)")->capture_default_str();
  g->add_option("--kappa", grid.kappa, "Weight of the certificate in the selection")->capture_default_str();
  // Shared flags for both problems; mean reads --d, --r and --s.
  add_class(g, cls, false);
  g->add_option("--r", mean.r, "Mean adversary budget")->capture_default_str();
  g->add_option("--s", mean.s, "Mean defense noise scale")->capture_default_str();
  add_sim(g, sim_g, "");
  add_common(g, common);

  CLI::App* simulate = app.add_subcommand("simulate", "Attack simulations without a certificate");
  simulate->add_option("--problem", problem, "class or mean")->capture_default_str();
  add_class(simulate, cls, true);
  simulate->add_option("--r", mean.r, "Mean adversary budget")->capture_default_str();
  simulate->add_option("--s", mean.s, "Mean defense noise scale")->capture_default_str();
  add_sim(simulate, sim_s, "fgsm");
  simulate->add_option("--dump-thetas", dump, "CSV path for the first trajectory");
  simulate->add_option("--stride", stride, "Record every k-th theta")->capture_default_str();
  add_common(simulate, common);

  CLI::App* m = app.add_subcommand("meta", "Learn a defense S over sampled tasks");
  m->add_option("--d", meta.d, "Dimension")->capture_default_str();
  m->add_option("--tasks", meta.tasks, "Training tasks K")->capture_default_str();
  m->add_option("--test-tasks", meta.test_tasks, "Held-out tasks")->capture_default_str();
  m->add_option("--iters", meta.iters, "Alternating iterations")->capture_default_str();
  m->add_option("--kappa", meta.kappa, "Certificate weight")->capture_default_str();
  m->add_option("--epsilon", meta.epsilon, "Contamination rate")->capture_default_str();
  m->add_option("--eta", meta.eta, "Learning rate")->capture_default_str();
  m->add_option("--r", meta.r, "Adversary budget")->capture_default_str();
  m->add_option("--trace-cap", meta.trace_cap, "Bound on Tr(S)")->capture_default_str();
  m->add_option("--iso-scales", meta.iso_scales, "Isotropic candidates")->capture_default_str();
  add_sim(m, sim_m, "greedy");
  add_common(m, common);

  CLI::App* report = app.add_subcommand("report", "Merge run directories");
  report->add_option("inputs", inputs, "Run directories")->required();
  report->add_option("--out", common.out, "Output directory")->capture_default_str();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    CLI::App* leaf = nullptr;
    std::string name;
    RunReport rep;
    if (c_mean->parsed()) {
      leaf = c_mean, name = "certify mean";
      rep = cmd_certify_mean(mean, sim_cm, common);
    } else if (c_class->parsed()) {
      leaf = c_class, name = "certify class";
      rep = cmd_certify_class(cls, sim_cc, common);
    } else if (g->parsed()) {
      leaf = g, name = "grid";
      mean.d = cls.d;
      rep = cmd_grid(grid, cls, mean, sim_g, common);
    } else if (simulate->parsed()) {
      leaf = simulate, name = "simulate";
      mean.d = cls.d;
      mean.epsilon = cls.epsilon;
      mean.eta = cls.eta;
      rep = cmd_simulate(problem, cls, mean, sim_s, common, dump, stride);
    } else if (m->parsed()) {
      leaf = m, name = "meta";
      rep = cmd_meta(meta, sim_m, common, common.out);
    } else {
      leaf = report, name = "report";
      rep = cmd_report(inputs);
    }
    rep.subcommand = name;
    std::string cmdline = "poisoncert";
    for (const std::string& a : args) cmdline += " " + a;
    rep.command = cmdline;
    if (name == "report") {
      rep.config_hash = fnv1a(rep.config.front().second);
      rep.config.clear();
      rep.config.emplace_back("inputs", std::to_string(inputs.size()));
    } else {
      rep.config = canonical_config(*leaf);
      rep.config_hash = config_hash(name, rep.config);
    }
    write_run(rep, common.out);

    out << name << ": " << rep.records.size() << " record(s), config " << hex64(rep.config_hash) << " -> "
        << common.out << "\n";
    for (const Record& r : rep.records) {
      if (!r.violation) continue;
      for (const AttackResult& a : r.attack_results)
        if (dominance_violated(*r.certificate_verified, a))
          err << "dominance violation: cell " << r.cell << " policy " << a.policy << " attack " << a.mean
              << " +- " << a.stderr_ << " > certificate " << *r.certificate_verified << "\n";
    }
    return rep.violations() > 0 ? kViolation : kOk;
  } catch (const ContractViolation& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "solver error: " << e.what() << "\n";
    return kSolver;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace poisoncert::cli
