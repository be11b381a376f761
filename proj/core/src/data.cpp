#include "poisoncert/data.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace poisoncert {

void FeatureTable::validate() const {
  require(X.rows() >= 1 && X.cols() >= 1, "FeatureTable: empty feature matrix");
  require(X.allFinite(), "FeatureTable: non-finite feature value");
  require(columns.empty() || static_cast<Eigen::Index>(columns.size()) == X.cols(),
          "FeatureTable: column names do not match the feature width");
  if (has_labels()) {
    require(y.size() == X.rows(), "FeatureTable: label count does not match the row count");
    for (Eigen::Index i = 0; i < y.size(); ++i)
      require(y(i) == 1.0 || y(i) == -1.0, "FeatureTable: labels must be -1 or +1 (row " + std::to_string(i) + ")");
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto first = cell.find_first_not_of(" \t\r");
    const auto last = cell.find_last_not_of(" \t\r");
    out.push_back(first == std::string::npos ? std::string() : cell.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& cell, std::size_t row, std::size_t col) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == cell.size() && !cell.empty(),
          "csv: row " + std::to_string(row) + ", column " + std::to_string(col) + ": not a number '" + cell + "'");
  return v;
}

std::vector<std::vector<double>> read_numeric_rows(std::istream& in, std::vector<std::string>& header) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "csv: missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  header = split_csv_line(line);
  require(!header.empty(), "csv: empty header");
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    require(cells.size() == header.size(), "csv: row " + std::to_string(lineno) + " has " +
                                               std::to_string(cells.size()) + " cells, expected " +
                                               std::to_string(header.size()));
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row[c] = parse_number(cells[c], lineno, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open '" + path + "' for reading");
  return f;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "cannot open '" + path + "' for writing");
  return f;
}

}  // namespace

FeatureTable read_feature_csv(std::istream& in) {
  std::vector<std::string> header;
  const auto rows = read_numeric_rows(in, header);
  const bool labelled = header.back() == "label";
  const std::size_t width = header.size() - (labelled ? 1 : 0);
  require(width >= 1, "csv: no feature columns");
  FeatureTable t;
  t.columns.assign(header.begin(), header.begin() + static_cast<std::ptrdiff_t>(width));
  t.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  if (labelled) t.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j) t.X(i, j) = rows[i][j];
    if (labelled) t.y(i) = rows[i][width];
  }
  t.validate();
  return t;
}

FeatureTable read_feature_csv(const std::string& path) {
  auto f = open_in(path);
  return read_feature_csv(f);
}

void write_feature_csv(std::ostream& out, const FeatureTable& table) {
  table.validate();
  out.precision(17);
  for (int j = 0; j < table.width(); ++j) {
    if (j) out << ',';
    out << (table.columns.empty() ? "f" + std::to_string(j) : table.columns[j]);
  }
  if (table.has_labels()) out << ",label";
  out << '\n';
  for (int i = 0; i < table.size(); ++i) {
    for (int j = 0; j < table.width(); ++j) out << (j ? "," : "") << table.X(i, j);
    if (table.has_labels()) out << ',' << table.y(i);
    out << '\n';
  }
}

void write_feature_csv(const std::string& path, const FeatureTable& table) {
  auto f = open_out(path);
  write_feature_csv(f, table);
}

void write_matrix_csv(std::ostream& out, const Mat& m, const std::string& prefix) {
  out.precision(17);
  for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << prefix << j;
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m(i, j);
    out << '\n';
  }
}

Mat read_matrix_csv(std::istream& in) {
  std::vector<std::string> header;
  const auto rows = read_numeric_rows(in, header);
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < header.size(); ++j) m(i, j) = rows[i][j];
  return m;
}

namespace {

Mat transform_rows(const ProcessedDataset& t, const FeatureTable& table) {
  require(table.width() == t.mean_shift.size(), "replay: feature width " + std::to_string(table.width()) +
                                                    " does not match the transform (" +
                                                    std::to_string(t.mean_shift.size()) + ")");
  const Eigen::Index d = t.projection.cols();
  Mat z(table.size(), d + 1);
  z.leftCols(d) = (table.X.rowwise() - t.mean_shift.transpose()) * t.projection;
  z.col(d).setOnes();
  z /= t.scale;
  if (table.has_labels()) z = table.y.asDiagonal() * z;
  return z;
}

}  // namespace

ProcessedDataset preprocess(const FeatureTable& table, int d) {
  table.validate();
  require(d >= 1 && d <= table.width(), "preprocess: need 1 <= d <= feature width");
  require(table.size() >= d, "preprocess: need at least d rows");
  ProcessedDataset out;
  out.mean_shift = table.X.colwise().mean().transpose();
  const Mat centered = table.X.rowwise() - out.mean_shift.transpose();
  Eigen::BDCSVD<Mat> svd(centered, Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  const double tol = std::max(centered.rows(), centered.cols()) * std::numeric_limits<double>::epsilon() *
                     (sv.size() ? sv(0) : 0.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > tol ? 1 : 0;
  if (rank < d)
    throw ContractViolation("preprocess: centered features have rank " + std::to_string(rank) + " < d = " +
                            std::to_string(d));
  out.projection = svd.matrixV().leftCols(d);
  // Fix each direction's sign so the largest entry is positive.
  for (int j = 0; j < d; ++j) {
    Eigen::Index k = 0;
    out.projection.col(j).cwiseAbs().maxCoeff(&k);
    if (out.projection(k, j) < 0.0) out.projection.col(j) *= -1.0;
  }
  out.scale = 1.0;
  FeatureTable unlabeled{table.X, Vec(), {}};
  const Mat raw = transform_rows(out, unlabeled);
  out.scale = raw.rowwise().norm().maxCoeff();
  require(out.scale > 0.0, "preprocess: all rows vanish after projection");
  out.labels = table.y;
  out.Z = transform_rows(out, table);
  return out;
}

Mat replay(const ProcessedDataset& transform, const FeatureTable& table, bool clip) {
  table.validate();
  require(transform.scale > 0.0 && transform.projection.rows() == transform.mean_shift.size(),
          "replay: malformed transform");
  Mat z = transform_rows(transform, table);
  if (clip) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double n = z.row(i).norm();
      if (n > 1.0) z.row(i) /= n;
    }
  }
  return z;
}

std::string transform_to_json(const ProcessedDataset& data) {
  nlohmann::json j;
  j["scale"] = data.scale;
  j["mean_shift"] = std::vector<double>(data.mean_shift.data(), data.mean_shift.data() + data.mean_shift.size());
  std::vector<std::vector<double>> proj(static_cast<std::size_t>(data.projection.rows()));
  for (Eigen::Index i = 0; i < data.projection.rows(); ++i)
    for (Eigen::Index k = 0; k < data.projection.cols(); ++k) proj[i].push_back(data.projection(i, k));
  j["projection"] = proj;
  j["input_width"] = data.projection.rows();
  j["output_width"] = data.projection.cols() + 1;
  j["pipeline"] = {"center", "project", "append_bias", "scale", "label_multiply"};
  return j.dump(2);
}

ProcessedDataset transform_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation(std::string("transform json: ") + e.what());
  }
  ProcessedDataset out;
  try {
    out.scale = j.at("scale").get<double>();
    const auto shift = j.at("mean_shift").get<std::vector<double>>();
    out.mean_shift = Eigen::Map<const Vec>(shift.data(), static_cast<Eigen::Index>(shift.size()));
    const auto proj = j.at("projection").get<std::vector<std::vector<double>>>();
    const Eigen::Index cols = proj.empty() ? 0 : static_cast<Eigen::Index>(proj.front().size());
    out.projection.resize(static_cast<Eigen::Index>(proj.size()), cols);
    for (std::size_t i = 0; i < proj.size(); ++i) {
      require(static_cast<Eigen::Index>(proj[i].size()) == cols, "transform json: ragged projection");
      for (Eigen::Index k = 0; k < cols; ++k) out.projection(i, k) = proj[i][k];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation(std::string("transform json: ") + e.what());
  }
  require(out.projection.rows() == out.mean_shift.size() && out.scale > 0.0, "transform json: inconsistent fields");
  return out;
}

void save_processed(const ProcessedDataset& data, const std::string& csv_path, const std::string& json_path) {
  auto csv = open_out(csv_path);
  write_matrix_csv(csv, data.Z);
  auto js = open_out(json_path);
  js << transform_to_json(data) << '\n';
}

ProcessedDataset load_processed(const std::string& csv_path, const std::string& json_path) {
  auto js = open_in(json_path);
  std::stringstream buf;
  buf << js.rdbuf();
  ProcessedDataset out = transform_from_json(buf.str());
  auto csv = open_in(csv_path);
  out.Z = read_matrix_csv(csv);
  require(out.Z.cols() == out.projection.cols() + 1, "load_processed: matrix width does not match the transform");
  return out;
}

FeatureTable gen_blobs(int d, int n, double margin, std::uint64_t seed) {
  require(d >= 1 && n >= 1, "gen_blobs: d and n must be positive");
  require(margin >= 0.0 && std::isfinite(margin), "gen_blobs: margin must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vec u(d);
  for (int j = 0; j < d; ++j) u(j) = normal(rng);
  u.normalize();
  std::bernoulli_distribution coin(0.5);
  FeatureTable t;
  t.X.resize(n, d);
  t.y.resize(n);
  for (int i = 0; i < n; ++i) {
    const double y = coin(rng) ? 1.0 : -1.0;
    t.y(i) = y;
    for (int j = 0; j < d; ++j) t.X(i, j) = y * margin * u(j) + normal(rng);
  }
  for (int j = 0; j < d; ++j) t.columns.push_back("f" + std::to_string(j));
  return t;
}

std::pair<FeatureTable, FeatureTable> split_table(const FeatureTable& table, double test_fraction,
                                                  std::uint64_t seed) {
  table.validate();
  require(test_fraction >= 0.0 && test_fraction < 1.0, "split_table: test_fraction must lie in [0, 1)");
  std::vector<int> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_test = static_cast<int>(std::floor(test_fraction * table.size()));
  auto take = [&](int first, int count) {
    FeatureTable out;
    out.columns = table.columns;
    out.X.resize(count, table.width());
    if (table.has_labels()) out.y.resize(count);
    for (int k = 0; k < count; ++k) {
      out.X.row(k) = table.X.row(order[first + k]);
      if (table.has_labels()) out.y(k) = table.y(order[first + k]);
    }
    return out;
  };
  return {take(n_test, table.size() - n_test), take(0, n_test)};
}

}  // namespace poisoncert
