#pragma once

#include "poisoncert/common.hpp"
#include "poisoncert/meta.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace poisoncert {

/// Raw features, one row per example; y holds +-1 labels or is empty.
struct FeatureTable {
  Mat X;
  Vec y;
  std::vector<std::string> columns;  // feature column names

  int size() const { return static_cast<int>(X.rows()); }
  int width() const { return static_cast<int>(X.cols()); }
  bool has_labels() const { return y.size() > 0; }
  /// Throws ContractViolation on non-finite values, bad labels or shape mismatches.
  void validate() const;
};

/// CSV with a header row: feature columns first, optional final `label` column.
FeatureTable read_feature_csv(std::istream& in);
FeatureTable read_feature_csv(const std::string& path);
void write_feature_csv(std::ostream& out, const FeatureTable& table);
void write_feature_csv(const std::string& path, const FeatureTable& table);

/// Plain numeric matrix CSV with header prefix0, prefix1, ...
void write_matrix_csv(std::ostream& out, const Mat& m, const std::string& prefix = "z");
Mat read_matrix_csv(std::istream& in);

struct ProcessedDataset {
  Mat Z;             // N x (d + 1), label multiplied, rows in the unit ball
  double scale = 1;  // max row norm of the projected, bias-appended training rows
  Vec mean_shift;    // column means removed before projection
  Mat projection;    // m x d, orthonormal columns
  Vec labels;        // copy of the training labels (may be empty)

  int dim() const { return static_cast<int>(Z.cols()); }
};

/// center -> top-d right singular directions -> append 1 -> divide by the
/// max row norm -> multiply by the label.
ProcessedDataset preprocess(const FeatureTable& table, int d);

/// Applies a stored transform to new rows. Rows that land outside the unit
/// ball (possible on held-out data) are scaled back onto it when clip is set.
Mat replay(const ProcessedDataset& transform, const FeatureTable& table, bool clip = true);

std::string transform_to_json(const ProcessedDataset& data);
/// Restores the transform; Z and labels are left empty.
ProcessedDataset transform_from_json(const std::string& text);

/// Z as CSV plus the transform as a JSON sidecar.
void save_processed(const ProcessedDataset& data, const std::string& csv_path, const std::string& json_path);
ProcessedDataset load_processed(const std::string& csv_path, const std::string& json_path);

/// Two unit-variance Gaussian clusters centred at +-margin u for a random unit
/// vector u; the label is the cluster sign.
FeatureTable gen_blobs(int d, int n, double margin, std::uint64_t seed);

/// Seeded shuffle split; returns (train, test).
std::pair<FeatureTable, FeatureTable> split_table(const FeatureTable& table, double test_fraction,
                                                  std::uint64_t seed);

inline MeanTask gen_gaussian_task(int d, std::uint64_t seed) { return sample_task(d, {}, seed); }

}  // namespace poisoncert
