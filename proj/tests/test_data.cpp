#include "poisoncert/data.hpp"
#include "poisoncert/simulate.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

using namespace poisoncert;

namespace {

FeatureTable random_table(int n, int m, std::uint64_t seed, bool labels = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  FeatureTable t;
  t.X.resize(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) t.X(i, j) = g(rng) * (1.0 + j % 7) + 0.3 * j;
  if (labels) {
    t.y.resize(n);
    for (int i = 0; i < n; ++i) t.y(i) = g(rng) > 0 ? 1.0 : -1.0;
  }
  return t;
}

}  // namespace

TEST(Csv, RoundTripsFeatureTable) {
  const FeatureTable t = random_table(7, 3, 1);
  std::stringstream ss;
  write_feature_csv(ss, t);
  const FeatureTable back = read_feature_csv(ss);
  EXPECT_EQ(back.X, t.X);
  EXPECT_EQ(back.y, t.y);
  ASSERT_EQ(back.columns.size(), 3u);
  EXPECT_EQ(back.columns[2], "f2");
}

TEST(Csv, UnlabelledAndMalformed) {
  std::stringstream ok("f0,f1\n1,2\n3,4\n");
  const FeatureTable t = read_feature_csv(ok);
  EXPECT_FALSE(t.has_labels());
  EXPECT_EQ(t.X(1, 0), 3.0);
  std::stringstream bad_label("f0,label\n1,0\n");
  EXPECT_THROW(read_feature_csv(bad_label), ContractViolation);
  std::stringstream ragged("f0,f1\n1\n");
  EXPECT_THROW(read_feature_csv(ragged), ContractViolation);
  std::stringstream text("f0\nabc\n");
  EXPECT_THROW(read_feature_csv(text), ContractViolation);
  std::stringstream nan("f0\nnan\n");
  EXPECT_THROW(read_feature_csv(nan), ContractViolation);
}

TEST(Preprocess, IdentityOnCenteredFullRankInput) {
  // Zero-mean, orthogonal columns, labels +1: the pipeline is [X | 1] up to
  // rotation within the kept directions and one global scale.
  Mat x(4, 2);
  x << 1, 0, -1, 0, 0, 0.5, 0, -0.5;
  FeatureTable t{x, Vec::Ones(4), {}};
  const ProcessedDataset p = preprocess(t, 2);
  EXPECT_NEAR((p.projection.transpose() * p.projection - Mat::Identity(2, 2)).norm(), 0.0, 1e-12);
  Mat expect(4, 3);
  expect.leftCols(2) = x * p.projection;
  expect.col(2).setOnes();
  expect /= expect.rowwise().norm().maxCoeff();
  EXPECT_NEAR((p.Z - expect).norm(), 0.0, 1e-12);
  EXPECT_NEAR(p.Z.row(0).norm(), 1.0, 1e-12);
}

TEST(Preprocess, DuplicateRowsStayDuplicate) {
  FeatureTable t = random_table(20, 5, 2);
  t.X.row(7) = t.X.row(3);
  t.y(7) = t.y(3);
  const ProcessedDataset p = preprocess(t, 3);
  EXPECT_EQ(p.Z.row(7), p.Z.row(3));
}

TEST(Preprocess, LabelMultiplies) {
  FeatureTable t = random_table(10, 4, 3);
  FeatureTable flipped = t;
  flipped.y(0) = -t.y(0);
  const ProcessedDataset a = preprocess(t, 2), b = preprocess(flipped, 2);
  EXPECT_NEAR((a.Z.row(0) + b.Z.row(0)).norm(), 0.0, 1e-12);
}

TEST(Preprocess, RejectsRankDeficientInput) {
  FeatureTable t = random_table(10, 4, 4);
  t.X.col(3) = 2.0 * t.X.col(1) - t.X.col(0);
  t.X.col(2) = t.X.col(0);
  try {
    preprocess(t, 3);
    FAIL() << "expected a rank error";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("rank 2"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(preprocess(t, 2));
}

TEST(Preprocess, ThirtyDirectionsOnWideTable) {
  const FeatureTable t = random_table(500, 512, 5);
  const ProcessedDataset p = preprocess(t, 30);
  ASSERT_EQ(p.Z.cols(), 31);
  const Vec norms = p.Z.rowwise().norm();
  EXPECT_LE(norms.maxCoeff(), 1.0 + 1e-15);
  EXPECT_NEAR(norms.maxCoeff(), 1.0, 1e-15);
  EXPECT_LE((replay(p, t) - p.Z).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Replay, JsonSidecarRoundTrip) {
  const FeatureTable t = random_table(40, 6, 6);
  const ProcessedDataset p = preprocess(t, 4);
  const ProcessedDataset back = transform_from_json(transform_to_json(p));
  EXPECT_EQ(back.projection, p.projection);
  EXPECT_EQ(back.mean_shift, p.mean_shift);
  EXPECT_EQ(back.scale, p.scale);
  EXPECT_LE((replay(back, t) - p.Z).cwiseAbs().maxCoeff(), 1e-9);

  const auto dir = std::filesystem::temp_directory_path() / "poisoncert_data_test";
  std::filesystem::create_directories(dir);
  save_processed(p, (dir / "z.csv").string(), (dir / "z.json").string());
  const ProcessedDataset loaded = load_processed((dir / "z.csv").string(), (dir / "z.json").string());
  EXPECT_LE((loaded.Z - p.Z).cwiseAbs().maxCoeff(), 1e-15);
  std::filesystem::remove_all(dir);
}

TEST(Replay, HeldOutRowsAreClippedIntoTheBall) {
  const auto [train, test] = split_table(random_table(100, 5, 7), 0.3, 1);
  EXPECT_EQ(train.size(), 70);
  EXPECT_EQ(test.size(), 30);
  const ProcessedDataset p = preprocess(train, 3);
  EXPECT_LE(replay(p, test).rowwise().norm().maxCoeff(), 1.0 + 1e-15);
  EXPECT_THROW(transform_from_json("{}"), ContractViolation);
}

TEST(Split, PartitionsRows) {
  const FeatureTable t = random_table(11, 2, 8);
  const auto [a, b] = split_table(t, 0.5, 3);
  EXPECT_EQ(a.size() + b.size(), 11);
  double sum = a.X.sum() + b.X.sum();
  EXPECT_NEAR(sum, t.X.sum(), 1e-9);
  const auto [c, e] = split_table(t, 0.5, 3);
  EXPECT_EQ(a.X, c.X);
  (void)e;
}

TEST(Blobs, DeterministicAndShaped) {
  const FeatureTable a = gen_blobs(3, 50, 1.0, 9), b = gen_blobs(3, 50, 1.0, 9);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.width(), 3);
  EXPECT_NO_THROW(a.validate());
}

TEST(Blobs, ZeroMarginIsUninformative) {
  const ProcessedDataset p = preprocess(gen_blobs(2, 400, 0.0, 10), 2);
  // Benign fixed point of the hinge learner on uninformative labels stays near 0.
  const double sigma = 0.1;
  const Vec theta = hinge_warm_start(p.Z, sigma);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.Z.rows(); ++i) loss += std::max(0.0, 1.0 - p.Z.row(i).dot(theta));
  loss /= p.Z.rows();
  EXPECT_GT(loss, 0.8);
}

TEST(Blobs, WideMarginIsLearnable) {
  const ProcessedDataset p = preprocess(gen_blobs(2, 200, 3.0, 11), 2);
  const double eta = 0.05, sigma = 1e-3;
  const LearningRule rule = HingeRule{eta, sigma};
  const auto stream = ContaminatedStream::empirical(0.0, p.Z);
  const auto runs = run_seeds(rule, stream, HingeOnTarget{p.Z}, AttackPolicy::none(),
                              Region::ball(Vec::Zero(3), 1.0), 50000, 40000, 1, 2, Vec::Zero(3));
  EXPECT_LT(estimate_avg_reward(runs).mean, 0.1);
}
