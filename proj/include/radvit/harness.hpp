#pragma once

/**
 * @file harness.hpp
 * @brief Evaluation protocol: train/test splits, few-shot subsets, metrics,
 * aggregation, Welch's t-test and the benchmark driver.
 */

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

namespace radvit {

struct SplitPlan {
  uint64_t seed = 0;
  double ratio = 0.7;
  std::vector<int64_t> train;  // ascending
  std::vector<int64_t> test;   // ascending
};

/// |train| = round(ratio * n) clamped to [1, n - 1].
SplitPlan make_split(int64_t n, uint64_t seed, double ratio = 0.7);
std::vector<SplitPlan> make_splits(int64_t n, std::span<const uint64_t> seeds, double ratio = 0.7);

/// round(k% * |train|) items drawn without replacement, in ascending order.
/// k = 100 returns `train` itself. k must be one of 25, 50, 75, 100.
std::vector<int64_t> sample_fewshot(std::span<const int64_t> train, int k_percent, uint64_t seed);

double accuracy(std::span<const int64_t> pred, std::span<const int64_t> labels);

struct SegMetrics {
  std::vector<double> dice;  // per foreground class 1..classes
  std::vector<double> iou;
  double mdice = 0.0;
  double miou = 0.0;
};

/// Label maps of equal shape; class 0 is background. An empty prediction
/// against an empty reference scores 1.
SegMetrics dice_iou(const torch::Tensor& pred, const torch::Tensor& truth, int64_t classes);

struct LandmarkMetrics {
  double mre = 0.0;
  std::vector<double> sdr;  // fraction within each radius (inclusive)
};

/// Points are (N, D) in the same physical unit as the radii.
LandmarkMetrics mre_sdr(const torch::Tensor& pred, const torch::Tensor& truth, std::span<const double> radii);
std::vector<double> default_sdr_radii();

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};
Aggregate aggregate(std::span<const double> values);

/// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
/// CDF of Student's t distribution with `df` degrees of freedom.
double student_t_cdf(double t, double df);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};
/// Unpaired two-sample Welch test, two-tailed.
TTest welch_t_test(std::span<const double> a, std::span<const double> b);

struct TaskSpec {
  std::string name;
  std::string type = "classification";  // classification | segmentation
  std::filesystem::path manifest;
  std::filesystem::path mask_dir;
  int64_t classes = 2;
  std::vector<std::string> metrics;
  nlohmann::json options = nlohmann::json::object();  // evaluator-specific settings

  static TaskSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

struct BenchmarkConfig {
  std::vector<TaskSpec> tasks;
  std::vector<uint64_t> split_seeds{0, 1, 2, 3, 4};
  double ratio = 0.7;
  std::vector<int> k_percents{100};
  int64_t resamples = 5;
  std::vector<double> sdr_radii = default_sdr_radii();
  nlohmann::json evaluator = nlohmann::json::object();  // settings for the task evaluator

  static BenchmarkConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
};

/// Supplies dataset sizes and per-cell metrics to the driver.
class TaskEvaluator {
 public:
  virtual ~TaskEvaluator() = default;
  virtual int64_t size(const TaskSpec& task) = 0;
  virtual std::map<std::string, double> evaluate(const TaskSpec& task, std::span<const int64_t> train,
                                                 std::span<const int64_t> test, uint64_t seed) = 0;
};

struct ReportRow {
  std::string task;
  int64_t split = 0;
  int k = 100;
  int64_t resample = 0;
  int64_t n_train = 0;
  int64_t n_test = 0;
  std::map<std::string, double> metrics;

  nlohmann::json to_json() const;
  static ReportRow from_json(const nlohmann::json& j);
};

/// Runs every (task, split, k, resample) cell missing from an existing
/// report.jsonl in `out_dir`, then rewrites report.jsonl (canonical order),
/// summary.csv, summary.txt, report_meta.json and SVG plots.
std::vector<ReportRow> run_benchmark(const BenchmarkConfig& cfg, TaskEvaluator& evaluator,
                                     const std::filesystem::path& out_dir);

}  // namespace radvit
