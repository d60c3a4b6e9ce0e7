#pragma once

// Multinomial logistic regression fitted with L-BFGS in double precision.
//
// Objective: C * sum_i CE(softmax(W x_i + b), y_i) + 0.5 * ||W||^2, the bias
// is not penalised. Stops when max |grad| <= tol, when the relative decrease
// of the objective drops below 64 machine epsilons, or after max_iter steps.

#include <cstdint>
#include <span>
#include <vector>

#include <torch/types.h>

namespace radvit {

struct Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;  // row-major

  std::span<const double> row(int64_t i) const {
    return {data.data() + i * cols, static_cast<std::size_t>(cols)};
  }
  static Matrix from_tensor(const torch::Tensor& t);
  Matrix select(std::span<const int64_t> rows) const;
};

struct LogisticModel {
  int64_t classes = 0;
  int64_t dim = 0;
  double C = 1.0;
  std::vector<double> weights;  // classes x dim
  std::vector<double> bias;     // classes
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;

  std::vector<double> scores(std::span<const double> x) const;
  int64_t predict(std::span<const double> x) const;
  std::vector<int64_t> predict(const Matrix& x) const;
};

LogisticModel fit_logistic(const Matrix& x, std::span<const int64_t> y, int64_t classes, double C,
                           int max_iter = 1000, double tol = 1e-12);

}  // namespace radvit
