#include "radvit/logistic.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <torch/torch.h>

#include "radvit/error.hpp"

namespace radvit {
namespace {

struct Problem {
  const Matrix& x;
  std::span<const int64_t> y;
  int64_t classes;
  double C;

  std::size_t size() const { return static_cast<std::size_t>(classes * (x.cols + 1)); }

  double eval(const std::vector<double>& theta, std::vector<double>& grad) const {
    const int64_t d = x.cols;
    const double* w = theta.data();
    const double* b = theta.data() + classes * d;
    std::fill(grad.begin(), grad.end(), 0.0);
    double* gw = grad.data();
    double* gb = grad.data() + classes * d;
    std::vector<double> z(static_cast<std::size_t>(classes));
    double f = 0.0;
    for (int64_t i = 0; i < x.rows; ++i) {
      const auto row = x.row(i);
      double zmax = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < classes; ++k) {
        double s = b[k];
        const double* wk = w + k * d;
        for (int64_t j = 0; j < d; ++j) s += wk[j] * row[static_cast<std::size_t>(j)];
        z[static_cast<std::size_t>(k)] = s;
        zmax = std::max(zmax, s);
      }
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - zmax);
      const double lse = zmax + std::log(sum);
      const auto label = y[static_cast<std::size_t>(i)];
      f += C * (lse - z[static_cast<std::size_t>(label)]);
      for (int64_t k = 0; k < classes; ++k) {
        double p = std::exp(z[static_cast<std::size_t>(k)] - lse);
        if (k == label) p -= 1.0;
        const double c = C * p;
        double* gk = gw + k * d;
        for (int64_t j = 0; j < d; ++j) gk[j] += c * row[static_cast<std::size_t>(j)];
        gb[k] += c;
      }
    }
    for (int64_t t = 0; t < classes * d; ++t) {
      f += 0.5 * w[t] * w[t];
      gw[t] += w[t];
    }
    return f;
  }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

Matrix Matrix::from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2) throw DataError("expected a 2D feature matrix");
  const auto c = t.detach().to(torch::kFloat64).contiguous();
  Matrix m;
  m.rows = c.size(0);
  m.cols = c.size(1);
  m.data.assign(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  return m;
}

Matrix Matrix::select(std::span<const int64_t> idx) const {
  Matrix m;
  m.rows = static_cast<int64_t>(idx.size());
  m.cols = cols;
  m.data.reserve(static_cast<std::size_t>(m.rows * cols));
  for (auto i : idx) {
    const auto r = row(i);
    m.data.insert(m.data.end(), r.begin(), r.end());
  }
  return m;
}

std::vector<double> LogisticModel::scores(std::span<const double> x) const {
  std::vector<double> out(bias);
  for (int64_t k = 0; k < classes; ++k) {
    for (int64_t j = 0; j < dim; ++j) {
      out[static_cast<std::size_t>(k)] += weights[static_cast<std::size_t>(k * dim + j)] * x[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

int64_t LogisticModel::predict(std::span<const double> x) const {
  const auto s = scores(x);
  return std::distance(s.begin(), std::max_element(s.begin(), s.end()));
}

std::vector<int64_t> LogisticModel::predict(const Matrix& x) const {
  std::vector<int64_t> out;
  out.reserve(static_cast<std::size_t>(x.rows));
  for (int64_t i = 0; i < x.rows; ++i) out.push_back(predict(x.row(i)));
  return out;
}

LogisticModel fit_logistic(const Matrix& x, std::span<const int64_t> y, int64_t classes, double C, int max_iter,
                           double tol) {
  if (x.rows == 0 || static_cast<std::size_t>(x.rows) != y.size()) throw DataError("logistic: sample count mismatch");
  if (classes < 2) throw DataError("logistic: need at least two classes");
  if (!(C > 0.0)) throw UsageError("logistic: C must be positive");
  for (auto label : y) {
    if (label < 0 || label >= classes) throw DataError("logistic: label out of range");
  }

  const Problem prob{x, y, classes, C};
  const std::size_t n = prob.size();
  std::vector<double> theta(n, 0.0), grad(n), next(n), next_grad(n), dir(n);
  double f = prob.eval(theta, grad);

  constexpr std::size_t kMemory = 10;
  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;
  const double ftol = 64.0 * std::numeric_limits<double>::epsilon();

  LogisticModel model;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    if (max_abs(grad) <= tol) {
      model.converged = true;
      break;
    }
    // Two-loop recursion for dir = -H grad.
    dir = grad;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      alpha[k] = rho_hist[k] * dot(s_hist[k], dir);
      for (std::size_t i = 0; i < n; ++i) dir[i] -= alpha[k] * y_hist[k][i];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
    for (auto& v : dir) v *= gamma;
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * dot(y_hist[k], dir);
      for (std::size_t i = 0; i < n; ++i) dir[i] += s_hist[k][i] * (alpha[k] - beta);
    }
    for (auto& v : dir) v = -v;
    double slope = dot(grad, dir);
    if (slope >= 0.0) {
      for (std::size_t i = 0; i < n; ++i) dir[i] = -grad[i];
      slope = dot(grad, dir);
      s_hist.clear(), y_hist.clear(), rho_hist.clear();
    }

    double step = s_hist.empty() ? std::min(1.0, 1.0 / std::max(1e-12, std::sqrt(dot(grad, grad)))) : 1.0;
    double f_next = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      for (std::size_t i = 0; i < n; ++i) next[i] = theta[i] + step * dir[i];
      f_next = prob.eval(next, next_grad);
      if (std::isfinite(f_next) && f_next <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      model.converged = true;  // no further decrease is representable
      break;
    }

    std::vector<double> s(n), yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = next[i] - theta[i];
      yv[i] = next_grad[i] - grad[i];
    }
    const double sy = dot(s, yv);
    if (sy > 1e-12 * dot(yv, yv)) {
      if (s_hist.size() == kMemory) s_hist.pop_front(), y_hist.pop_front(), rho_hist.pop_front();
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
    }
    const double decrease = (f - f_next) / std::max({std::abs(f), std::abs(f_next), 1.0});
    theta.swap(next);
    grad.swap(next_grad);
    f = f_next;
    if (decrease <= ftol) {
      model.converged = true;
      ++iter;
      break;
    }
  }

  model.classes = classes;
  model.dim = x.cols;
  model.C = C;
  model.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(classes * x.cols));
  model.bias.assign(theta.begin() + static_cast<std::ptrdiff_t>(classes * x.cols), theta.end());
  model.iterations = iter;
  model.objective = f;
  return model;
}

}  // namespace radvit
