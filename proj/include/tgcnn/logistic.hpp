#pragma once

// Maximum-likelihood logistic regression by iteratively reweighted least squares.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tgcnn/error.hpp"
#include "tgcnn/log.hpp"

namespace tgcnn::baselines {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct LogitOptions {
  double ridge = 1e-6;  ///< L2 on slopes only; the intercept is unpenalised
  int max_iter = 100;
  double tol = 1e-8;
  bool fit_intercept = true;
};

/// Coefficients with the intercept first: beta[0] + beta[1..p] . x
struct LogitModel {
  std::vector<double> beta;
  std::vector<double> std_errors;  ///< from the inverse observed information at the solution
  int iterations = 0;
  bool converged = false;
  bool separation = false;

  std::vector<double> odds_ratios() const {
    std::vector<double> out;
    for (double b : beta) out.push_back(std::exp(b));
    return out;
  }
};

/// Rows of `x` are observations (n x p, row-major). `offset`, when given, is
/// added to every linear predictor with a fixed coefficient of one.
inline LogitModel logit_fit(std::span<const double> x, std::size_t n_features, std::span<const double> y,
                            const LogitOptions& opt = {}, std::span<const double> offset = {}) {
  const std::size_t n = y.size();
  if (n == 0) throw DataError("logit_fit: no observations");
  if (x.size() != n * n_features) throw DataError("logit_fit: design matrix size does not match n x p");
  if (!offset.empty() && offset.size() != n) throw DataError("logit_fit: offset length must equal n");
  const std::size_t icpt = opt.fit_intercept ? 1 : 0;
  const std::size_t p = n_features + icpt;
  if (p == 0) throw DataError("logit_fit: nothing to fit");

  Eigen::MatrixXd X(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    if (icpt) X(i, 0) = 1.0;
    for (std::size_t j = 0; j < n_features; ++j) X(i, j + icpt) = x[i * n_features + j];
  }
  Eigen::VectorXd Y(n), off = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw DataError("logit_fit: outcomes must be 0 or 1");
    Y(i) = y[i];
    if (!offset.empty()) off(i) = offset[i];
  }
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, opt.ridge);
  if (icpt) penalty(0) = 0.0;

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd info(p, p);
  LogitModel model;
  for (int it = 0; it < opt.max_iter; ++it) {
    const Eigen::VectorXd eta = X * beta + off;
    Eigen::VectorXd w(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double mu = sigmoid(eta(i));
      w(i) = std::max(mu * (1.0 - mu), 1e-12);
      z(i) = eta(i) - off(i) + (Y(i) - mu) / w(i);
    }
    info = X.transpose() * w.asDiagonal() * X;
    Eigen::MatrixXd lhs = info;
    lhs.diagonal() += penalty;
    const Eigen::VectorXd next = lhs.ldlt().solve(X.transpose() * (w.asDiagonal() * z));
    if (!next.allFinite()) break;
    const double change = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    model.iterations = it + 1;
    if (change < opt.tol) {
      model.converged = true;
      break;
    }
  }
  model.beta.assign(beta.data(), beta.data() + p);
  {
    const Eigen::VectorXd eta = X * beta + off;
    Eigen::VectorXd w(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double mu = sigmoid(eta(i));
      w(i) = mu * (1.0 - mu);
    }
    info = X.transpose() * w.asDiagonal() * X;
    info.diagonal() += penalty;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
    model.std_errors.assign(p, std::numeric_limits<double>::quiet_NaN());
    if (lu.isInvertible()) {
      const Eigen::MatrixXd cov = lu.inverse();
      for (std::size_t j = 0; j < p; ++j) model.std_errors[j] = std::sqrt(std::max(0.0, cov(j, j)));
    }
  }
  for (double b : model.beta)
    if (std::abs(b) > 30.0) model.separation = true;
  if (model.separation) log_warning("logit_fit: coefficient above 30 in magnitude; data look perfectly separated");
  if (!model.converged) log_warning("logit_fit: no convergence after " + std::to_string(opt.max_iter) + " iterations; returning last iterate");
  return model;
}

struct LogitOutput {
  std::vector<double> probabilities;
  std::vector<double> linear_predictors;
};

inline LogitOutput logit_predict(const LogitModel& model, std::span<const double> x, std::size_t n_features, bool fit_intercept = true) {
  const std::size_t icpt = fit_intercept ? 1 : 0;
  if (model.beta.size() != n_features + icpt) throw DataError("logit_predict: coefficient count does not match the feature layout");
  const std::size_t n = n_features == 0 ? 0 : x.size() / n_features;
  if (n_features != 0 && x.size() != n * n_features) throw DataError("logit_predict: design matrix size does not match n x p");
  LogitOutput out;
  for (std::size_t i = 0; i < n; ++i) {
    double eta = icpt ? model.beta[0] : 0.0;
    for (std::size_t j = 0; j < n_features; ++j) eta += model.beta[j + icpt] * x[i * n_features + j];
    out.linear_predictors.push_back(eta);
    out.probabilities.push_back(sigmoid(eta));
  }
  return out;
}

/// Intercept-only model has no feature columns; predicting it needs a row count.
inline LogitOutput logit_predict_intercept_only(const LogitModel& model, std::size_t n) {
  LogitOutput out;
  out.linear_predictors.assign(n, model.beta.at(0));
  out.probabilities.assign(n, sigmoid(model.beta.at(0)));
  return out;
}

}  // namespace tgcnn::baselines
