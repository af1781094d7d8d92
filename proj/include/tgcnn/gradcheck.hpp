#pragma once

// Central finite-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::ad {

/// Returns the loss at `params`; when `grads` is non-null, also fills the
/// analytic gradient of every parameter it differentiates.
using LossFn = std::function<double(const ParameterMap& params, ParameterMap* grads)>;

struct GradCheckOptions {
  double eps = 1e-4;
  /// Arrays larger than this are checked on a random sample of this many elements.
  std::size_t max_elements_per_array = 200;
  std::uint64_t seed = 1;
  /// Restrict the check to these names; empty = every array the loss returns a gradient for.
  std::set<std::string> only;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::map<std::string, double> per_parameter;
  std::size_t elements_checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

inline GradCheckReport finite_difference_check(const LossFn& loss_fn, ParameterMap params, const GradCheckOptions& opt = {}) {
  if (opt.max_elements_per_array < 100) throw ConfigError("gradient check needs at least 100 sampled elements per large array");
  ParameterMap analytic;
  loss_fn(params, &analytic);
  Rng rng(opt.seed);
  GradCheckReport report;
  for (const auto& [name, grad] : analytic) {
    if (!opt.only.empty() && !opt.only.count(name)) continue;
    Array& p = params.at(name);
    std::vector<std::size_t> elems(p.size());
    for (std::size_t i = 0; i < elems.size(); ++i) elems[i] = i;
    if (elems.size() > opt.max_elements_per_array) {
      rng.shuffle(elems);
      elems.resize(opt.max_elements_per_array);
      std::sort(elems.begin(), elems.end());
    }
    double worst = 0.0;
    for (const auto idx : elems) {
      const double saved = p[idx];
      p[idx] = saved + opt.eps;
      const double up = loss_fn(params, nullptr);
      p[idx] = saved - opt.eps;
      const double down = loss_fn(params, nullptr);
      p[idx] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      worst = std::max(worst, relative_error(grad[idx], numeric));
      ++report.elements_checked;
    }
    report.per_parameter[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace tgcnn::ad
