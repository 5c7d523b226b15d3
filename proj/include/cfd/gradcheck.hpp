// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cfd/tensor.hpp"

namespace cfd {

struct GradCheckOptions {
  double step = 1e-6;
  /// Denominator floor for the relative error, so vanishing gradients are
  /// judged on absolute error instead.
  double floor = 1e-4;
  /// Cap on checked elements per parameter (evenly strided); 0 checks all.
  std::size_t max_elements = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::string scope;
  double tol = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor<double>>>;

/// Compares the analytic gradient of a scalar program against central
/// differences for every listed leaf. `f` must rebuild the graph on each call.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f, NamedTensors params, double tol,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tol = tol;
  for (auto& [name, p] : params) p.zero_grad();

  auto loss = f();
  if (loss.numel() != 1) throw ShapeError("grad_check program must return a scalar");
  {
    NoGradGuard ng;
    const double again = f().item();
    if (again != loss.item())
      throw Error(ErrorCode::kNondeterministic, "grad_check: two forward passes disagree");
  }
  backward(loss);

  for (auto& [name, p] : params) {
    GradCheckEntry e;
    e.name = name;
    const auto analytic = p.grad();
    auto values = p.data();
    const std::size_t n = values.size();
    const std::size_t stride = (opt.max_elements == 0 || n <= opt.max_elements) ? 1 : (n + opt.max_elements - 1) / opt.max_elements;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      double fp, fm;
      {
        NoGradGuard ng;
        values[i] = orig + opt.step;
        fp = f().item();
        values[i] = orig - opt.step;
        fm = f().item();
        values[i] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
      ++e.checked;
      e.max_abs_err = std::max(e.max_abs_err, abs_err);
      if (rel > e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_index = i;
      }
    }
    e.passed = e.max_rel_err < tol;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace cfd
