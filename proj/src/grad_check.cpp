// Copyright 2026 The ctxasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ctxasr/grad_check.h"

#include <algorithm>
#include <cmath>

namespace ctxasr {

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedParam>& params, double eps, double tol,
                           double floor) {
  for (const auto& [name, p] : params) {
    auto param = p;
    param.zero_grad();
  }
  loss_fn().backward();

  GradCheckReport report;
  for (const auto& [name, p] : params) {
    auto param = p;
    const auto analytic = std::vector<double>(param.grad().begin(), param.grad().end());
    std::vector<double> numeric(static_cast<std::size_t>(param.numel()));
    auto values = param.mutable_data();
    {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + eps;
        const double up = loss_fn().item();
        values[i] = saved - eps;
        const double down = loss_fn().item();
        values[i] = saved;
        numeric[i] = (up - down) / (2.0 * eps);
      }
    }
    GradCheckEntry entry;
    entry.name = name;
    double scale = floor;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.empty() ? 0.0 : analytic[i];
      scale = std::max({scale, std::abs(a), std::abs(numeric[i])});
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric[i]));
    }
    entry.max_rel_error = entry.max_abs_error / scale;
    entry.passed = entry.max_rel_error <= tol;
    if (entry.max_rel_error > report.worst_rel_error || report.worst_name.empty()) {
      report.worst_rel_error = entry.max_rel_error;
      report.worst_name = name;
    }
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ctxasr
