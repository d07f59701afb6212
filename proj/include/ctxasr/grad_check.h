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

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ctxasr/tensor.h"

namespace ctxasr {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double worst_rel_error = 0.0;
  std::string worst_name;
};

using NamedParam = std::pair<std::string, Tensor<double>>;

// Compares backward() against central differences for every element of
// every parameter. The relative error of a parameter is
//   max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, floor)
// so elements whose gradient is tiny relative to the tensor's scale do not
// dominate through cancellation noise.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedParam>& params, double eps, double tol,
                           double floor = 1e-8);

}  // namespace ctxasr
