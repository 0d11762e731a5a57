/* Copyright 2026 The Xpert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Task arithmetic over model weights.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "xpert/snapshot.hpp"
#include "xpert/vectorspace.hpp"

namespace xpert {

// theta_model - theta_base, tensor by tensor, as an unevaluated double pair
// delta + correction that equals the difference exactly. The correction is
// zero unless the two f32 values are more than 29 binades apart. Keeping it
// makes base + 1 * task_vector reproduce the model bit for bit.
struct TaskVector {
  std::string model_id;
  std::string base_fingerprint;
  std::map<std::string, std::vector<std::int64_t>> shapes;
  std::map<std::string, std::vector<double>> deltas;
  std::map<std::string, std::vector<double>> corrections;
};

TaskVector task_vector(const TensorSnapshot& base, const TensorSnapshot& model,
                       std::string model_id = {});

struct WeightedTaskVector {
  const TaskVector* task = nullptr;
  double alpha = 1.0;
};

// theta_base + sum_k alpha_k * tau_k, accumulated in double with a running
// compensation term, in input order, and rounded once to f32.
TensorSnapshot merge(const TensorSnapshot& base, std::span<const WeightedTaskVector> weighted);

struct MergeMember {
  std::string model_id;
  double alpha = 0.0;
};

// Predicted coordinate of a merged model: sum_i alpha_i * Z_i.
Coordinate merged_explanation(std::span<const MergeMember> members,
                              const std::map<std::string, Coordinate>& coordinates);

}  // namespace xpert
