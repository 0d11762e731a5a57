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

// Seeded experiments over synthetic style worlds. Every driver runs the real
// registry, probe and selector code against the in-process stub backend.

#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "xpert/probe.hpp"
#include "xpert/registry.hpp"
#include "xpert/selector.hpp"
#include "xpert/stub_backend.hpp"

namespace xpert::sim {

// Stub noise scale picked by sweeping it on seed 7 (16 styles, 16 models,
// 32 dimensions, 50 prompts, 200 trials): 0.945 at similarity 0.9, 0.865 at 0.7.
inline constexpr double kCalibratedNoise = 0.75;

struct SimConfig {
  std::size_t prompts = 50;
  std::size_t local_samples = 50;
  BasisConfig basis;
  selector::Metric metric = selector::Metric::kL1;
};

probe::PromptSet synthetic_prompts(std::size_t n);

// Generator sessions for registered snapshots: each artifact is decoded and
// served by a stub speaking with the snapshot's persona.
registry::GeneratorFactory stub_generators(std::shared_ptr<const StyleWorld> world);

struct TrialReport {
  std::string experiment;
  nlohmann::json config;
  double similarity = 0.0;
  std::size_t n_models = 0;
  std::size_t trials = 0;
  double selection_accuracy = 0.0;
  double oracle_agreement = 0.0;
  std::size_t xpert_calls = 0;
  std::size_t exhaustive_calls = 0;
  double basis_size = 0.0;
  std::int64_t runtime_ms = 0;

  nlohmann::json to_json(bool with_timing = false) const;
};

// One report per similarity level. Model i's mixture puts `similarity` on its
// home style and the rest on a random other style; local data is a pure
// reference style, and a selection is correct when the chosen model's home is
// that style. Trial t uses the same draws at every level.
std::vector<TrialReport> run_accuracy_sweep(const StyleWorld& world, std::span<const double> similarities,
                                            std::size_t n_models, std::size_t trials, const SimConfig& config);

// Backend calls of the selector path versus an exhaustive baseline that runs
// every model on every local sample.
std::vector<TrialReport> run_scalability_sweep(const StyleWorld& world, std::span<const std::size_t> model_counts,
                                               const SimConfig& config);

struct MultilevelReport {
  double noise_sigma = 0.0;
  std::size_t levels = 0;
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::size_t trials_with_violations = 0;
  double mean_consecutive_distance = 0.0;
  double mean_nonconsecutive_distance = 0.0;

  nlohmann::json to_json() const;
};

// Models planted at weights 1..levels of one style. A violation is a level
// whose distance to a consecutive level is not below its distance to a
// non-consecutive one.
MultilevelReport run_multilevel_check(const StyleWorld& world, std::size_t levels, std::size_t trials,
                                      const SimConfig& config);

struct MergeCheckReport {
  std::size_t trials = 0;
  std::size_t styles_in_mixture = 0;
  std::size_t improved = 0;     // merge plan strictly closer than the best single model
  std::size_t feasible = 0;     // plan reached tau
  std::size_t singletons = 0;   // plan kept one member
  double mean_merge_distance = 0.0;
  double mean_single_distance = 0.0;
  double min_margin = 0.0;
  // Largest L1 gap between the predicted coordinate of a merged plan and the
  // coordinate of the physically merged snapshot, probed again.
  double max_prediction_error = 0.0;

  nlohmann::json to_json() const;
};

// One pure-style model per style; local data mixes `styles_in_mixture`
// random styles with equal weight. tau <= 0 uses the default relative tau.
MergeCheckReport run_merge_check(const StyleWorld& world, std::size_t trials, std::size_t styles_in_mixture,
                                 double tau, std::size_t k_max, const SimConfig& config);

// Columns: experiment,similarity,n_models,trials,selection_accuracy,
// oracle_agreement,xpert_calls,exhaustive_calls,basis_size
std::string plotdata_csv(std::span<const TrialReport> reports);

}  // namespace xpert::sim
