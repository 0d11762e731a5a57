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

// Device-side selection: place local data in the registry's latent space, pick
// the nearest cached model or a weighted pair of them, and fetch only that.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xpert/error.hpp"
#include "xpert/manifest.hpp"
#include "xpert/merge.hpp"
#include "xpert/probe.hpp"
#include "xpert/vectorspace.hpp"

namespace xpert::selector {

enum class Metric { kL1, kL2 };

Metric parse_metric(std::string_view name);
std::string_view metric_name(Metric m);

// Absent indices count as zero on either side.
double distance(const Coordinate& a, const Coordinate& b, Metric metric);

struct LocalProfile {
  Coordinate coordinate;
  std::size_t sample_count = 0;
  std::string prompt_set_id;
};

nlohmann::json profile_to_json(const LocalProfile& p);
LocalProfile profile_from_json(const nlohmann::json& j);

// Pairs local text i with the base response to prompt i mod |prompts|.
// Makes |prompts| base generate calls and one shift_embed call, however many
// models the registry holds.
LocalProfile compute_local_profile(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                                   std::span<const std::string> local_texts, const probe::PromptSet& prompts,
                                   const StyleBasis& basis);

// Same, after checking the manifest was built with this summarizer and prompt set.
LocalProfile compute_local_profile(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                                   std::span<const std::string> local_texts, const probe::PromptSet& prompts,
                                   const RegistryManifest& manifest);

struct SelectionResult {
  std::string model_id;
  double distance = 0.0;
  std::vector<std::pair<std::string, double>> ranking;
};

// Ascending distance, ties by model id.
SelectionResult rank_models(const Coordinate& local, std::span<const std::pair<std::string, Coordinate>> models,
                            Metric metric);

// Throws kInvalidArgument on an empty manifest and kMismatch when the profile
// was computed against another basis.
SelectionResult select_best(const LocalProfile& profile, const RegistryManifest& manifest, Metric metric);

nlohmann::json selection_to_json(const SelectionResult& s, Metric metric);

struct MergePlan {
  std::vector<MergeMember> members;
  double achieved_distance = 0.0;
  double threshold_tau = 0.0;
  bool feasible = false;
};

nlohmann::json plan_to_json(const MergePlan& p);
MergePlan plan_from_json(const nlohmann::json& j);

// 0.25 * max(|Z_local|_1, 1e-9).
double default_tau(const Coordinate& local);

// Nonnegative weights minimizing the metric distance of sum_i alpha_i Z_i to
// `target`. Exact for small member counts: L2 by active-set enumeration, L1
// by enumerating the vertices of the piecewise-linear objective.
std::vector<double> solve_weights(std::span<const Coordinate> members, const Coordinate& target, Metric metric);

MergePlan find_merge_set(const Coordinate& local, std::span<const std::pair<std::string, Coordinate>> models,
                         double tau, std::size_t k_max, Metric metric);
MergePlan find_merge_set(const LocalProfile& profile, const RegistryManifest& manifest, double tau,
                         std::size_t k_max, Metric metric);

struct ScheduleStep {
  enum class Action { kLoad, kInfer, kEvict };
  std::size_t layer = 0;
  Action action = Action::kLoad;
};

std::string_view action_name(ScheduleStep::Action a);

struct LayerSchedule {
  std::vector<ScheduleStep> steps;
  std::uint64_t peak_resident_bytes = 0;
  std::uint64_t budget_bytes = 0;
};

class UnschedulableError : public Error {
 public:
  UnschedulableError(std::uint64_t minimal_budget, const std::string& message)
      : Error(ErrorCode::kUnschedulable, message), minimal_budget_(minimal_budget) {}
  std::uint64_t minimal_budget() const { return minimal_budget_; }

 private:
  std::uint64_t minimal_budget_;
};

std::uint64_t minimal_budget(std::span<const std::uint64_t> layer_bytes, std::uint64_t working_bytes);

// Loads layers in order, evicting the oldest resident layer only when the
// next load would exceed the budget. Working bytes stay resident throughout.
LayerSchedule plan_layer_schedule(std::span<const std::uint64_t> layer_bytes, std::uint64_t working_bytes,
                                  std::uint64_t budget_bytes);

nlohmann::json schedule_to_json(const LayerSchedule& s);

// Registry HTTP client helpers. `base_url` looks like "http://host:port".
RegistryManifest fetch_manifest(const std::string& base_url);

struct DownloadOptions {
  std::size_t max_attempts = 5;
  // Bytes requested per range request; 0 asks for the whole remainder.
  std::size_t chunk_bytes = 0;
};

// Downloads one artifact into `destination`, resuming from a partial
// "<destination>.part" file left by an earlier attempt, and verifies its
// length and SHA-256. Throws kChecksum on a mismatch and kUnavailable when
// attempts run out.
std::filesystem::path download_and_verify(const std::string& base_url, const ManifestModel& entry,
                                          const std::filesystem::path& destination,
                                          const DownloadOptions& options = {});

}  // namespace xpert::selector
