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

#include "xpert/selector.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <set>

#include "xpert/hash.hpp"
#include "xpert/snapshot.hpp"

namespace xpert::selector {

using nlohmann::json;

Metric parse_metric(std::string_view name) {
  if (name == "l1" || name == "L1") return Metric::kL1;
  if (name == "l2" || name == "L2") return Metric::kL2;
  fail(ErrorCode::kInvalidArgument, "metric must be l1 or l2, got '" + std::string(name) + "'");
}

std::string_view metric_name(Metric m) { return m == Metric::kL1 ? "l1" : "l2"; }

double distance(const Coordinate& a, const Coordinate& b, Metric metric) {
  double sum = 0.0;
  auto add = [&](double d) { sum += metric == Metric::kL1 ? std::abs(d) : d * d; };
  auto ia = a.entries.begin();
  auto ib = b.entries.begin();
  while (ia != a.entries.end() || ib != b.entries.end()) {
    if (ib == b.entries.end() || (ia != a.entries.end() && ia->first < ib->first)) {
      add(ia->second);
      ++ia;
    } else if (ia == a.entries.end() || ib->first < ia->first) {
      add(-ib->second);
      ++ib;
    } else {
      add(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return metric == Metric::kL1 ? sum : std::sqrt(sum);
}

json profile_to_json(const LocalProfile& p) {
  json j = coordinate_to_json(p.coordinate);
  j["sample_count"] = p.sample_count;
  j["prompt_set_id"] = p.prompt_set_id;
  return j;
}

LocalProfile profile_from_json(const json& j) {
  LocalProfile p;
  p.coordinate = coordinate_from_json(j);
  try {
    p.sample_count = j.at("sample_count").get<std::size_t>();
    p.prompt_set_id = j.value("prompt_set_id", "");
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("bad profile: ") + e.what());
  }
  require(p.sample_count >= 1, ErrorCode::kFormat, "profile sample_count must be >= 1");
  return p;
}

LocalProfile compute_local_profile(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                                   std::span<const std::string> local_texts, const probe::PromptSet& prompts,
                                   const StyleBasis& basis) {
  require(!local_texts.empty(), ErrorCode::kInvalidArgument, "local data is empty");
  require(prompts.size() >= 1, ErrorCode::kInvalidArgument, "prompt set is empty");
  check_same_dim(summarizer.embedding_dim(), basis.dim(), "summarizer vs basis");
  const auto base = probe::base_responses(base_gen, prompts);
  std::vector<ResponsePair> pairs;
  pairs.reserve(local_texts.size());
  for (std::size_t i = 0; i < local_texts.size(); ++i) {
    require(!local_texts[i].empty(), ErrorCode::kInvalidArgument,
            "local sample " + std::to_string(i) + " is empty");
    const std::size_t p = i % prompts.size();
    pairs.push_back({prompts.prompts[p], base[p], local_texts[i]});
  }
  const auto v = probe::extract_shift_embedding(summarizer, pairs);
  return {decompose(v, basis).coordinate, local_texts.size(), prompts.id};
}

LocalProfile compute_local_profile(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                                   std::span<const std::string> local_texts, const probe::PromptSet& prompts,
                                   const RegistryManifest& manifest) {
  if (manifest.summarizer_fingerprint != summarizer.fingerprint()) {
    fail(ErrorCode::kMismatch, "manifest was built with summarizer '" + manifest.summarizer_fingerprint +
                                   "', not '" + summarizer.fingerprint() + "'");
  }
  if (manifest.instruction_template_hash != probe::instruction_template_hash()) {
    fail(ErrorCode::kMismatch, "manifest was built with another instruction template");
  }
  if (manifest.prompt_set_id != prompts.id) {
    fail(ErrorCode::kMismatch,
         "manifest was built with prompt set '" + manifest.prompt_set_id + "', not '" + prompts.id + "'");
  }
  return compute_local_profile(summarizer, base_gen, local_texts, prompts, manifest.to_basis());
}

SelectionResult rank_models(const Coordinate& local, std::span<const std::pair<std::string, Coordinate>> models,
                            Metric metric) {
  require(!models.empty(), ErrorCode::kInvalidArgument, "no models to select from");
  SelectionResult out;
  out.ranking.reserve(models.size());
  for (const auto& [id, z] : models) out.ranking.emplace_back(id, distance(local, z, metric));
  std::sort(out.ranking.begin(), out.ranking.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  out.model_id = out.ranking.front().first;
  out.distance = out.ranking.front().second;
  return out;
}

namespace {

std::vector<std::pair<std::string, Coordinate>> manifest_models(const LocalProfile& profile,
                                                                const RegistryManifest& manifest) {
  require(!manifest.models.empty(), ErrorCode::kInvalidArgument, "manifest lists no explained models");
  if (profile.coordinate.basis_fingerprint != manifest.basis_fingerprint) {
    fail(ErrorCode::kMismatch, "profile basis " + profile.coordinate.basis_fingerprint +
                                   " differs from manifest basis " + manifest.basis_fingerprint);
  }
  if (!profile.prompt_set_id.empty() && profile.prompt_set_id != manifest.prompt_set_id) {
    fail(ErrorCode::kMismatch, "profile was computed with another prompt set");
  }
  std::vector<std::pair<std::string, Coordinate>> models;
  for (const auto& m : manifest.models) {
    if (m.coordinate.basis_fingerprint != manifest.basis_fingerprint) {
      fail(ErrorCode::kMismatch, "coordinate of '" + m.model_id + "' uses a stale basis");
    }
    models.emplace_back(m.model_id, m.coordinate);
  }
  return models;
}

// Solves the k x k system in place with partial pivoting; false when singular.
bool solve_linear(std::vector<std::vector<double>> a, std::vector<double> b, std::vector<double>& x) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    }
    if (std::abs(a[pivot][col]) < 1e-12) return false;
    std::swap(a[pivot], a[col]);
    std::swap(b[pivot], b[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
    x[i] = s / a[i][i];
  }
  return true;
}

double objective(const std::vector<std::vector<double>>& rows, const std::vector<double>& target,
                 const std::vector<double>& alpha, Metric metric) {
  double sum = 0.0;
  for (std::size_t d = 0; d < rows.size(); ++d) {
    double r = -target[d];
    for (std::size_t i = 0; i < alpha.size(); ++i) r += rows[d][i] * alpha[i];
    sum += metric == Metric::kL1 ? std::abs(r) : r * r;
  }
  return metric == Metric::kL1 ? sum : std::sqrt(sum);
}

// Calls `visit` with every k-subset of [0, n) in lexicographic order.
template <typename F>
void for_each_subset(std::size_t n, std::size_t k, F&& visit) {
  if (k > n) return;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  while (true) {
    visit(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace

SelectionResult select_best(const LocalProfile& profile, const RegistryManifest& manifest, Metric metric) {
  const auto models = manifest_models(profile, manifest);
  return rank_models(profile.coordinate, models, metric);
}

json selection_to_json(const SelectionResult& s, Metric metric) {
  json ranking = json::array();
  for (const auto& [id, d] : s.ranking) ranking.push_back({{"model_id", id}, {"distance", d}});
  return {{"model_id", s.model_id}, {"distance", s.distance}, {"metric", metric_name(metric)}, {"ranking", ranking}};
}

json plan_to_json(const MergePlan& p) {
  json members = json::array();
  for (const auto& m : p.members) members.push_back({{"model_id", m.model_id}, {"alpha", m.alpha}});
  return {{"members", members},
          {"achieved_distance", p.achieved_distance},
          {"threshold_tau", p.threshold_tau},
          {"feasible", p.feasible}};
}

MergePlan plan_from_json(const json& j) {
  MergePlan p;
  try {
    for (const auto& m : j.at("members")) {
      p.members.push_back({m.at("model_id").get<std::string>(), m.at("alpha").get<double>()});
    }
    p.achieved_distance = j.value("achieved_distance", 0.0);
    p.threshold_tau = j.value("threshold_tau", 0.0);
    p.feasible = j.value("feasible", false);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("bad merge plan: ") + e.what());
  }
  require(!p.members.empty(), ErrorCode::kFormat, "merge plan has no members");
  for (const auto& m : p.members) {
    require(std::isfinite(m.alpha) && m.alpha >= 0.0, ErrorCode::kFormat, "merge weights must be finite and >= 0");
  }
  return p;
}

double default_tau(const Coordinate& local) { return 0.25 * std::max(local.l1_norm(), 1e-9); }

std::vector<double> solve_weights(std::span<const Coordinate> members, const Coordinate& target, Metric metric) {
  const std::size_t k = members.size();
  require(k >= 1, ErrorCode::kInvalidArgument, "solve_weights needs >= 1 member");
  std::set<std::size_t> support;
  for (const auto& [i, v] : target.entries) support.insert(i);
  for (const auto& m : members) {
    for (const auto& [i, v] : m.entries) support.insert(i);
  }
  std::vector<std::vector<double>> rows;
  std::vector<double> b;
  for (std::size_t d : support) {
    std::vector<double> row(k);
    for (std::size_t i = 0; i < k; ++i) row[i] = members[i].at(d);
    rows.push_back(std::move(row));
    b.push_back(target.at(d));
  }

  std::vector<double> best(k, 0.0);
  double best_value = objective(rows, b, best, metric);
  auto consider = [&](const std::vector<double>& alpha) {
    for (double a : alpha) {
      if (!(a >= -1e-12)) return;
    }
    std::vector<double> clamped = alpha;
    for (auto& a : clamped) a = std::max(a, 0.0);
    const double value = objective(rows, b, clamped, metric);
    if (value < best_value) {
      best_value = value;
      best = std::move(clamped);
    }
  };

  if (metric == Metric::kL2) {
    // Every nonnegative least-squares optimum is the unconstrained optimum on
    // its active set.
    for (std::size_t size = 1; size <= k; ++size) {
      for_each_subset(k, size, [&](const std::vector<std::size_t>& active) {
        std::vector<std::vector<double>> gram(size, std::vector<double>(size, 0.0));
        std::vector<double> rhs(size, 0.0);
        for (std::size_t d = 0; d < rows.size(); ++d) {
          for (std::size_t p = 0; p < size; ++p) {
            rhs[p] += rows[d][active[p]] * b[d];
            for (std::size_t q = 0; q < size; ++q) gram[p][q] += rows[d][active[p]] * rows[d][active[q]];
          }
        }
        std::vector<double> x;
        if (!solve_linear(gram, rhs, x)) return;
        std::vector<double> alpha(k, 0.0);
        for (std::size_t p = 0; p < size; ++p) alpha[active[p]] = x[p];
        consider(alpha);
      });
    }
  } else {
    // The L1 objective is piecewise linear over the orthant, so an optimum
    // sits where k independent hyperplanes meet: residual rows equal to zero
    // or weights equal to zero.
    const std::size_t n_planes = rows.size() + k;
    for_each_subset(n_planes, k, [&](const std::vector<std::size_t>& planes) {
      std::vector<std::vector<double>> a(k, std::vector<double>(k, 0.0));
      std::vector<double> rhs(k, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        if (planes[p] < rows.size()) {
          a[p] = rows[planes[p]];
          rhs[p] = b[planes[p]];
        } else {
          a[p][planes[p] - rows.size()] = 1.0;
        }
      }
      std::vector<double> x;
      if (solve_linear(a, rhs, x)) consider(x);
    });
  }
  return best;
}

MergePlan find_merge_set(const Coordinate& local, std::span<const std::pair<std::string, Coordinate>> models,
                         double tau, std::size_t k_max, Metric metric) {
  require(tau > 0.0 && std::isfinite(tau), ErrorCode::kInvalidArgument, "tau must be > 0");
  require(k_max >= 1, ErrorCode::kInvalidArgument, "k_max must be >= 1");
  const auto ranked = rank_models(local, models, metric);

  MergePlan best;
  best.threshold_tau = tau;
  best.members = {{ranked.model_id, 1.0}};
  best.achieved_distance = ranked.distance;
  best.feasible = ranked.distance < tau;
  if (best.feasible) return best;

  std::vector<std::pair<std::string, Coordinate>> sorted(models.begin(), models.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  for (std::size_t k = 2; k <= std::min(k_max, sorted.size()); ++k) {
    MergePlan level;
    level.threshold_tau = tau;
    level.achieved_distance = std::numeric_limits<double>::infinity();
    for_each_subset(sorted.size(), k, [&](const std::vector<std::size_t>& pick) {
      std::vector<Coordinate> members;
      for (auto i : pick) members.push_back(sorted[i].second);
      const auto alpha = solve_weights(members, local, metric);
      std::vector<MergeMember> plan;
      Coordinate combined;
      for (std::size_t p = 0; p < pick.size(); ++p) {
        if (alpha[p] <= 1e-12) continue;
        plan.push_back({sorted[pick[p]].first, alpha[p]});
        for (const auto& [i, v] : members[p].entries) combined.entries[i] += alpha[p] * v;
      }
      const double d = distance(combined, local, metric);
      if (plan.empty()) plan.push_back({sorted[pick.front()].first, 0.0});
      if (d < level.achieved_distance) {
        level.achieved_distance = d;
        level.members = std::move(plan);
      }
    });
    level.feasible = level.achieved_distance < tau;
    if (level.feasible) return level;
    if (level.achieved_distance < best.achieved_distance) best = std::move(level);
  }
  best.feasible = false;
  return best;
}

MergePlan find_merge_set(const LocalProfile& profile, const RegistryManifest& manifest, double tau,
                         std::size_t k_max, Metric metric) {
  const auto models = manifest_models(profile, manifest);
  return find_merge_set(profile.coordinate, models, tau, k_max, metric);
}

std::string_view action_name(ScheduleStep::Action a) {
  switch (a) {
    case ScheduleStep::Action::kLoad:
      return "load";
    case ScheduleStep::Action::kInfer:
      return "infer";
    case ScheduleStep::Action::kEvict:
      return "evict";
  }
  return "?";
}

std::uint64_t minimal_budget(std::span<const std::uint64_t> layer_bytes, std::uint64_t working_bytes) {
  std::uint64_t largest = 0;
  for (auto b : layer_bytes) largest = std::max(largest, b);
  return largest + working_bytes;
}

LayerSchedule plan_layer_schedule(std::span<const std::uint64_t> layer_bytes, std::uint64_t working_bytes,
                                  std::uint64_t budget_bytes) {
  const auto needed = minimal_budget(layer_bytes, working_bytes);
  if (needed > budget_bytes) {
    throw UnschedulableError(needed, "budget " + std::to_string(budget_bytes) +
                                         " bytes is below the minimal feasible budget of " +
                                         std::to_string(needed) + " bytes");
  }
  LayerSchedule s;
  s.budget_bytes = budget_bytes;
  s.peak_resident_bytes = working_bytes;
  std::deque<std::size_t> resident;
  std::uint64_t resident_bytes = working_bytes;
  for (std::size_t i = 0; i < layer_bytes.size(); ++i) {
    while (resident_bytes + layer_bytes[i] > budget_bytes) {
      const auto oldest = resident.front();
      resident.pop_front();
      resident_bytes -= layer_bytes[oldest];
      s.steps.push_back({oldest, ScheduleStep::Action::kEvict});
    }
    s.steps.push_back({i, ScheduleStep::Action::kLoad});
    resident.push_back(i);
    resident_bytes += layer_bytes[i];
    s.peak_resident_bytes = std::max(s.peak_resident_bytes, resident_bytes);
    s.steps.push_back({i, ScheduleStep::Action::kInfer});
  }
  return s;
}

json schedule_to_json(const LayerSchedule& s) {
  json steps = json::array();
  for (const auto& st : s.steps) steps.push_back({{"layer", st.layer}, {"action", action_name(st.action)}});
  return {{"steps", steps}, {"peak_resident_bytes", s.peak_resident_bytes}, {"budget_bytes", s.budget_bytes}};
}

RegistryManifest fetch_manifest(const std::string& base_url) {
  httplib::Client cli(base_url);
  cli.set_connection_timeout(5);
  auto res = cli.Get("/manifest");
  if (!res) fail(ErrorCode::kUnavailable, "registry " + base_url + " unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) fail(ErrorCode::kUnavailable, "GET /manifest returned " + std::to_string(res->status));
  return decode_manifest(res->body);
}

std::filesystem::path download_and_verify(const std::string& base_url, const ManifestModel& entry,
                                          const std::filesystem::path& destination,
                                          const DownloadOptions& options) {
  require(options.max_attempts >= 1, ErrorCode::kInvalidArgument, "max_attempts must be >= 1");
  if (destination.has_parent_path()) std::filesystem::create_directories(destination.parent_path());
  auto part = destination;
  part += ".part";
  const std::uint64_t expected = entry.artifact_bytes;
  const std::string path = "/models/" + entry.model_id + "/artifact";

  auto current_size = [&]() -> std::uint64_t {
    std::error_code ec;
    const auto n = std::filesystem::file_size(part, ec);
    return ec ? 0 : n;
  };
  if (current_size() > expected) std::filesystem::remove(part);

  httplib::Client cli(base_url);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(30);
  std::size_t failures = 0;
  std::string last_error;
  while (current_size() < expected) {
    if (failures >= options.max_attempts) {
      fail(ErrorCode::kUnavailable, "download of '" + entry.model_id + "' failed after " +
                                        std::to_string(failures) + " attempts: " + last_error);
    }
    const auto have = current_size();
    std::string range = "bytes=" + std::to_string(have) + "-";
    if (options.chunk_bytes > 0) range += std::to_string(std::min<std::uint64_t>(expected, have + options.chunk_bytes) - 1);
    auto res = cli.Get(path, httplib::Headers{{"Range", range}});
    if (!res) {
      ++failures;
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 206) {
      std::ofstream out(part, std::ios::binary | std::ios::app);
      out.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
      if (!out) fail(ErrorCode::kIo, "cannot write " + part.string());
    } else if (res->status == 200) {
      // Server ignored the range; start over from its full body.
      write_file_atomic(part, res->body);
    } else {
      ++failures;
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status == 404) fail(ErrorCode::kNotFound, "registry has no artifact for '" + entry.model_id + "'");
      continue;
    }
    if (current_size() > expected) {
      std::filesystem::remove(part);
      ++failures;
      last_error = "server sent more bytes than the manifest lists";
    }
  }

  const auto bytes = read_file_bytes(part);
  const auto digest = sha256_hex(bytes);
  if (bytes.size() != expected || digest != entry.artifact_sha256) {
    std::filesystem::remove(part);
    fail(ErrorCode::kChecksum, "artifact '" + entry.model_id + "' hash mismatch: got " + digest + ", manifest lists " +
                                   entry.artifact_sha256);
  }
  std::filesystem::rename(part, destination);
  return destination;
}

}  // namespace xpert::selector
