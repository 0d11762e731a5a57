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

#include "xpert/simharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "xpert/error.hpp"
#include "xpert/merge.hpp"
#include "xpert/random.hpp"
#include "xpert/snapshot.hpp"

namespace xpert::sim {

using nlohmann::json;

namespace {

constexpr const char* kTopics[] = {"travel", "cooking", "music", "sports", "science", "history",
                                   "movies", "gardening", "finance", "weather", "pets", "books"};

json config_echo(const StyleWorld& w, const SimConfig& c) {
  return {{"seed", w.seed},
          {"styles", w.styles.size()},
          {"dim", w.dim},
          {"noise_sigma", w.noise_sigma},
          {"prompts", c.prompts},
          {"local_samples", c.local_samples},
          {"ortho_threshold", c.basis.ortho_threshold},
          {"epsilon_fraction", c.basis.epsilon_fraction},
          {"metric", selector::metric_name(c.metric)}};
}

std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
}

struct BuiltRegistry {
  std::unique_ptr<registry::Registry> registry;
  std::vector<std::string> ids;
  std::vector<TensorSnapshot> snapshots;
  RegistryManifest manifest;
};

BuiltRegistry build_registry(const std::shared_ptr<const StyleWorld>& world, const TensorSnapshot& base,
                             const std::vector<std::vector<double>>& weights, std::uint64_t seed,
                             const probe::PromptSet& prompts, const SimConfig& config,
                             registry::WordVectorCache* cache) {
  BuiltRegistry out;
  out.registry = std::make_unique<registry::Registry>(std::make_unique<registry::MemoryStorage>(), base.fingerprint());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto snap = personalized_snapshot(*world, base, weights[i], mix_seed(seed, i + 1));
    const auto bytes = encode_snapshot(snap);
    out.ids.push_back(out.registry->register_model_bytes(
        {"sim-" + std::to_string(i), "memory://sim/" + std::to_string(i), base.fingerprint()}, bytes));
    out.snapshots.push_back(std::move(snap));
  }
  auto summarizer = connect_stub(world);
  registry::ExplainOptions options;
  options.basis = config.basis;
  options.cache = cache;
  out.manifest =
      out.registry->explain_all(*summarizer, *summarizer, stub_generators(world), prompts, options).manifest;
  return out;
}

std::vector<std::string> local_texts(const std::shared_ptr<const StyleWorld>& world, std::vector<double> weights,
                                     std::uint64_t seed, const probe::PromptSet& prompts, std::size_t samples) {
  StubBackend device(world, Persona{"local-" + std::to_string(seed), std::move(weights)});
  std::vector<std::string> out;
  out.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) out.push_back(device.generate_one(prompts.prompts[i % prompts.size()], {}));
  return out;
}

// Profile plus the number of backend calls it took.
std::pair<selector::LocalProfile, std::size_t> profile_for(const std::shared_ptr<const StyleWorld>& world,
                                                           const std::vector<std::string>& texts,
                                                           const probe::PromptSet& prompts,
                                                           const RegistryManifest& manifest) {
  auto session = connect_stub(world);
  auto profile = selector::compute_local_profile(*session, *session, texts, prompts, manifest);
  return {std::move(profile), session->calls().total()};
}

// Straight scan over dense coordinates, kept apart from the selector code.
std::string brute_force_nearest(const RegistryManifest& manifest, const Coordinate& local, selector::Metric metric) {
  const std::size_t n = manifest.basis.size();
  const auto l = local.dense(n);
  std::string best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& m : manifest.models) {
    const auto z = m.coordinate.dense(n);
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = z[i] - l[i];
      d += metric == selector::Metric::kL1 ? std::abs(diff) : diff * diff;
    }
    if (d < best_d || (d == best_d && m.model_id < best)) {
      best_d = d;
      best = m.model_id;
    }
  }
  return best;
}

std::vector<double> one_hot(std::size_t n, std::size_t k, double value) {
  std::vector<double> w(n, 0.0);
  w[k] = value;
  return w;
}

}  // namespace

probe::PromptSet synthetic_prompts(std::size_t n) {
  require(n >= 1, ErrorCode::kInvalidArgument, "need at least one prompt");
  constexpr std::size_t topics = sizeof(kTopics) / sizeof(kTopics[0]);
  std::vector<std::string> prompts;
  prompts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    prompts.push_back("Write a short reply about " + std::string(kTopics[i % topics]) + " number " +
                      std::to_string(i) + ".");
  }
  return probe::PromptSet::make("synthetic-" + std::to_string(n), std::move(prompts), "synthetic");
}

registry::GeneratorFactory stub_generators(std::shared_ptr<const StyleWorld> world) {
  return [world](const registry::ModelRecord&, const registry::ArtifactRef& artifact) {
    const auto snapshot = decode_snapshot(artifact.bytes);
    return connect_stub(world, persona_from_snapshot(*world, snapshot));
  };
}

json TrialReport::to_json(bool with_timing) const {
  json j = {{"experiment", experiment},
            {"config", config},
            {"similarity", similarity},
            {"n_models", n_models},
            {"trials", trials},
            {"selection_accuracy", selection_accuracy},
            {"oracle_agreement", oracle_agreement},
            {"backend_call_counts", {{"xpert", xpert_calls}, {"exhaustive", exhaustive_calls}}},
            {"basis_size", basis_size}};
  if (with_timing) j["runtime_ms"] = runtime_ms;
  return j;
}

std::vector<TrialReport> run_accuracy_sweep(const StyleWorld& world_in, std::span<const double> similarities,
                                            std::size_t n_models, std::size_t trials, const SimConfig& config) {
  require(trials >= 1, ErrorCode::kInvalidArgument, "trials must be >= 1");
  require(n_models >= 1, ErrorCode::kInvalidArgument, "n_models must be >= 1");
  require(world_in.styles.size() >= 2, ErrorCode::kInvalidArgument, "accuracy sweep needs >= 2 styles");
  for (double s : similarities) {
    require(s >= 0.0 && s <= 1.0, ErrorCode::kInvalidArgument, "similarities must lie in [0,1]");
  }
  const auto world = std::make_shared<const StyleWorld>(world_in);
  const std::size_t n_styles = world->styles.size();
  const auto base = base_snapshot(*world);
  const auto prompts = synthetic_prompts(config.prompts);
  registry::WordVectorCache cache;

  std::vector<TrialReport> reports;
  for (double similarity : similarities) {
    const auto start = std::chrono::steady_clock::now();
    TrialReport rep;
    rep.experiment = "accuracy";
    rep.config = config_echo(*world, config);
    rep.similarity = similarity;
    rep.n_models = n_models;
    rep.trials = trials;
    std::size_t correct = 0;
    std::size_t agree = 0;
    double basis_total = 0.0;

    for (std::size_t t = 0; t < trials; ++t) {
      const std::uint64_t trial_seed = mix_seed(world->seed ^ 0xacc0ULL, t);
      SplitMix64 rng(trial_seed);
      const std::size_t reference = rng.below(n_styles);
      std::vector<std::size_t> home(n_models);
      std::vector<std::vector<double>> weights(n_models, std::vector<double>(n_styles, 0.0));
      for (std::size_t i = 0; i < n_models; ++i) {
        home[i] = i % n_styles;
        const std::size_t confounder = (home[i] + 1 + rng.below(n_styles - 1)) % n_styles;
        weights[i][home[i]] = similarity;
        weights[i][confounder] += 1.0 - similarity;
      }

      auto built = build_registry(world, base, weights, trial_seed, prompts, config, &cache);
      const auto texts =
          local_texts(world, one_hot(n_styles, reference, 1.0), trial_seed, prompts, config.local_samples);
      auto [profile, calls] = profile_for(world, texts, prompts, built.manifest);
      const auto selection = selector::select_best(profile, built.manifest, config.metric);

      const auto pos = std::find(built.ids.begin(), built.ids.end(), selection.model_id) - built.ids.begin();
      if (home[static_cast<std::size_t>(pos)] == reference) ++correct;
      if (brute_force_nearest(built.manifest, profile.coordinate, config.metric) == selection.model_id) ++agree;
      basis_total += static_cast<double>(built.manifest.basis.size());
      rep.xpert_calls = calls;
    }
    rep.exhaustive_calls = n_models * config.local_samples;
    rep.selection_accuracy = static_cast<double>(correct) / static_cast<double>(trials);
    rep.oracle_agreement = static_cast<double>(agree) / static_cast<double>(trials);
    rep.basis_size = basis_total / static_cast<double>(trials);
    rep.runtime_ms = elapsed_ms(start);
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::vector<TrialReport> run_scalability_sweep(const StyleWorld& world_in, std::span<const std::size_t> model_counts,
                                               const SimConfig& config) {
  require(world_in.styles.size() >= 2, ErrorCode::kInvalidArgument, "scalability sweep needs >= 2 styles");
  const auto world = std::make_shared<const StyleWorld>(world_in);
  const std::size_t n_styles = world->styles.size();
  const auto base = base_snapshot(*world);
  const auto prompts = synthetic_prompts(config.prompts);
  registry::WordVectorCache cache;
  constexpr double kHomeWeight = 0.9;

  std::vector<TrialReport> reports;
  for (std::size_t n_models : model_counts) {
    require(n_models >= 1, ErrorCode::kInvalidArgument, "model counts must be >= 1");
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t seed = mix_seed(world->seed ^ 0x5ca1eULL, n_models);
    SplitMix64 rng(seed);
    const std::size_t reference = rng.below(n_styles);
    std::vector<std::vector<double>> weights(n_models, std::vector<double>(n_styles, 0.0));
    for (std::size_t i = 0; i < n_models; ++i) {
      const std::size_t home = i % n_styles;
      weights[i][home] = kHomeWeight;
      weights[i][(home + 1 + rng.below(n_styles - 1)) % n_styles] += 1.0 - kHomeWeight;
    }
    auto built = build_registry(world, base, weights, seed, prompts, config, &cache);
    const auto texts = local_texts(world, one_hot(n_styles, reference, 1.0), seed, prompts, config.local_samples);
    auto [profile, calls] = profile_for(world, texts, prompts, built.manifest);
    const auto selection = selector::select_best(profile, built.manifest, config.metric);

    // Baseline: run every cached model on every local sample's prompt.
    std::size_t exhaustive = 0;
    const auto generators = stub_generators(world);
    for (const auto& id : built.ids) {
      auto gen = generators(*built.registry->record(id), built.registry->artifact(id));
      for (std::size_t s = 0; s < config.local_samples; ++s) gen->generate({prompts.prompts[s % prompts.size()]});
      exhaustive += gen->calls().total();
    }

    TrialReport rep;
    rep.experiment = "scalability";
    rep.config = config_echo(*world, config);
    rep.n_models = n_models;
    rep.similarity = kHomeWeight;
    rep.trials = 1;
    const auto pos = std::find(built.ids.begin(), built.ids.end(), selection.model_id) - built.ids.begin();
    rep.selection_accuracy = static_cast<std::size_t>(pos) % n_styles == reference ? 1.0 : 0.0;
    rep.oracle_agreement =
        brute_force_nearest(built.manifest, profile.coordinate, config.metric) == selection.model_id ? 1.0 : 0.0;
    rep.xpert_calls = calls;
    rep.exhaustive_calls = exhaustive;
    rep.basis_size = static_cast<double>(built.manifest.basis.size());
    rep.runtime_ms = elapsed_ms(start);
    reports.push_back(std::move(rep));
  }
  return reports;
}

json MultilevelReport::to_json() const {
  return {{"experiment", "multilevel"},
          {"noise_sigma", noise_sigma},
          {"levels", levels},
          {"trials", trials},
          {"violations", violations},
          {"trials_with_violations", trials_with_violations},
          {"mean_consecutive_distance", mean_consecutive_distance},
          {"mean_nonconsecutive_distance", mean_nonconsecutive_distance}};
}

MultilevelReport run_multilevel_check(const StyleWorld& world_in, std::size_t levels, std::size_t trials,
                                      const SimConfig& config) {
  require(levels >= 3, ErrorCode::kInvalidArgument, "multilevel check needs >= 3 levels");
  require(trials >= 1, ErrorCode::kInvalidArgument, "trials must be >= 1");
  const auto world = std::make_shared<const StyleWorld>(world_in);
  const std::size_t n_styles = world->styles.size();
  const auto base = base_snapshot(*world);
  const auto prompts = synthetic_prompts(config.prompts);
  registry::WordVectorCache cache;

  MultilevelReport rep;
  rep.noise_sigma = world->noise_sigma;
  rep.levels = levels;
  rep.trials = trials;
  double consecutive_sum = 0.0;
  double other_sum = 0.0;
  std::size_t consecutive_n = 0;
  std::size_t other_n = 0;

  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t seed = mix_seed(world->seed ^ 0x1e7e1ULL, t);
    const std::size_t style = SplitMix64(seed).below(n_styles);
    std::vector<std::vector<double>> weights;
    for (std::size_t level = 1; level <= levels; ++level) {
      weights.push_back(one_hot(n_styles, style, static_cast<double>(level)));
    }
    auto built = build_registry(world, base, weights, seed, prompts, config, &cache);
    std::vector<Coordinate> z;
    for (const auto& id : built.ids) z.push_back(built.manifest.find(id)->coordinate);

    std::size_t found = 0;
    for (std::size_t i = 0; i < levels; ++i) {
      double nearest_consecutive = std::numeric_limits<double>::infinity();
      double nearest_other = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < levels; ++j) {
        if (j == i) continue;
        const double d = selector::distance(z[i], z[j], config.metric);
        const std::size_t gap = i > j ? i - j : j - i;
        if (gap == 1) {
          consecutive_sum += d;
          ++consecutive_n;
          nearest_consecutive = std::min(nearest_consecutive, d);
        } else {
          other_sum += d;
          ++other_n;
          nearest_other = std::min(nearest_other, d);
        }
      }
      // Every consecutive neighbour must beat every non-consecutive level.
      for (std::size_t j = 0; j < levels; ++j) {
        const std::size_t gap = i > j ? i - j : j - i;
        if (gap != 1) continue;
        if (selector::distance(z[i], z[j], config.metric) >= nearest_other) ++found;
      }
    }
    rep.violations += found;
    if (found > 0) ++rep.trials_with_violations;
  }
  rep.mean_consecutive_distance = consecutive_n ? consecutive_sum / static_cast<double>(consecutive_n) : 0.0;
  rep.mean_nonconsecutive_distance = other_n ? other_sum / static_cast<double>(other_n) : 0.0;
  return rep;
}

json MergeCheckReport::to_json() const {
  return {{"experiment", "merge"},
          {"trials", trials},
          {"styles_in_mixture", styles_in_mixture},
          {"improved", improved},
          {"feasible", feasible},
          {"singletons", singletons},
          {"mean_merge_distance", mean_merge_distance},
          {"mean_single_distance", mean_single_distance},
          {"min_margin", min_margin},
          {"max_prediction_error", max_prediction_error}};
}

MergeCheckReport run_merge_check(const StyleWorld& world_in, std::size_t trials, std::size_t styles_in_mixture,
                                 double tau, std::size_t k_max, const SimConfig& config) {
  require(trials >= 1, ErrorCode::kInvalidArgument, "trials must be >= 1");
  require(styles_in_mixture >= 1 && styles_in_mixture <= world_in.styles.size(), ErrorCode::kInvalidArgument,
          "styles_in_mixture must be in [1, styles]");
  const auto world = std::make_shared<const StyleWorld>(world_in);
  const std::size_t n_styles = world->styles.size();
  const auto base = base_snapshot(*world);
  const auto prompts = synthetic_prompts(config.prompts);
  registry::WordVectorCache cache;

  std::vector<std::vector<double>> weights;
  for (std::size_t s = 0; s < n_styles; ++s) weights.push_back(one_hot(n_styles, s, 1.0));
  auto built = build_registry(world, base, weights, mix_seed(world->seed, 0x3e6eULL), prompts, config, &cache);
  const auto basis = built.manifest.to_basis();
  const auto coordinates = built.manifest.coordinates();
  const auto base_responses = [&] {
    auto session = connect_stub(world);
    return probe::base_responses(*session, prompts);
  }();

  std::map<std::string, TaskVector> task_vectors;
  for (std::size_t i = 0; i < built.ids.size(); ++i) {
    task_vectors.emplace(built.ids[i], task_vector(base, built.snapshots[i], built.ids[i]));
  }

  MergeCheckReport rep;
  rep.trials = trials;
  rep.styles_in_mixture = styles_in_mixture;
  rep.min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t seed = mix_seed(world->seed ^ 0x3e63eULL, t);
    SplitMix64 rng(seed);
    std::vector<std::size_t> order(n_styles);
    for (std::size_t i = 0; i < n_styles; ++i) order[i] = i;
    for (std::size_t i = n_styles; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<double> mixture(n_styles, 0.0);
    for (std::size_t i = 0; i < styles_in_mixture; ++i) mixture[order[i]] = 1.0 / static_cast<double>(styles_in_mixture);

    const auto texts = local_texts(world, mixture, seed, prompts, config.local_samples);
    auto [profile, calls] = profile_for(world, texts, prompts, built.manifest);
    const double trial_tau = tau > 0.0 ? tau : selector::default_tau(profile.coordinate);
    const auto single = selector::select_best(profile, built.manifest, config.metric);
    const auto plan = selector::find_merge_set(profile, built.manifest, trial_tau, k_max, config.metric);

    rep.mean_merge_distance += plan.achieved_distance;
    rep.mean_single_distance += single.distance;
    const double margin = single.distance - plan.achieved_distance;
    rep.min_margin = std::min(rep.min_margin, margin);
    if (plan.achieved_distance < single.distance) ++rep.improved;
    if (plan.feasible) ++rep.feasible;
    if (plan.members.size() == 1) ++rep.singletons;

    if (plan.members.size() >= 2) {
      std::vector<WeightedTaskVector> weighted;
      for (const auto& m : plan.members) weighted.push_back({&task_vectors.at(m.model_id), m.alpha});
      const auto merged = merge(base, weighted);
      auto gen = connect_stub(world, persona_from_snapshot(*world, merged));
      auto summarizer = connect_stub(world);
      const auto pairs = probe::probe_model(base_responses, *gen, prompts);
      const auto probed = decompose(probe::extract_shift_embedding(*summarizer, pairs), basis).coordinate;
      const auto predicted = merged_explanation(plan.members, coordinates);
      rep.max_prediction_error =
          std::max(rep.max_prediction_error, selector::distance(probed, predicted, selector::Metric::kL1));
    }
  }
  rep.mean_merge_distance /= static_cast<double>(trials);
  rep.mean_single_distance /= static_cast<double>(trials);
  return rep;
}

std::string plotdata_csv(std::span<const TrialReport> reports) {
  std::string out =
      "experiment,similarity,n_models,trials,selection_accuracy,oracle_agreement,xpert_calls,exhaustive_calls,"
      "basis_size\n";
  for (const auto& r : reports) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6g,%zu,%zu,%.6g,%.6g,%zu,%zu,%.6g\n", r.experiment.c_str(), r.similarity,
                  r.n_models, r.trials, r.selection_accuracy, r.oracle_agreement, r.xpert_calls, r.exhaustive_calls,
                  r.basis_size);
    out += buf;
  }
  return out;
}

}  // namespace xpert::sim
