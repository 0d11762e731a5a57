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

// Acceptance run: one PASS/FAIL line per criterion. Tolerances are pinned here.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "support/random_snapshot.hpp"
#include "xpert/merge.hpp"
#include "xpert/probe.hpp"
#include "xpert/registry.hpp"
#include "xpert/selector.hpp"
#include "xpert/simharness.hpp"
#include "xpert/snapshot.hpp"
#include "xpert/stub_backend.hpp"
#include "xpert/vectorspace.hpp"

namespace {

using namespace xpert;
using Clock = std::chrono::steady_clock;

constexpr double kDecomposeTolerance = 1e-9;
constexpr double kDecomposeSeconds = 5.0;
constexpr double kOrthoBound = 0.1;
constexpr double kAccuracyAt09 = 0.90;
constexpr double kAccuracyAt07 = 0.75;
constexpr double kAccuracySeconds = 120.0;
constexpr double kScalabilityR2 = 0.99;
constexpr double kLinearityRelative = 1e-12;
constexpr double kAlphaGridSlack = 1e-3;
constexpr double kTuneDistance = 0.1;
constexpr std::size_t kTuneSteps = 500;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

// Planted coefficients over exactly orthonormal bases.
Verdict decomposition_exactness() {
  const auto start = Clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> dims(1, 64);
  double worst_coef = 0.0, worst_residual = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t dim = dims(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(16, dim))(rng);
    const auto q = oracle::orthonormal(rng, dim, k);
    std::vector<SubVector> members;
    for (std::size_t i = 0; i < k; ++i) {
      members.push_back(SubVector::from_raw("w" + std::to_string(i), EmbeddingVector(q[i])));
    }
    const auto basis = StyleBasis::from_members(dim, kOrthoBound, 0.2, members);
    const auto coef = oracle::gaussian(rng, k);
    oracle::Vec v(dim, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t d = 0; d < dim; ++d) v[d] += coef[i] * q[i][d];
    }
    if (oracle::norm(v) == 0.0) continue;
    const auto r = decompose(EmbeddingVector(v), basis);
    for (std::size_t i = 0; i < k; ++i) worst_coef = std::max(worst_coef, std::abs(r.coordinate.at(i) - coef[i]));
    worst_residual = std::max(worst_residual, r.residual_norm);
  }
  const double secs = seconds_since(start);
  return {worst_coef <= kDecomposeTolerance && worst_residual <= kDecomposeTolerance && secs < kDecomposeSeconds,
          "max_coef_err=" + fmt(worst_coef) + " max_residual=" + fmt(worst_residual) + " seconds=" + fmt(secs)};
}

// A seeded stub world probed into model shifts and ranked candidates.
struct ProbedWorld {
  std::vector<ModelShift> models;
  std::map<std::string, SubVector> words;
  std::optional<CommonBasisResult> result;
};

ProbedWorld probe_world(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t styles = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
  const auto world = std::make_shared<const sim::StyleWorld>(
      sim::generate_world(seed, styles, 32, sim::kCalibratedNoise));
  auto summarizer = sim::connect_stub(world);
  const auto prompts = sim::synthetic_prompts(20);
  const auto base = probe::base_responses(*summarizer, prompts);

  ProbedWorld out;
  std::uniform_real_distribution<double> magnitude(0.3, 1.5);
  for (int m = 0; m < 6; ++m) {
    std::vector<double> w(styles, 0.0);
    const int active = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int a = 0; a < active; ++a) w[std::uniform_int_distribution<std::size_t>(0, styles - 1)(rng)] = magnitude(rng);
    auto gen = sim::connect_stub(world, sim::Persona{"model-" + std::to_string(m), w});
    const auto pairs = probe::probe_model(base, *gen, prompts);
    const auto shift = probe::extract_shift_embedding(*summarizer, pairs);
    out.models.push_back({"m" + std::to_string(m), shift, probe::candidate_words(*summarizer, shift, 512)});
  }
  WordToVector word_to_vector = [&](const std::string& word) {
    auto it = out.words.find(word);
    if (it == out.words.end()) {
      it = out.words.emplace(word, probe::word_to_subvector(*summarizer, word, prompts.prompts, base)).first;
    }
    return it->second;
  };
  out.result = build_common_basis(out.models, BasisConfig{}, word_to_vector);
  return out;
}

Verdict orthogonality_and_reference(bool reference_check, std::vector<ProbedWorld>& worlds) {
  if (worlds.empty()) {
    for (std::uint64_t s = 0; s < 100; ++s) worlds.push_back(probe_world(5000 + s));
  }
  if (!reference_check) {
    double worst = 0.0;
    std::size_t pairs = 0;
    for (const auto& w : worlds) {
      const auto& b = w.result->basis;
      for (std::size_t i = 0; i < b.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
          const oracle::Vec a(b[i].direction.values().begin(), b[i].direction.values().end());
          const oracle::Vec c(b[j].direction.values().begin(), b[j].direction.values().end());
          worst = std::max(worst, std::abs(oracle::dot(a, c)));
          ++pairs;
        }
      }
    }
    return {worst <= kOrthoBound && pairs > 0,
            "worlds=100 pairs=" + std::to_string(pairs) + " max_abs_cos=" + fmt(worst)};
  }
  std::size_t mismatched = 0;
  for (const auto& w : worlds) {
    std::vector<oracle::ScriptModel> script;
    for (const auto& m : w.models) {
      oracle::ScriptModel s{oracle::Vec(m.shift.values().begin(), m.shift.values().end()), {}};
      for (const auto& c : m.candidates) s.candidates.push_back({c.word, c.probability});
      script.push_back(std::move(s));
    }
    const auto want = oracle::scripted_common_basis(
        script,
        [&](const std::string& word) {
          const auto& d = w.words.at(word).direction;
          return oracle::Vec(d.values().begin(), d.values().end());
        },
        kOrthoBound, 0.2, 512);
    bool same = want.words.size() == w.result->basis.size();
    for (std::size_t i = 0; same && i < want.words.size(); ++i) same = want.words[i] == w.result->basis[i].word;
    for (std::size_t m = 0; same && m < w.models.size(); ++m) {
      same = want.satisfied[m] == w.result->reports.at(w.models[m].model_id).satisfied;
    }
    if (!same) ++mismatched;
  }
  return {mismatched == 0, "worlds=100 mismatched=" + std::to_string(mismatched)};
}

std::vector<std::pair<std::string, Coordinate>> random_models(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> g;
  std::bernoulli_distribution present(0.7);
  std::vector<std::pair<std::string, Coordinate>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Coordinate c{"fp", {}};
    for (std::size_t d = 0; d < dim; ++d) {
      if (present(rng)) c.entries[d] = g(rng);
    }
    out.emplace_back("m" + std::to_string(i), c);
  }
  return out;
}

Verdict selection_oracle() {
  std::mt19937_64 rng(1004);
  std::size_t disagreements = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const auto models = random_models(rng, std::uniform_int_distribution<std::size_t>(1, 64)(rng), dim);
    const auto local = random_models(rng, 1, dim).front().second;
    RegistryManifest manifest;
    manifest.basis_fingerprint = "fp";
    std::vector<oracle::Vec> points;
    std::vector<std::string> labels;
    for (const auto& [id, z] : models) {
      ManifestModel mm;
      mm.model_id = id;
      mm.coordinate = z;
      manifest.models.push_back(mm);
      points.push_back(z.dense(dim));
      labels.push_back(id);
    }
    for (auto metric : {selector::Metric::kL1, selector::Metric::kL2}) {
      const auto got = selector::select_best({local, 1, {}}, manifest, metric);
      const auto want = oracle::brute_force_nearest(points, labels, local.dense(dim), metric == selector::Metric::kL1);
      if (got.model_id != labels[want]) ++disagreements;
    }
  }
  return {disagreements == 0, "instances=1000 metrics=l1,l2 disagreements=" + std::to_string(disagreements)};
}

Verdict accuracy_trend() {
  const auto start = Clock::now();
  const auto world = sim::generate_world(7, 16, 32, sim::kCalibratedNoise);
  const std::vector<double> levels{0.3, 0.5, 0.7, 0.8, 0.9};
  const auto reports = sim::run_accuracy_sweep(world, levels, 16, 200, sim::SimConfig{});
  const double secs = seconds_since(start);
  bool monotone = true;
  std::string detail;
  std::map<double, double> acc;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    acc[reports[i].similarity] = reports[i].selection_accuracy;
    if (i > 0 && reports[i].selection_accuracy < reports[i - 1].selection_accuracy) monotone = false;
    detail += "acc@" + fmt(reports[i].similarity) + "=" + fmt(reports[i].selection_accuracy) + " ";
  }
  const bool pass = acc[0.9] >= kAccuracyAt09 && acc[0.7] >= kAccuracyAt07 && monotone && secs < kAccuracySeconds;
  return {pass, detail + "monotone=" + (monotone ? "yes" : "no") + " seconds=" + fmt(secs)};
}

Verdict scalability() {
  const auto world = sim::generate_world(7, 16, 32, sim::kCalibratedNoise);
  const std::vector<std::size_t> counts{4, 16, 64, 256};
  const sim::SimConfig config;
  const auto reports = sim::run_scalability_sweep(world, counts, config);
  bool identical = true, baseline = true;
  std::vector<double> x, y;
  for (const auto& r : reports) {
    identical = identical && r.xpert_calls == reports.front().xpert_calls;
    baseline = baseline && r.exhaustive_calls == r.n_models * config.local_samples;
    x.push_back(static_cast<double>(r.n_models));
    y.push_back(static_cast<double>(r.exhaustive_calls));
  }
  // Least-squares line through the baseline counts.
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double icept = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ss_res += std::pow(y[i] - (icept + slope * x[i]), 2);
    ss_tot += std::pow(y[i] - sy / n, 2);
  }
  const double r2 = 1.0 - ss_res / ss_tot;
  return {identical && baseline && r2 >= kScalabilityR2,
          "xpert_calls=" + std::to_string(reports.front().xpert_calls) + " identical=" + (identical ? "yes" : "no") +
              " baseline_exact=" + (baseline ? "yes" : "no") + " r2=" + fmt(r2)};
}

Verdict merge_algebra() {
  std::mt19937_64 rng(1007);
  std::size_t not_exact = 0;
  for (int t = 0; t < 100; ++t) {
    const auto base = testutil::random_snapshot(rng, 1000000);
    const auto model = testutil::random_snapshot(rng, 0, &base);
    const auto tv = task_vector(base, model);
    const WeightedTaskVector w{&tv, 1.0};
    if (!(merge(base, std::span(&w, 1)) == model)) ++not_exact;
  }

  double worst_linear = 0.0;
  std::normal_distribution<double> g;
  for (int t = 0; t < 1000; ++t) {
    std::map<std::string, Coordinate> z;
    for (const char* id : {"a", "b"}) {
      Coordinate c{"fp", {}};
      for (std::size_t i = 0; i < 8; ++i) c.entries[i] = g(rng);
      z[id] = c;
    }
    const double a1 = std::abs(g(rng)), a2 = std::abs(g(rng)), s = std::abs(g(rng));
    const std::vector<MergeMember> both{{"a", a1}, {"b", a2}}, scaled{{"a", s * a1}, {"b", s * a2}};
    const std::vector<MergeMember> only_a{{"a", a1}}, only_b{{"b", a2}};
    const auto c = merged_explanation(both, z), cs = merged_explanation(scaled, z);
    const auto ca = merged_explanation(only_a, z), cb = merged_explanation(only_b, z);
    for (std::size_t i = 0; i < 8; ++i) {
      const double scale = 1.0 + std::abs(c.at(i)) * std::max(1.0, s);
      worst_linear = std::max(worst_linear, std::abs(cs.at(i) - s * c.at(i)) / scale);
      worst_linear = std::max(worst_linear, std::abs(c.at(i) - ca.at(i) - cb.at(i)) / scale);
    }
  }

  double worst_gap = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    const auto z1 = oracle::gaussian(rng, dim), z2 = oracle::gaussian(rng, dim);
    const double a1 = std::abs(g(rng)), a2 = std::abs(g(rng));
    oracle::Vec target(dim);
    for (std::size_t d = 0; d < dim; ++d) target[d] = a1 * z1[d] + a2 * z2[d] + 0.3 * g(rng);
    auto as_coord = [](const oracle::Vec& v) {
      Coordinate c{"fp", {}};
      for (std::size_t i = 0; i < v.size(); ++i) c.entries[i] = v[i];
      return c;
    };
    const std::vector<Coordinate> members{as_coord(z1), as_coord(z2)};
    for (auto metric : {selector::Metric::kL1, selector::Metric::kL2}) {
      const bool l1 = metric == selector::Metric::kL1;
      const auto alpha = selector::solve_weights(members, as_coord(target), metric);
      oracle::Vec mix(dim);
      for (std::size_t d = 0; d < dim; ++d) mix[d] = alpha[0] * z1[d] + alpha[1] * z2[d];
      const double grid = oracle::grid_pair_minimum(z1, z2, target, l1, 4.0 + 2.0 * std::max(a1, a2));
      worst_gap = std::max(worst_gap, oracle::dense_distance(mix, target, l1) - grid);
    }
  }
  return {not_exact == 0 && worst_linear <= kLinearityRelative && worst_gap <= kAlphaGridSlack,
          "addback_not_exact=" + std::to_string(not_exact) + "/100 linearity_err=" + fmt(worst_linear) +
              " solver_minus_grid=" + fmt(worst_gap)};
}

Verdict multilevel() {
  const sim::SimConfig config;
  const auto calm = sim::run_multilevel_check(sim::generate_world(7, 16, 32, 0.1), 4, 100, config);
  const auto loud = sim::run_multilevel_check(sim::generate_world(7, 16, 32, 5.0), 4, 100, config);
  return {calm.violations == 0 && loud.violations >= 1,
          "low_noise_violations=" + std::to_string(calm.violations) +
              " high_noise_violations=" + std::to_string(loud.violations)};
}

Verdict prompt_tuning() {
  const auto world = std::make_shared<const sim::StyleWorld>(sim::generate_world(7, 16, 32, 0.0));
  double worst_distance = 0.0;
  std::size_t worst_steps = 0, rises = 0;
  for (std::size_t tokens : {10, 25, 50}) {
    for (std::size_t s = 0; s < 4; ++s) {
      auto session = sim::connect_stub(world);
      const auto& style = world->styles[s];
      const auto truth = SubVector::from_raw(style.word, EmbeddingVector(style.direction));
      probe::TuneConfig cfg;
      cfg.token_count = tokens;
      cfg.max_steps = kTuneSteps;
      const auto r = probe::tune_prompt(*session, style.word, truth, cfg);
      for (std::size_t i = 11; i < r.loss_curve.size(); ++i) {
        if (r.loss_curve[i] > r.loss_curve[i - 1]) ++rises;
      }
      const auto fast = probe::fast_word_to_subvector(*session, style.word, r.prompt);
      worst_distance = std::max(worst_distance, probe::cosine_distance(fast.direction, truth.direction));
      worst_steps = std::max(worst_steps, r.steps);
    }
  }
  return {worst_distance <= kTuneDistance && worst_steps <= kTuneSteps && rises == 0,
          "tokens=10,25,50 max_cos_distance=" + fmt(worst_distance) + " max_steps=" + std::to_string(worst_steps) +
              " rises_after_step10=" + std::to_string(rises)};
}

Verdict layer_scheduler() {
  std::mt19937_64 rng(1010);
  std::uniform_int_distribution<std::uint64_t> layer(1, 1000), count(1, 48), work(0, 300), slack(0, 3000);
  std::size_t broken = 0, wrong_minimum = 0;
  for (int t = 0; t < 500; ++t) {
    std::vector<std::uint64_t> sizes(count(rng));
    for (auto& s : sizes) s = layer(rng);
    const auto w = work(rng);
    std::uint64_t largest = 0;
    for (auto s : sizes) largest = std::max(largest, s);
    const auto budget = largest + w + slack(rng);
    const auto sched = selector::plan_layer_schedule(sizes, w, budget);
    std::vector<int> loads(sizes.size(), 0);
    std::uint64_t bytes = w, peak = w;
    bool ok = true;
    for (const auto& st : sched.steps) {
      if (st.action == selector::ScheduleStep::Action::kLoad) {
        ++loads[st.layer];
        bytes += sizes[st.layer];
      } else if (st.action == selector::ScheduleStep::Action::kEvict) {
        bytes -= sizes[st.layer];
      }
      peak = std::max(peak, bytes);
      ok = ok && bytes <= budget;
    }
    for (int l : loads) ok = ok && l == 1;
    ok = ok && peak == sched.peak_resident_bytes && sched.peak_resident_bytes <= budget;
    if (!ok) ++broken;
    try {
      selector::plan_layer_schedule(sizes, w, largest + w - 1);
      ++wrong_minimum;
    } catch (const selector::UnschedulableError& e) {
      if (e.minimal_budget() != largest + w) ++wrong_minimum;
    }
  }
  return {broken == 0 && wrong_minimum == 0,
          "instances=500 invariant_failures=" + std::to_string(broken) +
              " wrong_minimal_budget=" + std::to_string(wrong_minimum)};
}

struct DurabilityWorld {
  std::shared_ptr<const sim::StyleWorld> world =
      std::make_shared<const sim::StyleWorld>(sim::generate_world(7, 8, 32, sim::kCalibratedNoise));
  TensorSnapshot base = sim::base_snapshot(*world);
  probe::PromptSet prompts = sim::synthetic_prompts(30);

  void register_all(registry::Registry& r, std::size_t n) const {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(8, 0.0);
      w[i % 8] = 1.0;
      w[(i + 3) % 8] = 0.4;
      r.register_model_bytes({"m" + std::to_string(i), "mem://" + std::to_string(i), base.fingerprint()},
                             encode_snapshot(sim::personalized_snapshot(*world, base, w, 50 + i)));
    }
  }
  void explain(registry::Registry& r, const registry::ExplainOptions& options = {}) const {
    auto s = sim::connect_stub(world);
    r.explain_all(*s, *s, sim::stub_generators(world), prompts, options);
  }
};

Verdict registry_durability() {
  constexpr std::size_t kModels = 6;
  const DurabilityWorld f;
  const auto root = std::filesystem::temp_directory_path() / ("xpert-acceptance-" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  {
    auto r = registry::Registry::open_directory(root / "reference");
    f.register_all(*r, kModels);
    f.explain(*r);
  }
  const auto expected = read_file_bytes(root / "reference" / "manifest.json");
  std::size_t differing = 0, bad_kills = 0;
  for (std::size_t k = 1; k <= kModels; ++k) {
    const auto dir = root / ("killed-" + std::to_string(k));
    {
      auto r = registry::Registry::open_directory(dir);
      f.register_all(*r, kModels);
    }
    const pid_t pid = ::fork();
    if (pid == 0) {
      auto r = registry::Registry::open_directory(dir);
      registry::ExplainOptions options;
      options.after_commit = [k](const std::string&, std::size_t committed) {
        if (committed == k) ::_exit(0);
      };
      try {
        f.explain(*r, options);
      } catch (...) {
        ::_exit(3);
      }
      ::_exit(4);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++bad_kills;
    auto r = registry::Registry::open_directory(dir);
    f.explain(*r);
    if (read_file_bytes(dir / "manifest.json") != expected) ++differing;
  }
  std::filesystem::remove_all(root);
  return {differing == 0 && bad_kills == 0,
          "kill_points=" + std::to_string(kModels) + " differing_manifests=" + std::to_string(differing) +
              " failed_kills=" + std::to_string(bad_kills)};
}

}  // namespace

int main() {
  std::vector<ProbedWorld> worlds;
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"decomposition-exactness", decomposition_exactness},
      {"orthogonality-gate", [&] { return orthogonality_and_reference(false, worlds); }},
      {"common-basis-reference", [&] { return orthogonality_and_reference(true, worlds); }},
      {"selection-oracle", selection_oracle},
      {"accuracy-trend", accuracy_trend},
      {"scalability", scalability},
      {"merge-algebra", merge_algebra},
      {"multilevel-consistency", multilevel},
      {"prompt-tuning", prompt_tuning},
      {"layer-scheduler", layer_scheduler},
      {"registry-durability", registry_durability},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::printf("%s %s %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
