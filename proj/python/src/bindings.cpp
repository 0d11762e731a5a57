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

// Python extension: thin wrappers over the core library. Structured results
// cross the boundary as JSON text and are decoded on the Python side.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "xpert/error.hpp"
#include "xpert/manifest.hpp"
#include "xpert/merge.hpp"
#include "xpert/selector.hpp"
#include "xpert/simharness.hpp"
#include "xpert/snapshot.hpp"
#include "xpert/stub_backend.hpp"
#include "xpert/vectorspace.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using namespace xpert;

Coordinate to_coordinate(const std::vector<double>& dense) {
  Coordinate c;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    if (dense[i] != 0.0) c.entries[i] = dense[i];
  }
  return c;
}

std::vector<std::pair<std::string, Coordinate>> to_models(const std::map<std::string, std::vector<double>>& models) {
  std::vector<std::pair<std::string, Coordinate>> out;
  for (const auto& [id, z] : models) out.emplace_back(id, to_coordinate(z));
  return out;
}

std::string decompose_py(const std::vector<double>& vector,
                         const std::vector<std::pair<std::string, std::vector<double>>>& members,
                         double ortho_threshold, double epsilon_fraction) {
  std::vector<SubVector> subs;
  for (const auto& [word, raw] : members) subs.push_back(SubVector::from_raw(word, EmbeddingVector(raw)));
  const auto basis = StyleBasis::from_members(vector.size(), ortho_threshold, epsilon_fraction, subs);
  const auto r = decompose(EmbeddingVector(vector), basis);
  return json{{"coordinate", r.coordinate.dense(basis.size())},
              {"residual_norm", r.residual_norm},
              {"epsilon", r.epsilon_used},
              {"satisfied", r.satisfied}}
      .dump();
}

std::string rank_py(const std::vector<double>& local, const std::map<std::string, std::vector<double>>& models,
                    const std::string& metric) {
  const auto m = selector::parse_metric(metric);
  const auto pairs = to_models(models);
  return selector::selection_to_json(selector::rank_models(to_coordinate(local), pairs, m), m).dump();
}

std::string merge_set_py(const std::vector<double>& local, const std::map<std::string, std::vector<double>>& models,
                         std::optional<double> tau, std::size_t k_max, const std::string& metric) {
  const auto z = to_coordinate(local);
  const auto pairs = to_models(models);
  const auto plan =
      selector::find_merge_set(z, pairs, tau.value_or(selector::default_tau(z)), k_max, selector::parse_metric(metric));
  return selector::plan_to_json(plan).dump();
}

std::vector<double> solve_weights_py(const std::vector<std::vector<double>>& members, const std::vector<double>& target,
                                     const std::string& metric) {
  std::vector<Coordinate> zs;
  for (const auto& m : members) zs.push_back(to_coordinate(m));
  return selector::solve_weights(zs, to_coordinate(target), selector::parse_metric(metric));
}

std::string schedule_py(const std::vector<std::uint64_t>& layers, std::uint64_t working, std::uint64_t budget) {
  return selector::schedule_to_json(selector::plan_layer_schedule(layers, working, budget)).dump();
}

std::string merge_files_py(const std::filesystem::path& base_path,
                           const std::vector<std::pair<std::filesystem::path, double>>& members,
                           const std::filesystem::path& out) {
  const auto base = read_snapshot(base_path);
  std::vector<TaskVector> tasks;
  tasks.reserve(members.size());
  for (const auto& [path, alpha] : members) tasks.push_back(task_vector(base, read_snapshot(path)));
  std::vector<WeightedTaskVector> weighted;
  for (std::size_t i = 0; i < tasks.size(); ++i) weighted.push_back({&tasks[i], members[i].second});
  const auto merged = merge(base, weighted);
  write_snapshot(merged, out);
  return merged.fingerprint();
}

sim::SimConfig sim_config(std::size_t prompts, std::size_t local_samples, const std::string& metric) {
  sim::SimConfig c;
  c.prompts = prompts;
  c.local_samples = local_samples;
  c.metric = selector::parse_metric(metric);
  return c;
}

std::string accuracy_py(std::uint64_t seed, std::size_t styles, std::size_t dim, double noise,
                        const std::vector<double>& similarities, std::size_t models, std::size_t trials,
                        std::size_t prompts, std::size_t local_samples, const std::string& metric) {
  const auto world = sim::generate_world(seed, styles, dim, noise);
  std::vector<sim::TrialReport> reports;
  {
    py::gil_scoped_release release;
    reports = sim::run_accuracy_sweep(world, similarities, models, trials, sim_config(prompts, local_samples, metric));
  }
  json out = json::array();
  for (const auto& r : reports) out.push_back(r.to_json());
  return out.dump();
}

std::string multilevel_py(std::uint64_t seed, std::size_t styles, std::size_t dim, double noise, std::size_t levels,
                          std::size_t trials, std::size_t prompts, std::size_t local_samples) {
  const auto world = sim::generate_world(seed, styles, dim, noise);
  py::gil_scoped_release release;
  return sim::run_multilevel_check(world, levels, trials, sim_config(prompts, local_samples, "l1")).to_json().dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the xpert model selection toolkit.";

  // Released so no destructor runs after interpreter shutdown.
  static py::handle error_type = py::exception<Error>(m, "XpertError").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const selector::UnschedulableError& e) {
      py::object err = error_type(std::string(e.what()));
      err.attr("code") = std::string(error_code_name(e.code()));
      err.attr("minimal_budget") = e.minimal_budget();
      PyErr_SetObject(error_type.ptr(), err.ptr());
    } catch (const Error& e) {
      py::object err = error_type(std::string(e.what()));
      err.attr("code") = std::string(error_code_name(e.code()));
      PyErr_SetObject(error_type.ptr(), err.ptr());
    }
  });

  m.attr("CALIBRATED_NOISE") = sim::kCalibratedNoise;

  m.def("distance",
        [](const std::vector<double>& a, const std::vector<double>& b, const std::string& metric) {
          return selector::distance(to_coordinate(a), to_coordinate(b), selector::parse_metric(metric));
        },
        py::arg("a"), py::arg("b"), py::arg("metric") = "l1");
  m.def("decompose_json", &decompose_py, py::arg("vector"), py::arg("members"), py::arg("ortho_threshold") = 0.1,
        py::arg("epsilon_fraction") = 0.2);
  m.def("rank_json", &rank_py, py::arg("local"), py::arg("models"), py::arg("metric") = "l1");
  m.def("merge_set_json", &merge_set_py, py::arg("local"), py::arg("models"), py::arg("tau") = py::none(),
        py::arg("k_max") = 2, py::arg("metric") = "l1");
  m.def("solve_weights", &solve_weights_py, py::arg("members"), py::arg("target"), py::arg("metric") = "l1");
  m.def("schedule_json", &schedule_py, py::arg("layer_bytes"), py::arg("working_bytes"), py::arg("budget_bytes"));
  m.def("minimal_budget",
        [](const std::vector<std::uint64_t>& layers, std::uint64_t working) {
          return selector::minimal_budget(layers, working);
        },
        py::arg("layer_bytes"), py::arg("working_bytes"));

  m.def("read_manifest_json",
        [](const std::filesystem::path& p) { return manifest_to_json(decode_manifest(read_file_bytes(p))).dump(); },
        py::arg("path"));
  m.def("snapshot_fingerprint", [](const std::filesystem::path& p) { return read_snapshot(p).fingerprint(); },
        py::arg("path"));
  m.def("snapshot_parameter_count", [](const std::filesystem::path& p) { return read_snapshot(p).parameter_count(); },
        py::arg("path"));
  m.def("merge_snapshots", &merge_files_py, py::arg("base"), py::arg("members"), py::arg("out"));
  m.def("write_stub_snapshot",
        [](std::uint64_t seed, std::size_t styles, std::size_t dim, const std::filesystem::path& out,
           std::optional<std::vector<double>> weights, std::uint64_t variant) {
          const auto world = sim::generate_world(seed, styles, dim, 0.0);
          const auto base = sim::base_snapshot(world);
          const auto snap = weights ? sim::personalized_snapshot(world, base, *weights, variant) : base;
          write_snapshot(snap, out);
          return snap.fingerprint();
        },
        py::arg("seed"), py::arg("styles"), py::arg("dim"), py::arg("out"), py::arg("weights") = py::none(),
        py::arg("variant") = 0);

  m.def("accuracy_sweep_json", &accuracy_py, py::arg("seed"), py::arg("styles"), py::arg("dim"), py::arg("noise"),
        py::arg("similarities"), py::arg("models"), py::arg("trials"), py::arg("prompts") = 50,
        py::arg("local_samples") = 50, py::arg("metric") = "l1");
  m.def("multilevel_check_json", &multilevel_py, py::arg("seed"), py::arg("styles"), py::arg("dim"), py::arg("noise"),
        py::arg("levels"), py::arg("trials"), py::arg("prompts") = 50, py::arg("local_samples") = 50);
}
