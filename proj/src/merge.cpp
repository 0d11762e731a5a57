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

#include "xpert/merge.hpp"

#include <cmath>

#include "xpert/error.hpp"

namespace xpert {

namespace {

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

TaskVector task_vector(const TensorSnapshot& base, const TensorSnapshot& model,
                       std::string model_id) {
  TaskVector tv;
  tv.model_id = std::move(model_id);
  tv.base_fingerprint = base.fingerprint();

  for (const auto& [name, t] : base.tensors()) {
    if (!model.contains(name)) {
      fail(ErrorCode::kMismatch, "tensor '" + name + "' missing from model snapshot");
    }
  }
  for (const auto& [name, m] : model.tensors()) {
    if (!base.contains(name)) {
      fail(ErrorCode::kMismatch, "tensor '" + name + "' missing from base snapshot");
    }
    const auto& b = base.at(name);
    if (b.shape != m.shape) {
      fail(ErrorCode::kMismatch, "tensor '" + name + "' shape " + shape_string(m.shape) +
                                     " differs from base " + shape_string(b.shape));
    }
    std::vector<double> delta(m.data.size());
    std::vector<double> correction(m.data.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double x = m.data[i];
      const double y = -static_cast<double>(b.data[i]);
      const double s = x + y;
      // Knuth's two-sum: s + err == x + y exactly.
      const double yy = s - x;
      correction[i] = (x - (s - yy)) + (y - yy);
      delta[i] = s;
    }
    tv.shapes.emplace(name, m.shape);
    tv.deltas.emplace(name, std::move(delta));
    tv.corrections.emplace(name, std::move(correction));
  }
  return tv;
}

TensorSnapshot merge(const TensorSnapshot& base, std::span<const WeightedTaskVector> weighted) {
  require(!weighted.empty(), ErrorCode::kInvalidArgument, "merge needs at least one task vector");
  for (const auto& w : weighted) {
    require(w.task != nullptr, ErrorCode::kInvalidArgument, "null task vector");
    require(std::isfinite(w.alpha), ErrorCode::kNonFinite, "merge weight is not finite");
    if (w.task->base_fingerprint != base.fingerprint()) {
      fail(ErrorCode::kMismatch, "task vector for '" + w.task->model_id +
                                     "' was derived from base " + w.task->base_fingerprint +
                                     ", not " + base.fingerprint());
    }
    for (const auto& [name, t] : base.tensors()) {
      auto it = w.task->shapes.find(name);
      if (it == w.task->shapes.end() || it->second != t.shape) {
        fail(ErrorCode::kMismatch, "task vector for '" + w.task->model_id +
                                       "' does not match base tensor '" + name + "'");
      }
    }
  }

  std::map<std::string, Tensor> out;
  std::vector<double> acc;
  std::vector<double> comp;
  for (const auto& [name, b] : base.tensors()) {
    acc.assign(b.data.begin(), b.data.end());
    comp.assign(acc.size(), 0.0);
    auto add = [&](std::size_t i, double x) {
      const double t = acc[i] + x;
      comp[i] += std::abs(acc[i]) >= std::abs(x) ? (acc[i] - t) + x : (x - t) + acc[i];
      acc[i] = t;
    };
    for (const auto& w : weighted) {
      const auto& delta = w.task->deltas.at(name);
      const auto& correction = w.task->corrections.at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        add(i, w.alpha * delta[i]);
        if (correction[i] != 0.0) add(i, w.alpha * correction[i]);
      }
    }
    Tensor t{b.shape, std::vector<float>(acc.size())};
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const float x = static_cast<float>(acc[i] + comp[i]);
      require(std::isfinite(x), ErrorCode::kNonFinite,
              "merged tensor '" + name + "' overflows f32");
      t.data[i] = x;
    }
    out.emplace(name, std::move(t));
  }
  return TensorSnapshot(std::move(out));
}

Coordinate merged_explanation(std::span<const MergeMember> members,
                              const std::map<std::string, Coordinate>& coordinates) {
  require(!members.empty(), ErrorCode::kInvalidArgument, "merge plan has no members");
  Coordinate out;
  bool first = true;
  for (const auto& m : members) {
    auto it = coordinates.find(m.model_id);
    if (it == coordinates.end()) fail(ErrorCode::kNotFound, "no coordinate for '" + m.model_id + "'");
    const Coordinate& z = it->second;
    if (first) {
      out.basis_fingerprint = z.basis_fingerprint;
      first = false;
    } else if (z.basis_fingerprint != out.basis_fingerprint) {
      fail(ErrorCode::kMismatch, "coordinate of '" + m.model_id + "' uses a different basis");
    }
    for (const auto& [i, value] : z.entries) out.entries[i] += m.alpha * value;
  }
  return out;
}

}  // namespace xpert
