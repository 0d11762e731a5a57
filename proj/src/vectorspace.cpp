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

#include "xpert/vectorspace.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "xpert/error.hpp"
#include "xpert/hash.hpp"

namespace xpert {

namespace {

constexpr double kUnitTolerance = 1e-6;

}  // namespace

void check_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    fail(ErrorCode::kDimensionMismatch,
         std::string(what) + ": dimension " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

EmbeddingVector::EmbeddingVector(std::vector<double> values) : values_(std::move(values)) {
  require(!values_.empty(), ErrorCode::kInvalidArgument, "embedding vector must have dim >= 1");
  for (double x : values_) {
    require(std::isfinite(x), ErrorCode::kNonFinite, "embedding vector has a non-finite value");
  }
}

EmbeddingVector EmbeddingVector::zeros(std::size_t dim) {
  return EmbeddingVector(std::vector<double>(dim, 0.0));
}

double EmbeddingVector::norm() const {
  double sum = 0.0;
  for (double x : values_) sum += x * x;
  return std::sqrt(sum);
}

double EmbeddingVector::l1_norm() const {
  double sum = 0.0;
  for (double x : values_) sum += std::abs(x);
  return sum;
}

double EmbeddingVector::dot(const EmbeddingVector& other) const {
  check_same_dim(dim(), other.dim(), "dot");
  double sum = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) sum += values_[i] * other.values_[i];
  return sum;
}

EmbeddingVector EmbeddingVector::scaled(double factor) const {
  std::vector<double> out(values_);
  for (double& x : out) x *= factor;
  return EmbeddingVector(std::move(out));
}

EmbeddingVector EmbeddingVector::normalized() const {
  const double n = norm();
  require(n > 0.0, ErrorCode::kZeroVector, "cannot normalize a zero vector");
  std::vector<double> out(values_);
  for (double& x : out) x /= n;
  return EmbeddingVector(std::move(out));
}

SubVector SubVector::from_raw(std::string word, const EmbeddingVector& raw,
                              double source_probability) {
  require(!word.empty(), ErrorCode::kInvalidArgument, "sub-vector word must be nonempty");
  if (raw.norm() == 0.0) {
    fail(ErrorCode::kDegenerateWord, "word '" + word + "' produced a zero-norm shift");
  }
  return SubVector{std::move(word), raw.normalized(), source_probability};
}

void BasisConfig::validate() const {
  require(ortho_threshold > 0.0 && ortho_threshold < 1.0, ErrorCode::kInvalidArgument,
          "ortho_threshold must be in (0,1)");
  require(epsilon_fraction > 0.0 && epsilon_fraction < 1.0, ErrorCode::kInvalidArgument,
          "epsilon_fraction must be in (0,1)");
  require(candidate_cap >= 1, ErrorCode::kInvalidArgument, "candidate_cap must be >= 1");
}

StyleBasis::StyleBasis(std::size_t dim, double ortho_threshold, double epsilon_fraction)
    : dim_(dim), ortho_threshold_(ortho_threshold), epsilon_fraction_(epsilon_fraction) {
  require(dim >= 1, ErrorCode::kInvalidArgument, "basis dim must be >= 1");
  BasisConfig{ortho_threshold, epsilon_fraction, 1}.validate();
  refresh_fingerprint();
}

StyleBasis StyleBasis::from_members(std::size_t dim, double ortho_threshold,
                                    double epsilon_fraction, std::vector<SubVector> members) {
  StyleBasis basis(dim, ortho_threshold, epsilon_fraction);
  for (auto& m : members) basis = basis.appended(std::move(m));
  return basis;
}

std::optional<std::size_t> StyleBasis::index_of(const std::string& word) const {
  for (std::size_t i = 0; i < members_.size(); ++i) {
    if (members_[i].word == word) return i;
  }
  return std::nullopt;
}

StyleBasis StyleBasis::appended(SubVector member) const {
  check_same_dim(member.dim(), dim_, "basis append");
  require(std::abs(member.direction.norm() - 1.0) <= kUnitTolerance, ErrorCode::kInvalidArgument,
          "basis member '" + member.word + "' is not unit norm");
  require(!index_of(member.word).has_value(), ErrorCode::kInvalidArgument,
          "basis already contains word '" + member.word + "'");
  require(is_orthogonal(member, *this), ErrorCode::kInvalidArgument,
          "basis member '" + member.word + "' violates the orthogonality threshold");
  StyleBasis out(*this);
  out.members_.push_back(std::move(member));
  out.refresh_fingerprint();
  return out;
}

void StyleBasis::refresh_fingerprint() {
  Fnv1a64 h;
  h.update("xpert-basis-v1");
  h.update_u64(dim_);
  h.update_u64(members_.size());
  for (const auto& m : members_) {
    h.update_u64(m.word.size());
    h.update(m.word);
    for (double x : m.direction.values()) h.update_f64(x);
  }
  fingerprint_ = to_hex(h.digest());
}

double Coordinate::at(std::size_t index) const {
  auto it = entries.find(index);
  return it == entries.end() ? 0.0 : it->second;
}

std::vector<double> Coordinate::dense(std::size_t length) const {
  std::vector<double> out(length, 0.0);
  for (const auto& [i, z] : entries) {
    if (i < length) out[i] = z;
  }
  return out;
}

double Coordinate::l1_norm() const {
  double sum = 0.0;
  for (const auto& [i, z] : entries) sum += std::abs(z);
  return sum;
}

std::size_t Coordinate::extent() const {
  return entries.empty() ? 0 : entries.rbegin()->first + 1;
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  check_same_dim(a.dim(), b.dim(), "cosine_similarity");
  const double na = a.norm();
  const double nb = b.norm();
  require(na > 0.0 && nb > 0.0, ErrorCode::kZeroVector, "cosine_similarity of a zero vector");
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

bool is_orthogonal(const SubVector& candidate, const StyleBasis& basis) {
  check_same_dim(candidate.dim(), basis.dim(), "is_orthogonal");
  for (const auto& m : basis.members()) {
    if (std::abs(cosine_similarity(candidate.direction, m.direction)) > basis.ortho_threshold()) {
      return false;
    }
  }
  return true;
}

double project_coefficient(const EmbeddingVector& v, const SubVector& sub) {
  check_same_dim(v.dim(), sub.dim(), "project_coefficient");
  // Directions are unit norm, so V . v_i / |v_i| reduces to a dot product.
  return v.dot(sub.direction);
}

DecompositionReport decompose(const EmbeddingVector& v, const StyleBasis& basis) {
  check_same_dim(v.dim(), basis.dim(), "decompose");
  DecompositionReport report;
  report.coordinate.basis_fingerprint = basis.fingerprint();
  const double v_norm = v.norm();
  report.epsilon_used = basis.epsilon_fraction() * v_norm;

  std::vector<double> residual(v.values().begin(), v.values().end());
  for (std::size_t i = 0; i < basis.size(); ++i) {
    const auto& member = basis[i];
    const double z = project_coefficient(v, member);
    report.coordinate.entries[i] = z;
    const auto dir = member.direction.values();
    for (std::size_t k = 0; k < residual.size(); ++k) residual[k] -= z * dir[k];
  }
  double sum = 0.0;
  for (double r : residual) sum += r * r;
  report.residual_norm = std::sqrt(sum);
  report.satisfied = v_norm == 0.0 ? true : report.residual_norm < report.epsilon_used;
  return report;
}

void rank_candidates(std::vector<Candidate>& candidates) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.word < b.word;
  });
}

bool is_ranked(std::span<const Candidate> candidates) {
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& a = candidates[i - 1];
    const auto& b = candidates[i];
    if (a.probability < b.probability) return false;
    if (a.probability == b.probability && b.word < a.word) return false;
  }
  return true;
}

ExtendResult extend_basis_for_model(const EmbeddingVector& v, StyleBasis basis,
                                    std::span<const Candidate> candidates,
                                    const WordToVector& word_to_vector,
                                    std::size_t candidate_cap) {
  check_same_dim(v.dim(), basis.dim(), "extend_basis_for_model");
  require(is_ranked(candidates), ErrorCode::kInvalidArgument,
          "candidates must be sorted by descending probability");

  DecompositionReport report = decompose(v, basis);
  ExtendResult result{std::move(basis), std::move(report), 0, 0, {}};
  result.residual_trace.push_back(result.report.residual_norm);

  for (const auto& candidate : candidates) {
    if (result.report.satisfied || result.candidates_examined >= candidate_cap) break;
    ++result.candidates_examined;
    if (result.basis.index_of(candidate.word)) continue;

    SubVector sub = word_to_vector(candidate.word);
    check_same_dim(sub.dim(), result.basis.dim(), "word_to_vector result");
    sub.word = candidate.word;
    sub.source_probability = candidate.probability;
    if (!is_orthogonal(sub, result.basis)) continue;

    result.basis = result.basis.appended(std::move(sub));
    ++result.members_added;
    result.report = decompose(v, result.basis);
    result.residual_trace.push_back(result.report.residual_norm);
  }
  return result;
}

CommonBasisResult build_common_basis(std::span<const ModelShift> models, const BasisConfig& config,
                                     const WordToVector& word_to_vector) {
  config.validate();
  require(!models.empty(), ErrorCode::kInvalidArgument, "build_common_basis needs >= 1 model");
  const std::size_t dim = models.front().shift.dim();
  std::unordered_set<std::string> seen;
  for (const auto& m : models) {
    check_same_dim(m.shift.dim(), dim, "build_common_basis");
    require(seen.insert(m.model_id).second, ErrorCode::kInvalidArgument,
            "duplicate model id '" + m.model_id + "'");
  }

  CommonBasisResult result{StyleBasis(dim, config.ortho_threshold, config.epsilon_fraction), {}, {},
                           {}};
  for (const auto& m : models) {
    auto step = extend_basis_for_model(m.shift, std::move(result.basis), m.candidates,
                                       word_to_vector, config.candidate_cap);
    result.basis = std::move(step.basis);
    result.reports.emplace(m.model_id, std::move(step.report));
    result.candidates_examined[m.model_id] = step.candidates_examined;
  }
  for (const auto& m : models) {
    result.final_reports.emplace(m.model_id, decompose(m.shift, result.basis));
  }
  return result;
}

}  // namespace xpert
