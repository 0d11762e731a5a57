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

// Embedding-vector algebra and the sequential construction of a shared basis
// of near-orthogonal style directions.
//
// A personalized model's behaviour shift is summarized as one dense vector V.
// V is explained as sum_i z_i * v_i over unit "sub-vectors" v_i, each labeled
// with a style word. Coefficients are one-shot projections z_i = V . v_i; the
// basis only ever accepts directions whose |cos| with every member is at most
// the orthogonality threshold, so the projections stay close to a least-squares
// fit without ever solving one.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xpert {

class EmbeddingVector {
 public:
  // Throws kInvalidArgument on an empty vector and kNonFinite on NaN/Inf.
  explicit EmbeddingVector(std::vector<double> values);

  static EmbeddingVector zeros(std::size_t dim);

  std::size_t dim() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  double norm() const;
  double l1_norm() const;
  double dot(const EmbeddingVector& other) const;
  EmbeddingVector scaled(double factor) const;
  // Throws kZeroVector when the norm is zero.
  EmbeddingVector normalized() const;

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<double> values_;
};

void check_same_dim(std::size_t a, std::size_t b, const char* what);

// One explainable axis. The direction is stored with unit norm.
struct SubVector {
  std::string word;
  EmbeddingVector direction;
  double source_probability = 0.0;

  // Normalizes `raw`; throws kDegenerateWord when it has zero norm.
  static SubVector from_raw(std::string word, const EmbeddingVector& raw,
                            double source_probability = 0.0);

  std::size_t dim() const { return direction.dim(); }
};

struct BasisConfig {
  double ortho_threshold = 0.1;
  double epsilon_fraction = 0.2;
  std::size_t candidate_cap = 512;

  void validate() const;
};

// Ordered, append-only set of near-orthogonal sub-vectors. Indices assigned at
// insertion never change; coordinates refer to members by index.
class StyleBasis {
 public:
  StyleBasis(std::size_t dim, double ortho_threshold, double epsilon_fraction);

  // Rebuilds a basis from persisted members, re-checking every invariant.
  static StyleBasis from_members(std::size_t dim, double ortho_threshold, double epsilon_fraction,
                                 std::vector<SubVector> members);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty(); }
  const std::vector<SubVector>& members() const { return members_; }
  const SubVector& operator[](std::size_t i) const { return members_[i]; }
  double ortho_threshold() const { return ortho_threshold_; }
  double epsilon_fraction() const { return epsilon_fraction_; }

  // Content hash over dim and the ordered (word, direction) members.
  const std::string& fingerprint() const { return fingerprint_; }

  std::optional<std::size_t> index_of(const std::string& word) const;

  // Returns a copy with `member` appended. Throws kInvalidArgument if the
  // word is already present or the candidate fails the orthogonality gate.
  StyleBasis appended(SubVector member) const;

 private:
  void refresh_fingerprint();

  std::size_t dim_;
  double ortho_threshold_;
  double epsilon_fraction_;
  std::vector<SubVector> members_;
  std::string fingerprint_;
};

// Point in the explainable latent space. Absent indices mean zero.
struct Coordinate {
  std::string basis_fingerprint;
  std::map<std::size_t, double> entries;

  double at(std::size_t index) const;
  std::vector<double> dense(std::size_t length) const;
  double l1_norm() const;
  // One past the largest index, 0 when empty.
  std::size_t extent() const;
};

struct DecompositionReport {
  Coordinate coordinate;
  double residual_norm = 0.0;
  double epsilon_used = 0.0;
  bool satisfied = true;
};

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

bool is_orthogonal(const SubVector& candidate, const StyleBasis& basis);

double project_coefficient(const EmbeddingVector& v, const SubVector& sub);

DecompositionReport decompose(const EmbeddingVector& v, const StyleBasis& basis);

struct Candidate {
  std::string word;
  double probability = 0.0;
};

// Sorts by descending probability, ties by ascending word.
void rank_candidates(std::vector<Candidate>& candidates);
bool is_ranked(std::span<const Candidate> candidates);

using WordToVector = std::function<SubVector(const std::string& word)>;

struct ExtendResult {
  StyleBasis basis;
  DecompositionReport report;
  std::size_t candidates_examined = 0;
  std::size_t members_added = 0;
  // Residual after the initial decomposition and after every append.
  std::vector<double> residual_trace;
};

// Grows `basis` with candidates until `v` is explained within epsilon, the
// stream ends, or `candidate_cap` candidates have been examined. Words already
// in the basis are counted as examined but not converted.
ExtendResult extend_basis_for_model(const EmbeddingVector& v, StyleBasis basis,
                                    std::span<const Candidate> candidates,
                                    const WordToVector& word_to_vector,
                                    std::size_t candidate_cap);

struct ModelShift {
  std::string model_id;
  EmbeddingVector shift;
  std::vector<Candidate> candidates;
};

struct CommonBasisResult {
  StyleBasis basis;
  // Report for each model at the moment it was processed.
  std::map<std::string, DecompositionReport> reports;
  // Every model re-decomposed against the final basis.
  std::map<std::string, DecompositionReport> final_reports;
  std::map<std::string, std::size_t> candidates_examined;
};

CommonBasisResult build_common_basis(std::span<const ModelShift> models, const BasisConfig& config,
                                     const WordToVector& word_to_vector);

}  // namespace xpert
