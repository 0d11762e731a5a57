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

// Turning model behaviour into vectors through a summarizer backend.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xpert/protocol.hpp"
#include "xpert/vectorspace.hpp"

namespace xpert::probe {

using proto::BackendSession;

struct PromptSet {
  std::string id;
  std::vector<std::string> prompts;
  std::string source_tag;

  // Validates: nonempty, unique prompts.
  static PromptSet make(std::string id, std::vector<std::string> prompts, std::string source_tag = {});
  // One prompt per nonempty line; the id is a content hash.
  static PromptSet from_text(std::string_view text, std::string source_tag = {});

  std::size_t size() const { return prompts.size(); }
  PromptSet prefix(std::size_t n) const;
};

// Named instruction sent with every shift_embed request. Vectors are only
// comparable when produced under the same template, so its hash is recorded
// in every manifest.
inline constexpr std::string_view kInstructionTemplateName = "style-diff/v1";
const std::string& instruction_template();
std::string instruction_template_hash();

inline constexpr std::size_t kDefaultProbeVolume = 50;
inline constexpr double kDefaultVolumeTolerance = 0.02;

// Soft-prompt initialization text; <word> marks the candidate word slot.
inline constexpr std::string_view kSoftPromptTemplate =
    "use one adjective to summarize the meaning of <word>, when it is used to describe a language "
    "style";

struct SoftPrompt {
  std::vector<std::vector<double>> prefix;
  std::vector<std::vector<double>> suffix;

  std::size_t token_count() const { return prefix.size() + suffix.size(); }
  void validate(std::size_t dim) const;
};

EmbeddingVector extract_shift_embedding(BackendSession& summarizer, std::span<const ResponsePair> pairs);

// One generate call per prompt on each generator. A failure names the prompt
// index it happened at.
std::vector<ResponsePair> probe_models(BackendSession& base_gen, BackendSession& pllm_gen,
                                       const PromptSet& prompts);

// Same pairing against base responses obtained earlier.
std::vector<ResponsePair> probe_model(std::span<const std::string> base_responses,
                                      BackendSession& pllm_gen, const PromptSet& prompts);

std::vector<std::string> base_responses(BackendSession& base_gen, const PromptSet& prompts);

struct VolumePoint {
  std::size_t prompts = 0;
  double cosine_distance = 0.0;
};

struct VolumeEstimate {
  std::size_t count = 0;
  bool reached = false;
  std::vector<VolumePoint> curve;
};

// Cosine distance, 1 - cos. Two zero vectors are at distance 0; a zero and a
// nonzero vector at distance 1.
double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b);

VolumeEstimate estimate_required_prompts(BackendSession& summarizer, BackendSession& base_gen,
                                         BackendSession& pllm_gen, const PromptSet& pool,
                                         double tolerance = kDefaultVolumeTolerance,
                                         std::size_t step = 10);

// |prompts| stylized generate calls plus one shift_embed on the summarizer.
SubVector word_to_subvector(BackendSession& summarizer, const std::string& word,
                            std::span<const std::string> prompts,
                            std::span<const std::string> base_responses);

SubVector word_to_subvector(BackendSession& summarizer, const std::string& word,
                            BackendSession& base_gen, const PromptSet& prompts);

// At most `limit` words, descending probability, ties lexicographic.
std::vector<Candidate> candidate_words(BackendSession& summarizer, const EmbeddingVector& v,
                                       std::size_t limit);

struct TuneConfig {
  std::size_t token_count = 10;
  double learning_rate = 0.5;
  std::size_t max_steps = 500;
  double target_error = 0.0;
  // Central-difference step used when the backend has no analytic gradient.
  double fd_step = 1e-3;
  bool force_finite_differences = false;
};

struct TuneResult {
  SoftPrompt prompt;
  // loss_curve[0] is the untuned loss; one entry per accepted step after it.
  std::vector<double> loss_curve;
  std::size_t steps = 0;
};

// Soft prompt initialized from kSoftPromptTemplate, split evenly around the
// word slot and repeated or trimmed to token_count tokens.
SoftPrompt initial_soft_prompt(BackendSession& backend, std::size_t token_count);

// Gradient descent on 1 - cos(word_vector(prompt, word), ground_truth) with
// step halving whenever a step would raise the loss, so the curve never
// increases. Each accepted step grows the step size by 1.5x.
TuneResult tune_prompt(BackendSession& backend, const std::string& word, const SubVector& ground_truth,
                       const TuneConfig& config);

// One word_vector call.
SubVector fast_word_to_subvector(BackendSession& backend, const std::string& word, const SoftPrompt& prompt);

}  // namespace xpert::probe
