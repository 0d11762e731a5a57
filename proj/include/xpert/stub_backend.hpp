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

// Deterministic stand-in for a summarizer and for the generators it probes.
//
// Texts produced by the stub are whitespace-separated tokens. Tokens starting
// with '#' are style tags, "#word" (weight 1) or "#word:w"; every other token
// is content. A text's style vector is the weighted sum of its tags' planted
// vectors, and its noise is a Gaussian draw seeded by its content, so two texts
// with the same content carry the same noise.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xpert/protocol.hpp"
#include "xpert/snapshot.hpp"
#include "xpert/vectorspace.hpp"

namespace xpert::sim {

struct PlantedStyle {
  std::string word;
  std::vector<double> direction;
};

// A near-duplicate word of one planted style; cos to its style is 0.95.
struct Synonym {
  std::string word;
  std::size_t style = 0;
  std::vector<double> direction;
};

struct StyleWorld {
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  double noise_sigma = 0.0;
  // Smallest pairwise angle between planted styles, radians.
  double style_gap = 0.0;
  std::vector<PlantedStyle> styles;
  std::vector<Synonym> synonyms;
  // dim x dim row-major map used by word_vector.
  std::vector<double> linear_map;
  bool identity_map = false;

  // Planted or synonym direction; nullptr for words without style effect.
  const std::vector<double>* vector_of(std::string_view word) const;
  std::optional<std::size_t> style_index(std::string_view word) const;
  std::vector<std::string> vocabulary() const;
};

inline constexpr double kSynonymCosine = 0.95;
inline constexpr std::size_t kSynonymsPerStyle = 3;
inline constexpr double kCandidateTemperature = 0.1;

// Throws kInvalidArgument when n_styles > dim or either is zero.
StyleWorld generate_world(std::uint64_t seed, std::size_t n_styles, std::size_t dim, double noise_sigma,
                          bool identity_map = false);

// Who is speaking: the voice becomes part of every generated text's content
// (and therefore of its noise), the weights pick its style tags.
struct Persona {
  std::string voice = "base";
  std::vector<double> weights;  // one per planted style; empty means none
};

inline constexpr const char* kStyleWeightsTensor = "stub.style_weights";

TensorSnapshot base_snapshot(const StyleWorld& world);
// Base filler plus a small seeded perturbation, with the given style weights.
TensorSnapshot personalized_snapshot(const StyleWorld& world, const TensorSnapshot& base,
                                     std::span<const double> weights, std::uint64_t seed);
// Reads the style weights; the voice is the snapshot fingerprint. A snapshot
// whose weights are all zero speaks with the base voice.
Persona persona_from_snapshot(const StyleWorld& world, const TensorSnapshot& snapshot);

struct ParsedText {
  std::string content;  // non-tag tokens joined by single spaces
  std::vector<std::pair<std::string, double>> tags;
};

ParsedText parse_text(std::string_view text);
std::string render_text(std::string_view prompt, std::string_view voice,
                        const std::vector<std::pair<std::string, double>>& tags);

class StubBackend {
 public:
  StubBackend(std::shared_ptr<const StyleWorld> world, Persona persona);

  const StyleWorld& world() const { return *world_; }
  const Persona& persona() const { return persona_; }
  std::string fingerprint() const;

  // One protocol request line in, one reply line out.
  std::string handle(std::string_view line) const;
  proto::LineHandler handler() const;

  std::string generate_one(std::string_view prompt, const std::optional<std::string>& style_word) const;
  std::vector<double> shift_embed(std::span<const ResponsePair> pairs) const;
  std::vector<Candidate> candidates(std::span<const double> v, std::size_t limit) const;
  std::vector<double> token_embedding(std::string_view token) const;
  std::vector<double> word_vector(const std::vector<std::vector<double>>& prefix, const std::string& word,
                                  const std::vector<std::vector<double>>& suffix) const;
  proto::GradReply grad_word_vector(const std::vector<std::vector<double>>& prefix,
                                    const std::string& word,
                                    const std::vector<std::vector<double>>& suffix,
                                    std::span<const double> target) const;

  // Per-text noise draw, sigma/sqrt(2) per coordinate so a pair difference
  // has standard deviation sigma.
  std::vector<double> text_noise(std::string_view content) const;

 private:
  std::shared_ptr<const StyleWorld> world_;
  Persona persona_;
};

// In-process session speaking the full wire format.
std::unique_ptr<proto::BackendSession> connect_stub(std::shared_ptr<const StyleWorld> world,
                                                    Persona persona = {});

}  // namespace xpert::sim
