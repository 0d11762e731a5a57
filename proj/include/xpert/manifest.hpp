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

// Published registry state: the shared basis and every explained model's
// coordinate over it. Reals are written with round-trip-exact formatting.

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xpert/vectorspace.hpp"

namespace xpert {

struct BasisEntry {
  std::size_t index = 0;
  std::string word;
  std::vector<double> vector;
  double source_probability = 0.0;
};

struct ManifestModel {
  std::string model_id;
  std::string display_name;
  Coordinate coordinate;
  double residual_norm = 0.0;
  double shift_norm = 0.0;
  bool satisfied = true;
  std::string artifact_uri;
  std::uint64_t artifact_bytes = 0;
  std::string artifact_sha256;
};

struct RegistryManifest {
  std::int64_t version = 0;
  std::string summarizer_fingerprint;
  std::string instruction_template_hash;
  double ortho_threshold = 0.1;
  double epsilon_fraction = 0.2;
  std::string prompt_set_id;
  std::size_t dim = 0;
  std::string basis_fingerprint;
  std::vector<BasisEntry> basis;
  std::vector<ManifestModel> models;

  const ManifestModel* find(const std::string& model_id) const;
  std::map<std::string, Coordinate> coordinates() const;
  // Rebuilds the basis, re-checking orthogonality. Requires dim > 0.
  StyleBasis to_basis() const;
  // Checks contiguous indices, coordinate extents and the basis fingerprint.
  void validate() const;
};

nlohmann::json coordinate_to_json(const Coordinate& c);
Coordinate coordinate_from_json(const nlohmann::json& j);

nlohmann::json manifest_to_json(const RegistryManifest& m);
RegistryManifest manifest_from_json(const nlohmann::json& j);

// Pretty-printed with sorted keys and a trailing newline; the exact bytes are
// what durability checks compare.
std::string encode_manifest(const RegistryManifest& m);
RegistryManifest decode_manifest(std::string_view text);

// "XPERTVEC" followed by little-endian f32 values.
std::string encode_basis_vector(std::span<const double> values);
std::vector<float> decode_basis_vector(std::string_view bytes);

}  // namespace xpert
