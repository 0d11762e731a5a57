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

#include "xpert/manifest.hpp"

#include <cmath>
#include <cstring>

#include "xpert/error.hpp"

namespace xpert {

using nlohmann::json;

namespace {

constexpr char kVecMagic[8] = {'X', 'P', 'E', 'R', 'T', 'V', 'E', 'C'};

template <typename T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("manifest field '") + key + "': " + e.what());
  }
}

}  // namespace

const ManifestModel* RegistryManifest::find(const std::string& model_id) const {
  for (const auto& m : models) {
    if (m.model_id == model_id) return &m;
  }
  return nullptr;
}

std::map<std::string, Coordinate> RegistryManifest::coordinates() const {
  std::map<std::string, Coordinate> out;
  for (const auto& m : models) out.emplace(m.model_id, m.coordinate);
  return out;
}

StyleBasis RegistryManifest::to_basis() const {
  require(dim > 0, ErrorCode::kInvalidArgument, "manifest has no embedding dimension yet");
  std::vector<SubVector> members;
  members.reserve(basis.size());
  for (const auto& e : basis) {
    members.push_back(SubVector{e.word, EmbeddingVector(e.vector), e.source_probability});
  }
  return StyleBasis::from_members(dim, ortho_threshold, epsilon_fraction, std::move(members));
}

void RegistryManifest::validate() const {
  for (std::size_t i = 0; i < basis.size(); ++i) {
    require(basis[i].index == i, ErrorCode::kFormat, "basis indices must be contiguous from 0");
    require(basis[i].vector.size() == dim, ErrorCode::kFormat, "basis vector length differs from dim");
  }
  if (dim > 0) {
    require(to_basis().fingerprint() == basis_fingerprint, ErrorCode::kFormat,
            "basis_fingerprint does not match the basis vectors");
  }
  for (const auto& m : models) {
    require(m.coordinate.extent() <= basis.size(), ErrorCode::kFormat,
            "coordinate of '" + m.model_id + "' references a missing basis index");
  }
}

json coordinate_to_json(const Coordinate& c) {
  json entries = json::array();
  for (const auto& [index, value] : c.entries) entries.push_back({{"index", index}, {"value", value}});
  return {{"basis_fingerprint", c.basis_fingerprint}, {"entries", std::move(entries)}};
}

Coordinate coordinate_from_json(const json& j) {
  Coordinate c;
  c.basis_fingerprint = field<std::string>(j, "basis_fingerprint");
  for (const auto& e : j.at("entries")) {
    const auto index = field<std::size_t>(e, "index");
    const auto value = field<double>(e, "value");
    require(std::isfinite(value), ErrorCode::kFormat, "coordinate value is not finite");
    require(c.entries.emplace(index, value).second, ErrorCode::kFormat, "duplicate coordinate index");
  }
  return c;
}

json manifest_to_json(const RegistryManifest& m) {
  json basis = json::array();
  for (const auto& e : m.basis) {
    basis.push_back({{"index", e.index},
                     {"word", e.word},
                     {"vector", e.vector},
                     {"source_probability", e.source_probability}});
  }
  json models = json::array();
  for (const auto& x : m.models) {
    models.push_back({{"model_id", x.model_id},
                      {"display_name", x.display_name},
                      {"coordinate", coordinate_to_json(x.coordinate)},
                      {"residual_norm", x.residual_norm},
                      {"shift_norm", x.shift_norm},
                      {"satisfied", x.satisfied},
                      {"artifact_uri", x.artifact_uri},
                      {"artifact_bytes", x.artifact_bytes},
                      {"artifact_sha256", x.artifact_sha256}});
  }
  return {{"version", m.version},
          {"summarizer_fingerprint", m.summarizer_fingerprint},
          {"instruction_template_hash", m.instruction_template_hash},
          {"ortho_threshold", m.ortho_threshold},
          {"epsilon_fraction", m.epsilon_fraction},
          {"prompt_set_id", m.prompt_set_id},
          {"dim", m.dim},
          {"basis_fingerprint", m.basis_fingerprint},
          {"basis", std::move(basis)},
          {"models", std::move(models)}};
}

RegistryManifest manifest_from_json(const json& j) {
  RegistryManifest m;
  m.version = field<std::int64_t>(j, "version");
  m.summarizer_fingerprint = field<std::string>(j, "summarizer_fingerprint");
  m.instruction_template_hash = field<std::string>(j, "instruction_template_hash");
  m.ortho_threshold = field<double>(j, "ortho_threshold");
  m.epsilon_fraction = field<double>(j, "epsilon_fraction");
  m.prompt_set_id = field<std::string>(j, "prompt_set_id");
  m.dim = field<std::size_t>(j, "dim");
  m.basis_fingerprint = field<std::string>(j, "basis_fingerprint");
  for (const auto& e : j.at("basis")) {
    m.basis.push_back({field<std::size_t>(e, "index"), field<std::string>(e, "word"),
                       field<std::vector<double>>(e, "vector"), field<double>(e, "source_probability")});
  }
  for (const auto& x : j.at("models")) {
    ManifestModel mm;
    mm.model_id = field<std::string>(x, "model_id");
    mm.display_name = field<std::string>(x, "display_name");
    mm.coordinate = coordinate_from_json(x.at("coordinate"));
    mm.residual_norm = field<double>(x, "residual_norm");
    mm.shift_norm = field<double>(x, "shift_norm");
    mm.satisfied = field<bool>(x, "satisfied");
    mm.artifact_uri = field<std::string>(x, "artifact_uri");
    mm.artifact_bytes = field<std::uint64_t>(x, "artifact_bytes");
    mm.artifact_sha256 = field<std::string>(x, "artifact_sha256");
    m.models.push_back(std::move(mm));
  }
  m.validate();
  return m;
}

std::string encode_manifest(const RegistryManifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

RegistryManifest decode_manifest(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("manifest is not JSON: ") + e.what());
  }
  return manifest_from_json(j);
}

std::string encode_basis_vector(std::span<const double> values) {
  std::string out(kVecMagic, sizeof kVecMagic);
  for (double v : values) {
    const float f = static_cast<float>(v);
    char bytes[4];
    std::memcpy(bytes, &f, 4);
    out.append(bytes, 4);
  }
  return out;
}

std::vector<float> decode_basis_vector(std::string_view bytes) {
  require(bytes.size() >= sizeof kVecMagic && std::memcmp(bytes.data(), kVecMagic, sizeof kVecMagic) == 0,
          ErrorCode::kFormat, "basis vector file has a bad magic");
  const auto payload = bytes.substr(sizeof kVecMagic);
  require(payload.size() % 4 == 0, ErrorCode::kFormat, "basis vector file is truncated");
  std::vector<float> out(payload.size() / 4);
  std::memcpy(out.data(), payload.data(), payload.size());
  return out;
}

}  // namespace xpert
