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

#include "xpert/registry.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xpert/error.hpp"
#include "xpert/hash.hpp"
#include "xpert/snapshot.hpp"

namespace xpert::registry {

using nlohmann::json;

namespace {

constexpr const char* kManifestKey = "manifest.json";
constexpr const char* kConfigKey = "registry.json";

std::string record_key(const std::string& id) { return "models/" + id + "/record.json"; }
std::string snapshot_key(const std::string& id) { return "models/" + id + "/snapshot.bin"; }

std::string basis_key(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "basis/%03zu.vec", index);
  return buf;
}

json report_to_json(const DecompositionReport& r) {
  return {{"coordinate", coordinate_to_json(r.coordinate)},
          {"residual_norm", r.residual_norm},
          {"epsilon_used", r.epsilon_used},
          {"satisfied", r.satisfied}};
}

DecompositionReport report_from_json(const json& j) {
  DecompositionReport r;
  r.coordinate = coordinate_from_json(j.at("coordinate"));
  r.residual_norm = j.at("residual_norm").get<double>();
  r.epsilon_used = j.at("epsilon_used").get<double>();
  r.satisfied = j.at("satisfied").get<bool>();
  return r;
}

json record_to_json(const ModelRecord& r) {
  json j = {{"model_id", r.model_id},
            {"display_name", r.display_name},
            {"artifact_uri", r.artifact_uri},
            {"base_model_fingerprint", r.base_model_fingerprint},
            {"artifact_bytes", r.artifact_bytes},
            {"artifact_sha256", r.artifact_sha256},
            {"created_at", r.created_at},
            {"status", r.explained ? "explained" : "unexplained"},
            {"candidates_examined", r.candidates_examined}};
  if (r.shift) j["shift"] = std::vector<double>(r.shift->values().begin(), r.shift->values().end());
  if (r.report) j["report"] = report_to_json(*r.report);
  return j;
}

ModelRecord record_from_json(const json& j) {
  ModelRecord r;
  try {
    r.model_id = j.at("model_id").get<std::string>();
    r.display_name = j.at("display_name").get<std::string>();
    r.artifact_uri = j.at("artifact_uri").get<std::string>();
    r.base_model_fingerprint = j.at("base_model_fingerprint").get<std::string>();
    r.artifact_bytes = j.at("artifact_bytes").get<std::uint64_t>();
    r.artifact_sha256 = j.at("artifact_sha256").get<std::string>();
    r.created_at = j.at("created_at").get<std::int64_t>();
    r.explained = j.at("status").get<std::string>() == "explained";
    r.candidates_examined = j.value("candidates_examined", std::size_t{0});
    if (j.contains("shift")) r.shift = EmbeddingVector(j["shift"].get<std::vector<double>>());
    if (j.contains("report")) r.report = report_from_json(j["report"]);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("bad model record: ") + e.what());
  }
  return r;
}

std::int64_t now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

bool same_header(const RegistryManifest& a, const RegistryManifest& b) {
  return a.summarizer_fingerprint == b.summarizer_fingerprint &&
         a.instruction_template_hash == b.instruction_template_hash && a.ortho_threshold == b.ortho_threshold &&
         a.epsilon_fraction == b.epsilon_fraction && a.prompt_set_id == b.prompt_set_id && a.dim == b.dim;
}

// Clears the job flag on every exit path.
struct JobGuard {
  std::atomic<bool>& flag;
  ~JobGuard() { flag.store(false); }
};

}  // namespace

DirectoryStorage::DirectoryStorage(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

std::optional<std::string> DirectoryStorage::read(const std::string& key) const {
  const auto path = root_ / key;
  if (!std::filesystem::exists(path)) return std::nullopt;
  return read_file_bytes(path);
}

void DirectoryStorage::write(const std::string& key, std::string_view bytes) {
  write_file_atomic(root_ / key, bytes);
}

std::vector<std::string> DirectoryStorage::list(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root_)) {
    if (!entry.is_regular_file()) continue;
    auto rel = std::filesystem::relative(entry.path(), root_).generic_string();
    if (rel.rfind(prefix, 0) == 0) out.push_back(std::move(rel));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<std::filesystem::path> DirectoryStorage::path_of(const std::string& key) const {
  return root_ / key;
}

std::optional<std::string> MemoryStorage::read(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = data_.find(key);
  if (it == data_.end()) return std::nullopt;
  return it->second;
}

void MemoryStorage::write(const std::string& key, std::string_view bytes) {
  std::lock_guard lock(mu_);
  data_[key] = std::string(bytes);
}

std::vector<std::string> MemoryStorage::list(const std::string& prefix) const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (auto it = data_.lower_bound(prefix); it != data_.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    out.push_back(it->first);
  }
  return out;
}

std::optional<SubVector> WordVectorCache::find(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void WordVectorCache::store(const std::string& key, const SubVector& sub) {
  std::lock_guard lock(mu_);
  entries_.insert_or_assign(key, sub);
}

std::size_t WordVectorCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string format_explanation(const Explanation& e, std::size_t k) {
  if (e.terms.empty()) return "(no style shift)";
  std::string out;
  for (std::size_t i = 0; i < e.terms.size() && i < k; ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " (%.3f)", e.terms[i].coefficient);
    if (i) out += ", ";
    out += e.terms[i].word + buf;
  }
  return out;
}

Registry::Registry(std::unique_ptr<Storage> storage, std::string base_model_fingerprint)
    : storage_(std::move(storage)), base_fingerprint_(std::move(base_model_fingerprint)) {
  require(storage_ != nullptr, ErrorCode::kInvalidArgument, "registry needs storage");
  load();
}

std::unique_ptr<Registry> Registry::open_directory(const std::filesystem::path& root,
                                                   std::string base_model_fingerprint) {
  return std::make_unique<Registry>(std::make_unique<DirectoryStorage>(root), std::move(base_model_fingerprint));
}

void Registry::load() {
  if (auto cfg = storage_->read(kConfigKey)) {
    std::string stored;
    try {
      stored = json::parse(*cfg).at("base_model_fingerprint").get<std::string>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kFormat, std::string("bad registry.json: ") + e.what());
    }
    if (!base_fingerprint_.empty() && !stored.empty() && stored != base_fingerprint_) {
      fail(ErrorCode::kMismatch, "registry is bound to base model " + stored + ", not " + base_fingerprint_);
    }
    if (base_fingerprint_.empty()) base_fingerprint_ = stored;
  } else if (!base_fingerprint_.empty()) {
    storage_->write(kConfigKey, json{{"base_model_fingerprint", base_fingerprint_}}.dump(2) + "\n");
  }

  RegistryManifest m;
  if (auto text = storage_->read(kManifestKey)) m = decode_manifest(*text);
  manifest_ = std::make_shared<const RegistryManifest>(std::move(m));

  for (const auto& key : storage_->list("models/")) {
    if (key.size() < 12 || key.compare(key.size() - 12, 12, "/record.json") != 0) continue;
    ModelRecord r;
    try {
      r = record_from_json(json::parse(*storage_->read(key)));
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kFormat, "bad record " + key + ": " + e.what());
    }
    // The manifest is the commit point: a record written just before a
    // crash is not explained until the manifest says so.
    if (r.explained && manifest_->find(r.model_id) == nullptr) {
      r.explained = false;
      r.shift.reset();
      r.report.reset();
      r.candidates_examined = 0;
    }
    records_.emplace(r.model_id, std::move(r));
  }
}

std::string Registry::register_model(const RegistrationRequest& request) {
  require(!request.artifact_uri.empty(), ErrorCode::kInvalidArgument, "artifact_uri is required");
  std::string bytes;
  try {
    bytes = read_file_bytes(request.artifact_uri);
  } catch (const Error& e) {
    fail(ErrorCode::kIo, "artifact unreadable: " + std::string(e.what()));
  }
  return register_model_bytes(request, bytes);
}

std::string Registry::register_model_bytes(const RegistrationRequest& request, std::string_view bytes) {
  std::lock_guard reg(register_mu_);
  try {
    decode_snapshot(bytes);
  } catch (const Error& e) {
    fail(e.code(), "artifact unreadable: " + std::string(e.what()));
  }
  require(!request.base_model_fingerprint.empty(), ErrorCode::kInvalidArgument,
          "base_model_fingerprint is required");
  if (base_fingerprint_.empty()) {
    base_fingerprint_ = request.base_model_fingerprint;
    storage_->write(kConfigKey, json{{"base_model_fingerprint", base_fingerprint_}}.dump(2) + "\n");
  } else if (request.base_model_fingerprint != base_fingerprint_) {
    fail(ErrorCode::kMismatch, "model was fine-tuned from base " + request.base_model_fingerprint +
                                   ", registry serves base " + base_fingerprint_);
  }

  ModelRecord r;
  {
    std::shared_lock lock(state_mu_);
    std::size_t next = 1;
    for (const auto& [id, rec] : records_) {
      if (id.size() > 1 && id[0] == 'm') next = std::max<std::size_t>(next, std::stoul(id.substr(1)) + 1);
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "m%04zu", next);
    r.model_id = buf;
  }
  r.display_name = request.display_name.empty() ? r.model_id : request.display_name;
  r.artifact_uri = request.artifact_uri;
  r.base_model_fingerprint = request.base_model_fingerprint;
  r.artifact_bytes = bytes.size();
  r.artifact_sha256 = sha256_hex(bytes);
  r.created_at = now_seconds();

  storage_->write(snapshot_key(r.model_id), bytes);
  persist_record(r);
  std::unique_lock lock(state_mu_);
  const auto id = r.model_id;
  records_.emplace(id, std::move(r));
  return id;
}

std::shared_ptr<const RegistryManifest> Registry::manifest() const {
  std::shared_lock lock(state_mu_);
  return manifest_;
}

std::vector<ModelRecord> Registry::records() const {
  std::shared_lock lock(state_mu_);
  std::vector<ModelRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  return out;
}

std::optional<ModelRecord> Registry::record(const std::string& model_id) const {
  std::shared_lock lock(state_mu_);
  auto it = records_.find(model_id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::string Registry::artifact_bytes(const std::string& model_id) const {
  if (!record(model_id)) fail(ErrorCode::kNotFound, "unknown model '" + model_id + "'");
  auto bytes = storage_->read(snapshot_key(model_id));
  if (!bytes) fail(ErrorCode::kNotFound, "artifact of '" + model_id + "' is missing");
  return *bytes;
}

ArtifactRef Registry::artifact(const std::string& model_id) const {
  ArtifactRef ref;
  ref.model_id = model_id;
  ref.bytes = artifact_bytes(model_id);
  ref.path = storage_->path_of(snapshot_key(model_id));
  return ref;
}

bool Registry::job_running() const { return job_running_.load(); }

void Registry::persist_record(const ModelRecord& r) {
  storage_->write(record_key(r.model_id), record_to_json(r).dump(2) + "\n");
}

void Registry::commit_manifest(RegistryManifest next) {
  next.validate();
  storage_->write(kManifestKey, encode_manifest(next));
  auto snapshot = std::make_shared<const RegistryManifest>(std::move(next));
  std::unique_lock lock(state_mu_);
  manifest_ = std::move(snapshot);
}

RegistryManifest Registry::rebuild(const RegistryManifest& header, const StyleBasis& basis) const {
  RegistryManifest m = header;
  m.basis.clear();
  m.models.clear();
  m.basis_fingerprint = basis.fingerprint();
  for (std::size_t i = 0; i < basis.size(); ++i) {
    const auto& sub = basis[i];
    m.basis.push_back({i, sub.word, std::vector<double>(sub.direction.values().begin(), sub.direction.values().end()),
                       sub.source_probability});
  }
  std::shared_lock lock(state_mu_);
  for (const auto& [id, r] : records_) {
    if (!r.explained || !r.shift) continue;
    const auto rep = decompose(*r.shift, basis);
    m.models.push_back({id, r.display_name, rep.coordinate, rep.residual_norm, r.shift->norm(), rep.satisfied,
                        "models/" + id + "/artifact", r.artifact_bytes, r.artifact_sha256});
  }
  return m;
}

ExplainResult Registry::explain_all(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                                    const GeneratorFactory& generators, const probe::PromptSet& prompts,
                                    const ExplainOptions& options) {
  bool expected = false;
  if (!job_running_.compare_exchange_strong(expected, true)) {
    fail(ErrorCode::kConflict, "an explanation job is already running");
  }
  JobGuard guard{job_running_};
  options.basis.validate();
  require(static_cast<bool>(generators), ErrorCode::kInvalidArgument, "explain_all needs a generator factory");

  ExplainResult result;
  const auto current = manifest();
  RegistryManifest header = *current;
  header.summarizer_fingerprint = summarizer.fingerprint();
  header.instruction_template_hash = probe::instruction_template_hash();
  header.ortho_threshold = options.basis.ortho_threshold;
  header.epsilon_fraction = options.basis.epsilon_fraction;
  header.prompt_set_id = prompts.id;
  header.dim = summarizer.embedding_dim();

  const bool fresh = current->dim == 0 && current->models.empty() && current->basis.empty();
  StyleBasis basis(header.dim, header.ortho_threshold, header.epsilon_fraction);
  if (!fresh && !same_header(*current, header)) {
    // Vectors from different summarizers or templates are never mixed.
    result.basis_reset = true;
    std::vector<ModelRecord> touched;
    {
      std::unique_lock lock(state_mu_);
      for (auto& [id, r] : records_) {
        if (!r.explained && !r.shift) continue;
        r.explained = false;
        r.shift.reset();
        r.report.reset();
        r.candidates_examined = 0;
        touched.push_back(r);
      }
    }
    for (const auto& r : touched) persist_record(r);
    header.version = current->version + 1;
    commit_manifest(rebuild(header, basis));
  } else if (!fresh) {
    basis = current->to_basis();
  }

  std::vector<ModelRecord> pending;
  {
    std::shared_lock lock(state_mu_);
    for (const auto& [id, r] : records_) {
      if (!r.explained) pending.push_back(r);
    }
  }
  if (pending.empty()) {
    result.manifest = *manifest();
    return result;
  }

  const auto base = probe::base_responses(base_gen, prompts);
  const std::string cache_prefix = summarizer.fingerprint() + "\n" + prompts.id + "\n";
  WordToVector word_to_vector = [&](const std::string& word) {
    if (options.cache) {
      if (auto hit = options.cache->find(cache_prefix + word)) return *hit;
    }
    auto sub = probe::word_to_subvector(summarizer, word, prompts.prompts, base);
    if (options.cache) options.cache->store(cache_prefix + word, sub);
    return sub;
  };

  std::size_t committed = 0;
  for (auto& r : pending) {
    ExtendResult step{basis, {}, 0, 0, {}};
    EmbeddingVector shift = EmbeddingVector::zeros(header.dim);
    try {
      auto gen = generators(r, artifact(r.model_id));
      require(gen != nullptr, ErrorCode::kBackend, "no generator session");
      const auto pairs = probe::probe_model(base, *gen, prompts);
      shift = probe::extract_shift_embedding(summarizer, pairs);
      const auto candidates = probe::candidate_words(summarizer, shift, options.basis.candidate_cap);
      step = extend_basis_for_model(shift, basis, candidates, word_to_vector, options.basis.candidate_cap);
    } catch (const Error& e) {
      fail(e.code(), "explaining " + r.model_id + ": " + e.what());
    }

    for (std::size_t i = basis.size(); i < step.basis.size(); ++i) {
      storage_->write(basis_key(i), encode_basis_vector(step.basis[i].direction.values()));
    }
    r.explained = true;
    r.shift = shift;
    r.report = step.report;
    r.candidates_examined = step.candidates_examined;
    persist_record(r);
    {
      std::unique_lock lock(state_mu_);
      records_[r.model_id] = r;
    }
    basis = std::move(step.basis);
    header.version = manifest()->version + 1;
    commit_manifest(rebuild(header, basis));
    result.explained.push_back({r.model_id, step.candidates_examined, step.members_added, step.report.satisfied});
    ++committed;
    if (options.after_commit) options.after_commit(r.model_id, committed);
  }
  result.manifest = *manifest();
  return result;
}

Explanation Registry::render_explanation(const std::string& model_id) const {
  const auto m = manifest();
  const auto* entry = m->find(model_id);
  if (entry == nullptr) {
    if (record(model_id)) fail(ErrorCode::kInvalidArgument, "model '" + model_id + "' is not explained yet");
    fail(ErrorCode::kNotFound, "unknown model '" + model_id + "'");
  }
  Explanation e;
  e.model_id = model_id;
  for (const auto& [index, value] : entry->coordinate.entries) {
    if (value != 0.0) e.terms.push_back({m->basis.at(index).word, value});
  }
  std::stable_sort(e.terms.begin(), e.terms.end(), [](const auto& a, const auto& b) {
    return std::abs(a.coefficient) > std::abs(b.coefficient);
  });
  e.residual_fraction = entry->shift_norm > 0.0 ? std::min(1.0, entry->residual_norm / entry->shift_norm) : 0.0;
  return e;
}

}  // namespace xpert::registry
