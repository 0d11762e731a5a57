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

// Server-side catalog of personalized models and the explanation job that
// places them in a shared style basis.
//
// Directory layout:
//   registry.json              configured base model fingerprint
//   manifest.json              published snapshot; the commit point of a job
//   basis/NNN.vec              one binary vector per basis member
//   models/{id}/record.json    registration data, status, shift embedding
//   models/{id}/snapshot.bin   copy of the uploaded artifact

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "xpert/manifest.hpp"
#include "xpert/probe.hpp"
#include "xpert/protocol.hpp"
#include "xpert/vectorspace.hpp"

namespace xpert::registry {

// Key-value persistence. Keys are relative paths with '/' separators.
class Storage {
 public:
  virtual ~Storage() = default;
  virtual std::optional<std::string> read(const std::string& key) const = 0;
  // Atomic: readers see the old or the new value, never a mix.
  virtual void write(const std::string& key, std::string_view bytes) = 0;
  virtual std::vector<std::string> list(const std::string& prefix) const = 0;
  // Filesystem location of a key, when the storage has one.
  virtual std::optional<std::filesystem::path> path_of(const std::string& key) const = 0;
};

class DirectoryStorage : public Storage {
 public:
  explicit DirectoryStorage(std::filesystem::path root);
  std::optional<std::string> read(const std::string& key) const override;
  void write(const std::string& key, std::string_view bytes) override;
  std::vector<std::string> list(const std::string& prefix) const override;
  std::optional<std::filesystem::path> path_of(const std::string& key) const override;

 private:
  std::filesystem::path root_;
};

class MemoryStorage : public Storage {
 public:
  std::optional<std::string> read(const std::string& key) const override;
  void write(const std::string& key, std::string_view bytes) override;
  std::vector<std::string> list(const std::string& prefix) const override;
  std::optional<std::filesystem::path> path_of(const std::string&) const override { return std::nullopt; }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::string> data_;
};

struct ModelRecord {
  std::string model_id;
  std::string display_name;
  std::string artifact_uri;  // where it was uploaded from
  std::string base_model_fingerprint;
  std::uint64_t artifact_bytes = 0;
  std::string artifact_sha256;
  std::int64_t created_at = 0;  // unix seconds
  bool explained = false;
  std::optional<EmbeddingVector> shift;
  // Report at the moment the model was processed by the basis construction.
  std::optional<DecompositionReport> report;
  std::size_t candidates_examined = 0;
};

struct RegistrationRequest {
  std::string display_name;
  std::string artifact_uri;
  std::string base_model_fingerprint;
};

struct Explanation {
  struct Term {
    std::string word;
    double coefficient = 0.0;
  };
  std::string model_id;
  std::vector<Term> terms;
  double residual_fraction = 0.0;
};

// "word (weight), ..." over the top `k` terms.
std::string format_explanation(const Explanation& e, std::size_t k = 5);

struct ArtifactRef {
  std::string model_id;
  std::optional<std::filesystem::path> path;
  std::string bytes;
};

// Opens a generator session speaking for one registered model.
using GeneratorFactory =
    std::function<std::unique_ptr<proto::BackendSession>(const ModelRecord&, const ArtifactRef&)>;

// Sub-vectors depend only on the summarizer, the prompts and the word, so
// they can be shared across explanation runs that agree on those.
class WordVectorCache {
 public:
  std::optional<SubVector> find(const std::string& key) const;
  void store(const std::string& key, const SubVector& sub);
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, SubVector> entries_;
};

struct ExplainOptions {
  BasisConfig basis;
  // Called after each model's results are committed; tests use it to kill
  // the process mid-job.
  std::function<void(const std::string& model_id, std::size_t committed)> after_commit;
  WordVectorCache* cache = nullptr;
};

struct ExplainedModel {
  std::string model_id;
  std::size_t candidates_examined = 0;
  std::size_t members_added = 0;
  bool satisfied = false;
};

struct ExplainResult {
  RegistryManifest manifest;
  std::vector<ExplainedModel> explained;
  bool basis_reset = false;
};

class Registry {
 public:
  // Loads persisted state. An empty `base_model_fingerprint` adopts the base
  // of the first registration.
  Registry(std::unique_ptr<Storage> storage, std::string base_model_fingerprint = {});

  static std::unique_ptr<Registry> open_directory(const std::filesystem::path& root,
                                                  std::string base_model_fingerprint = {});

  // Reads the artifact from the filesystem path in `artifact_uri`.
  std::string register_model(const RegistrationRequest& request);
  // Registers artifact bytes already in memory.
  std::string register_model_bytes(const RegistrationRequest& request, std::string_view bytes);

  std::shared_ptr<const RegistryManifest> manifest() const;
  std::vector<ModelRecord> records() const;
  std::optional<ModelRecord> record(const std::string& model_id) const;
  std::string artifact_bytes(const std::string& model_id) const;
  ArtifactRef artifact(const std::string& model_id) const;
  const std::string& base_model_fingerprint() const { return base_fingerprint_; }

  // Explains every unexplained model in registration order and commits after
  // each one. Throws kConflict when another job is running. A failure leaves
  // earlier commits intact and names the failing model.
  ExplainResult explain_all(proto::BackendSession& summarizer, proto::BackendSession& base_gen,
                            const GeneratorFactory& generators, const probe::PromptSet& prompts,
                            const ExplainOptions& options = {});

  bool job_running() const;

  // Throws kNotFound for unknown ids and kInvalidArgument for unexplained ones.
  Explanation render_explanation(const std::string& model_id) const;

 private:
  void load();
  void persist_record(const ModelRecord& r);
  void commit_manifest(RegistryManifest next);
  RegistryManifest rebuild(const RegistryManifest& header, const StyleBasis& basis) const;

  std::unique_ptr<Storage> storage_;
  std::string base_fingerprint_;
  mutable std::shared_mutex state_mu_;
  std::shared_ptr<const RegistryManifest> manifest_;
  std::map<std::string, ModelRecord> records_;
  std::mutex register_mu_;
  std::atomic<bool> job_running_{false};
};

}  // namespace xpert::registry
