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

// HTTP front end of the registry.
//
//   GET  /manifest               current manifest snapshot
//   GET  /models                 registration records
//   GET  /models/{id}/artifact   snapshot bytes; Range requests honored
//   POST /models                 {display_name, artifact_uri, base_model_fingerprint}
//   POST /explain                starts an explanation job, returns {job_id}
//   GET  /jobs/{id}              job status

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "xpert/probe.hpp"
#include "xpert/registry.hpp"

namespace xpert::registry {

// Spawns one generator per model from a descriptor template such as
// "cmd:xpert stub-backend --snapshot {snapshot}"; {snapshot} is replaced by
// the artifact's path in registry storage.
GeneratorFactory command_generator_factory(std::string descriptor_template);

struct ServerConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::string summarizer;  // backend descriptor
  std::string base_generator;  // defaults to the summarizer
  std::string generator_template;
  probe::PromptSet prompts;
  BasisConfig basis;
};

class RegistryServer {
 public:
  RegistryServer(Registry& registry, ServerConfig config);
  ~RegistryServer();
  RegistryServer(const RegistryServer&) = delete;
  RegistryServer& operator=(const RegistryServer&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  std::uint16_t start();
  // Binds and serves on the calling thread until stop().
  void run(const std::function<void(std::uint16_t)>& on_listening = {});
  void stop();

 private:
  struct Job;
  struct Impl;

  Registry& registry_;
  ServerConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace xpert::registry
