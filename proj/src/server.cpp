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

#include "xpert/server.hpp"

#include <httplib.h>

#include <atomic>
#include <nlohmann/json.hpp>

#include "xpert/error.hpp"

namespace xpert::registry {

using nlohmann::json;

GeneratorFactory command_generator_factory(std::string descriptor_template) {
  require(!descriptor_template.empty(), ErrorCode::kInvalidArgument, "generator template is empty");
  return [tmpl = std::move(descriptor_template)](const ModelRecord& record, const ArtifactRef& artifact) {
    if (!artifact.path) {
      fail(ErrorCode::kInvalidArgument, "model '" + record.model_id + "' has no artifact path for the generator");
    }
    std::string descriptor = tmpl;
    const std::string slot = "{snapshot}";
    for (auto pos = descriptor.find(slot); pos != std::string::npos; pos = descriptor.find(slot, pos)) {
      descriptor.replace(pos, slot.size(), artifact.path->string());
      pos += artifact.path->string().size();
    }
    return std::make_unique<proto::BackendSession>(proto::open_channel(descriptor));
  };
}

struct RegistryServer::Job {
  std::string status = "running";
  std::string error;
  std::int64_t manifest_version = 0;
  std::size_t explained = 0;
};

struct RegistryServer::Impl {
  httplib::Server http;
  std::mutex jobs_mu;
  std::map<std::int64_t, Job> jobs;
  std::int64_t next_job = 1;
  std::thread worker;
  std::thread listener;
};

namespace {

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kConflict:
      return 409;
    case ErrorCode::kUnavailable:
    case ErrorCode::kBackend:
      return 503;
    default:
      return 400;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(2) + "\n", "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
  send_json(res, status, {{"error", {{"code", code}, {"message", message}}}});
}

json record_summary(const ModelRecord& r) {
  return {{"model_id", r.model_id},
          {"display_name", r.display_name},
          {"status", r.explained ? "explained" : "unexplained"},
          {"base_model_fingerprint", r.base_model_fingerprint},
          {"artifact_bytes", r.artifact_bytes},
          {"artifact_sha256", r.artifact_sha256},
          {"created_at", r.created_at}};
}

// Runs a handler, converting exceptions into error replies.
template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const Error& e) {
    send_error(res, status_for(e.code()), error_code_name(e.code()), e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

}  // namespace

RegistryServer::RegistryServer(Registry& registry, ServerConfig config)
    : registry_(registry), config_(std::move(config)), impl_(std::make_unique<Impl>()) {
  auto& http = impl_->http;

  http.Get("/manifest", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      const auto m = registry_.manifest();
      res.status = 200;
      res.set_content(encode_manifest(*m), "application/json");
    });
  });

  http.Get("/models", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      json out = json::array();
      for (const auto& r : registry_.records()) out.push_back(record_summary(r));
      send_json(res, 200, out);
    });
  });

  http.Get(R"(/models/([^/]+)/artifact)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      const auto record = registry_.record(id);
      if (!record) fail(ErrorCode::kNotFound, "unknown model '" + id + "'");
      res.set_header("X-Artifact-SHA256", record->artifact_sha256);
      // Status left unset so the HTTP layer applies any Range header (206/416).
      res.set_content(registry_.artifact_bytes(id), "application/octet-stream");
    });
  });

  http.Post("/models", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        fail(ErrorCode::kInvalidArgument, std::string("body is not JSON: ") + e.what());
      }
      RegistrationRequest r;
      r.display_name = body.value("display_name", "");
      r.artifact_uri = body.value("artifact_uri", "");
      r.base_model_fingerprint = body.value("base_model_fingerprint", "");
      const auto id = registry_.register_model(r);
      send_json(res, 201, {{"model_id", id}});
    });
  });

  http.Post("/explain", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      std::lock_guard lock(impl_->jobs_mu);
      if (registry_.job_running()) fail(ErrorCode::kConflict, "an explanation job is already running");
      for (const auto& [id, job] : impl_->jobs) {
        if (job.status == "running") fail(ErrorCode::kConflict, "an explanation job is already running");
      }
      require(!config_.summarizer.empty() && !config_.generator_template.empty(), ErrorCode::kInvalidArgument,
              "server was started without summarizer or generator backends");

      std::shared_ptr<proto::BackendSession> summarizer;
      std::shared_ptr<proto::BackendSession> base_gen;
      try {
        summarizer = std::make_shared<proto::BackendSession>(proto::open_channel(config_.summarizer));
        base_gen = config_.base_generator.empty()
                       ? summarizer
                       : std::make_shared<proto::BackendSession>(proto::open_channel(config_.base_generator));
      } catch (const Error& e) {
        fail(ErrorCode::kUnavailable, std::string("backend unreachable: ") + e.what());
      }

      if (impl_->worker.joinable()) impl_->worker.join();
      const auto job_id = impl_->next_job++;
      impl_->jobs[job_id] = Job{};
      impl_->worker = std::thread([this, job_id, summarizer, base_gen] {
        Job done;
        try {
          ExplainOptions options;
          options.basis = config_.basis;
          auto result = registry_.explain_all(*summarizer, *base_gen,
                                              command_generator_factory(config_.generator_template),
                                              config_.prompts, options);
          done.status = "succeeded";
          done.manifest_version = result.manifest.version;
          done.explained = result.explained.size();
        } catch (const std::exception& e) {
          done.status = "failed";
          done.error = e.what();
          done.manifest_version = registry_.manifest()->version;
        }
        std::lock_guard lock(impl_->jobs_mu);
        impl_->jobs[job_id] = done;
      });
      send_json(res, 202, {{"job_id", job_id}});
    });
  });

  http.Get(R"(/jobs/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto id = std::stoll(req.matches[1]);
      std::lock_guard lock(impl_->jobs_mu);
      auto it = impl_->jobs.find(id);
      if (it == impl_->jobs.end()) fail(ErrorCode::kNotFound, "unknown job " + std::to_string(id));
      json out = {{"job_id", id},
                  {"status", it->second.status},
                  {"manifest_version", it->second.manifest_version},
                  {"explained", it->second.explained}};
      if (!it->second.error.empty()) out["error"] = it->second.error;
      send_json(res, 200, out);
    });
  });
}

RegistryServer::~RegistryServer() {
  stop();
  if (impl_->listener.joinable()) impl_->listener.join();
  if (impl_->worker.joinable()) impl_->worker.join();
}

std::uint16_t RegistryServer::start() {
  int port = config_.port == 0 ? impl_->http.bind_to_any_port(config_.host)
                               : (impl_->http.bind_to_port(config_.host, config_.port) ? config_.port : -1);
  if (port <= 0) fail(ErrorCode::kIo, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
  impl_->listener = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return static_cast<std::uint16_t>(port);
}

void RegistryServer::run(const std::function<void(std::uint16_t)>& on_listening) {
  int port = config_.port == 0 ? impl_->http.bind_to_any_port(config_.host)
                               : (impl_->http.bind_to_port(config_.host, config_.port) ? config_.port : -1);
  if (port <= 0) fail(ErrorCode::kIo, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
  if (on_listening) on_listening(static_cast<std::uint16_t>(port));
  impl_->http.listen_after_bind();
}

void RegistryServer::stop() { impl_->http.stop(); }

}  // namespace xpert::registry
