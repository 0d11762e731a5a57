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

#include <gtest/gtest.h>
#include <httplib.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <thread>

#include "support/oracles.hpp"
#include "support/test_util.hpp"
#include "xpert/server.hpp"
#include "xpert/simharness.hpp"
#include "xpert/stub_backend.hpp"

namespace xpert::registry {
namespace {

using testutil::code_of;
using testutil::TempDir;

constexpr std::uint64_t kSeed = 7;
constexpr std::size_t kStyles = 4;
constexpr std::size_t kDim = 16;
constexpr double kNoise = 0.1;

struct Fixture {
  std::shared_ptr<const sim::StyleWorld> world =
      std::make_shared<const sim::StyleWorld>(sim::generate_world(kSeed, kStyles, kDim, kNoise));
  TensorSnapshot base = sim::base_snapshot(*world);
  probe::PromptSet prompts = sim::synthetic_prompts(20);

  // Model i leans on style i % kStyles with a little of the next style.
  std::string artifact(std::size_t i) const {
    std::vector<double> w(kStyles, 0.0);
    w[i % kStyles] = 1.0;
    w[(i + 1) % kStyles] = 0.3 * static_cast<double>(i / kStyles);
    return encode_snapshot(sim::personalized_snapshot(*world, base, w, 100 + i));
  }

  std::vector<std::string> register_all(Registry& r, std::size_t n) const {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back(r.register_model_bytes({"model-" + std::to_string(i), "mem://" + std::to_string(i),
                                            base.fingerprint()},
                                           artifact(i)));
    }
    return ids;
  }

  ExplainResult explain(Registry& r, const ExplainOptions& options = {}) const {
    auto summarizer = sim::connect_stub(world);
    return r.explain_all(*summarizer, *summarizer, sim::stub_generators(world), prompts, options);
  }
};

std::string manifest_bytes(const TempDir& dir) { return read_file_bytes(dir / "manifest.json"); }

TEST(Registry, ExplainsEveryModelInOrder) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  const auto ids = f.register_all(r, 6);
  EXPECT_EQ(ids.front(), "m0001");
  const auto result = f.explain(r);
  ASSERT_EQ(result.explained.size(), 6u);
  for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(result.explained[i].model_id, ids[i]);
  const auto& m = result.manifest;
  EXPECT_EQ(m.version, 6);
  EXPECT_EQ(m.models.size(), 6u);
  EXPECT_NO_THROW(m.validate());
  for (std::size_t i = 0; i < m.basis.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_LE(std::abs(oracle::dot(m.basis[i].vector, m.basis[j].vector)), 0.1);
    }
  }
  // The dominant term names the planted style.
  const auto e = r.render_explanation(ids[1]);
  ASSERT_FALSE(e.terms.empty());
  EXPECT_EQ(e.terms.front().word, f.world->styles[1].word);
  EXPECT_NE(format_explanation(e).find(f.world->styles[1].word), std::string::npos);
}

TEST(Registry, SecondRunIsNoOp) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  f.register_all(r, 3);
  const auto first = f.explain(r);
  const auto second = f.explain(r);
  EXPECT_TRUE(second.explained.empty());
  EXPECT_EQ(encode_manifest(first.manifest), encode_manifest(second.manifest));
}

TEST(Registry, IncrementalRegistrationKeepsExistingBasis) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  f.register_all(r, 2);
  const auto first = f.explain(r);
  f.register_all(r, 3);
  const auto second = f.explain(r);
  ASSERT_GE(second.manifest.basis.size(), first.manifest.basis.size());
  for (std::size_t i = 0; i < first.manifest.basis.size(); ++i) {
    EXPECT_EQ(second.manifest.basis[i].word, first.manifest.basis[i].word);
    EXPECT_EQ(second.manifest.basis[i].vector, first.manifest.basis[i].vector);
  }
  EXPECT_EQ(second.explained.size(), 3u);
}

TEST(Registry, RegistrationErrors) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>(), f.base.fingerprint());
  EXPECT_EQ(code_of([&] { r.register_model_bytes({"x", "mem://x", "other-base"}, f.artifact(0)); }),
            ErrorCode::kMismatch);
  EXPECT_EQ(code_of([&] { r.register_model_bytes({"x", "mem://x", f.base.fingerprint()}, "junk"); }),
            ErrorCode::kFormat);
  EXPECT_EQ(code_of([&] { r.register_model({"x", "/nonexistent/file", f.base.fingerprint()}); }),
            ErrorCode::kIo);
  EXPECT_TRUE(r.records().empty());
  EXPECT_EQ(code_of([&] { r.render_explanation("m0042"); }), ErrorCode::kNotFound);
  const auto id = f.register_all(r, 1).front();
  EXPECT_EQ(code_of([&] { r.render_explanation(id); }), ErrorCode::kInvalidArgument);
}

TEST(Registry, ChangedPromptsResetTheBasis) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  f.register_all(r, 3);
  const auto first = f.explain(r);
  f.prompts = sim::synthetic_prompts(25);
  const auto second = f.explain(r);
  EXPECT_TRUE(second.basis_reset);
  EXPECT_EQ(second.explained.size(), 3u);
  EXPECT_EQ(second.manifest.prompt_set_id, f.prompts.id);
  EXPECT_GT(second.manifest.version, first.manifest.version);
}

TEST(Registry, ConcurrentJobIsRejected) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  f.register_all(r, 2);
  ErrorCode inner = ErrorCode::kInvalidArgument;
  ExplainOptions options;
  options.after_commit = [&](const std::string&, std::size_t committed) {
    if (committed == 1) inner = code_of([&] { f.explain(r); });
  };
  f.explain(r, options);
  EXPECT_EQ(inner, ErrorCode::kConflict);
  EXPECT_FALSE(r.job_running());
}

TEST(Registry, FailureNamesModelAndKeepsEarlierCommits) {
  Fixture f;
  Registry r(std::make_unique<MemoryStorage>());
  const auto ids = f.register_all(r, 3);
  const auto good = sim::stub_generators(f.world);
  GeneratorFactory flaky = [&](const ModelRecord& rec, const ArtifactRef& a) {
    if (rec.model_id == ids[1]) fail(ErrorCode::kBackend, "generator crashed");
    return good(rec, a);
  };
  auto summarizer = sim::connect_stub(f.world);
  try {
    r.explain_all(*summarizer, *summarizer, flaky, f.prompts);
    ADD_FAILURE() << "expected failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBackend);
    EXPECT_NE(std::string(e.what()).find(ids[1]), std::string::npos);
  }
  EXPECT_EQ(r.manifest()->models.size(), 1u);
  EXPECT_FALSE(r.job_running());
  // A later run picks up where the failed one stopped.
  EXPECT_EQ(f.explain(r).explained.size(), 2u);
}

TEST(Registry, StateSurvivesReopen) {
  Fixture f;
  TempDir dir;
  std::string before;
  {
    auto r = Registry::open_directory(dir.path());
    f.register_all(*r, 3);
    f.explain(*r);
    before = encode_manifest(*r->manifest());
  }
  auto r = Registry::open_directory(dir.path());
  EXPECT_EQ(r->base_model_fingerprint(), f.base.fingerprint());
  EXPECT_EQ(encode_manifest(*r->manifest()), before);
  EXPECT_EQ(manifest_bytes(dir), before);
  EXPECT_EQ(r->records().size(), 3u);
  EXPECT_EQ(r->artifact_bytes("m0002"), f.artifact(1));
  EXPECT_TRUE(std::filesystem::exists(dir / "basis/000.vec"));
}

// Runs the job in a child that dies right after its `kill_after`-th commit.
void explain_until_killed(const Fixture& f, const TempDir& dir, std::size_t kill_after) {
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    auto r = Registry::open_directory(dir.path());
    ExplainOptions options;
    options.after_commit = [&](const std::string&, std::size_t committed) {
      if (committed == kill_after) ::_exit(0);
    };
    try {
      f.explain(*r, options);
    } catch (...) {
      ::_exit(3);
    }
    ::_exit(4);  // never reached the kill point
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  ASSERT_EQ(WEXITSTATUS(status), 0);
}

TEST(Registry, KilledJobResumesToIdenticalManifest) {
  Fixture f;
  constexpr std::size_t kModels = 5;
  TempDir reference;
  {
    auto r = Registry::open_directory(reference.path());
    f.register_all(*r, kModels);
    f.explain(*r);
  }
  const auto expected = manifest_bytes(reference);

  for (std::size_t k = 1; k < kModels; ++k) {
    TempDir dir;
    {
      auto r = Registry::open_directory(dir.path());
      f.register_all(*r, kModels);
    }
    explain_until_killed(f, dir, k);
    auto r = Registry::open_directory(dir.path());
    EXPECT_EQ(r->manifest()->models.size(), k);
    const auto resumed = f.explain(*r);
    EXPECT_EQ(resumed.explained.size(), kModels - k);
    EXPECT_EQ(manifest_bytes(dir), expected) << "killed after commit " << k;
  }
}

// HTTP front end backed by the CLI's stub backend.
std::string stub_command(const std::string& extra = {}) {
  return std::string("cmd:") + XPERT_CLI_PATH + " --seed " + std::to_string(kSeed) + " stub-backend --styles " +
         std::to_string(kStyles) + " --dim " + std::to_string(kDim) + " --noise 0.1" + extra;
}

ServerConfig server_config(const Fixture& f) {
  ServerConfig c;
  c.summarizer = stub_command();
  c.generator_template = stub_command(" --snapshot {snapshot}");
  c.prompts = f.prompts;
  return c;
}

nlohmann::json wait_for_job(httplib::Client& cli, std::int64_t id) {
  for (int i = 0; i < 600; ++i) {
    auto res = cli.Get("/jobs/" + std::to_string(id));
    if (res && res->status == 200) {
      auto j = nlohmann::json::parse(res->body);
      if (j["status"] != "running") return j;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  return {};
}

TEST(Server, RegisterExplainAndFetch) {
  Fixture f;
  TempDir dir;
  for (std::size_t i = 0; i < 3; ++i) write_file_atomic(dir / ("a" + std::to_string(i) + ".snap"), f.artifact(i));
  auto reg = Registry::open_directory(dir / "registry");
  RegistryServer server(*reg, server_config(f));
  const auto port = server.start();
  httplib::Client cli("127.0.0.1", port);

  for (std::size_t i = 0; i < 3; ++i) {
    const nlohmann::json body{{"display_name", "m" + std::to_string(i)},
                              {"artifact_uri", (dir / ("a" + std::to_string(i) + ".snap")).string()},
                              {"base_model_fingerprint", f.base.fingerprint()}};
    auto res = cli.Post("/models", body.dump(), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 201);
  }
  auto bad = cli.Post("/models", R"({"artifact_uri":"/nope","base_model_fingerprint":"x"})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);

  auto started = cli.Post("/explain", "", "application/json");
  ASSERT_TRUE(started);
  ASSERT_EQ(started->status, 202);
  const auto job = wait_for_job(cli, nlohmann::json::parse(started->body)["job_id"]);
  ASSERT_FALSE(job.is_null());
  EXPECT_EQ(job["status"], "succeeded") << job.dump();
  EXPECT_EQ(job["explained"], 3);

  auto manifest = cli.Get("/manifest");
  ASSERT_TRUE(manifest);
  const auto m = decode_manifest(manifest->body);
  EXPECT_EQ(m.models.size(), 3u);

  auto models = cli.Get("/models");
  ASSERT_TRUE(models);
  EXPECT_EQ(nlohmann::json::parse(models->body).size(), 3u);

  auto art = cli.Get("/models/m0001/artifact");
  ASSERT_TRUE(art);
  EXPECT_EQ(art->body, f.artifact(0));
  EXPECT_EQ(art->get_header_value("X-Artifact-SHA256"), m.find("m0001")->artifact_sha256);

  auto part = cli.Get("/models/m0001/artifact", {{"Range", "bytes=10-19"}});
  ASSERT_TRUE(part);
  EXPECT_EQ(part->status, 206);
  EXPECT_EQ(part->body, f.artifact(0).substr(10, 10));

  auto missing = cli.Get("/models/m0099/artifact");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  auto no_job = cli.Get("/jobs/77");
  ASSERT_TRUE(no_job);
  EXPECT_EQ(no_job->status, 404);
  server.stop();
}

TEST(Server, RunningJobGivesConflict) {
  Fixture f;
  Registry reg(std::make_unique<MemoryStorage>());
  f.register_all(reg, 2);
  RegistryServer server(reg, server_config(f));
  const auto port = server.start();
  httplib::Client cli("127.0.0.1", port);
  int status = 0;
  ExplainOptions options;
  options.after_commit = [&](const std::string&, std::size_t committed) {
    if (committed != 1) return;
    auto res = cli.Post("/explain", "", "application/json");
    status = res ? res->status : -1;
  };
  f.explain(reg, options);
  EXPECT_EQ(status, 409);
  server.stop();
}

TEST(Server, UnreachableBackendGives503) {
  Fixture f;
  Registry reg(std::make_unique<MemoryStorage>());
  f.register_all(reg, 1);
  auto config = server_config(f);
  config.summarizer = "tcp:127.0.0.1:1";
  RegistryServer server(reg, config);
  const auto port = server.start();
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Post("/explain", "", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 503);
  EXPECT_EQ(nlohmann::json::parse(res->body)["error"]["code"], "unavailable");
  server.stop();
}

}  // namespace
}  // namespace xpert::registry
