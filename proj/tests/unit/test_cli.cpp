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

// Drives the xpert executable as a subprocess.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "support/test_util.hpp"
#include "xpert/merge.hpp"
#include "xpert/snapshot.hpp"

namespace xpert {
namespace {

using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  Outcome run(const std::string& args, const std::string& env = {}) {
    const auto out = dir_ / "stdout", err = dir_ / "stderr";
    const std::string cmd = "cd '" + dir_.path().string() + "' && " + env + " '" + XPERT_CLI_PATH + "' " + args +
                            " </dev/null >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  json last_json(const Outcome& r) {
    std::istringstream in(r.out);
    std::string line, last;
    while (std::getline(in, line)) {
      if (!line.empty()) last = line;
    }
    return json::parse(last);
  }

  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  testutil::TempDir dir_;
};

constexpr const char* kWorld = "--styles 4 --dim 16 --noise 0.1";

std::string backend() { return std::string("cmd:") + XPERT_CLI_PATH + " stub-backend " + kWorld; }

TEST_F(Cli, HelpMatchesGolden) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, slurp(std::string(XPERT_GOLDEN_DIR) + "/cli_help.txt"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("--no-such-flag stub-generate").code, 2);
  EXPECT_EQ(run("--metric cosine stub-generate").code, 2);
  EXPECT_EQ(run("sim accuracy --similarities 0.5,x").code, 2);
  EXPECT_EQ(run("explain").code, 2);  // no --registry-dir
}

TEST_F(Cli, DomainErrorsExitOneWithJson) {
  std::ofstream(path("plan.json")) << "not json";
  ASSERT_EQ(run(std::string("stub-snapshot ") + kWorld + " --out base.snap").code, 0);
  const auto r = run("merge --base base.snap --plan plan.json --out m.snap");
  EXPECT_EQ(r.code, 1);
  const auto err = json::parse(r.err);
  EXPECT_EQ(err["error"]["code"], "format");
}

TEST_F(Cli, ConfigFileAndEnvironment) {
  std::ofstream(path("xpert.ini")) << "seed = 11\n";
  std::ofstream(path("bad.ini")) << "sed = 11\n";
  const std::string gen = std::string("stub-snapshot ") + kWorld + " --out s.snap";
  const auto from_env = last_json(run(gen, "XPERT_CONFIG=xpert.ini"));
  const auto from_flag = last_json(run("--config xpert.ini " + gen));
  const auto explicit_seed = last_json(run("--seed 11 " + gen));
  const auto default_seed = last_json(run(gen));
  EXPECT_EQ(from_env["fingerprint"], explicit_seed["fingerprint"]);
  EXPECT_EQ(from_flag["fingerprint"], explicit_seed["fingerprint"]);
  EXPECT_NE(default_seed["fingerprint"], explicit_seed["fingerprint"]);
  // Flags win over the file.
  EXPECT_EQ(last_json(run("--config xpert.ini --seed 7 " + gen))["fingerprint"], default_seed["fingerprint"]);
  EXPECT_EQ(run("--config bad.ini " + gen).code, 2);
}

TEST_F(Cli, SimulationOutputIsDeterministic) {
  const std::string args =
      "sim accuracy --styles 4 --dim 16 --models 4 --trials 3 --similarities 0.5,0.9 --prompt-count 10 "
      "--local-samples 10 --plotdata plot.csv";
  const auto a = run(args), b = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(json::parse(a.out.substr(0, a.out.find('\n')))["experiment"], "accuracy");
  EXPECT_EQ(slurp(path("plot.csv")).rfind("experiment,similarity,", 0), 0u);
}

TEST_F(Cli, RegisterExplainSelectPlanMerge) {
  const std::string snap = std::string("stub-snapshot ") + kWorld;
  ASSERT_EQ(run(snap + " --out base.snap").code, 0);
  ASSERT_EQ(run(snap + " --base base.snap --weights 1,0,0,0 --variant 1 --out a.snap").code, 0);
  ASSERT_EQ(run(snap + " --base base.snap --weights 0,1,0,0 --variant 2 --out b.snap").code, 0);
  ASSERT_EQ(run(snap + " --base base.snap --weights 0,0,1,0 --variant 3 --out c.snap").code, 0);
  for (const char* m : {"a", "b", "c"}) {
    const auto r = run(std::string("--registry-dir reg register --base base.snap --artifact ") + m + ".snap");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const std::string be = "--backend '" + backend() + "' ";
  const auto explained =
      run("--registry-dir reg " + be + "--generator-template '" + backend() + " --snapshot {snapshot}' explain");
  ASSERT_EQ(explained.code, 0) << explained.err;
  EXPECT_EQ(last_json(explained)["explained"].size(), 3u);

  const auto shown = run("--registry-dir reg show --model m0002");
  ASSERT_EQ(shown.code, 0);
  EXPECT_EQ(last_json(shown)["terms"][0]["word"], "casual");

  // Local data leaning on the third style selects the third model.
  ASSERT_EQ(run(snap + " --base base.snap --weights 0,0,1,0 --variant 9 --out local.snap").code, 0);
  auto gen = run(std::string("stub-generate ") + kWorld + " --snapshot local.snap --count 40");
  ASSERT_EQ(gen.code, 0);
  std::ofstream(path("local.txt")) << gen.out;
  const auto selected = run(be + "--local local.txt select --manifest reg/manifest.json --profile-out p.json");
  ASSERT_EQ(selected.code, 0) << selected.err;
  EXPECT_EQ(last_json(selected)["model_id"], "m0003");
  EXPECT_TRUE(std::filesystem::exists(path("p.json")));

  // An even mixture of the first two styles needs a pair.
  ASSERT_EQ(run(snap + " --base base.snap --weights 0.5,0.5,0,0 --variant 10 --out mix.snap").code, 0);
  gen = run(std::string("stub-generate ") + kWorld + " --snapshot mix.snap --count 40");
  std::ofstream(path("mix.txt")) << gen.out;
  const auto planned = run(be + "--local mix.txt plan --manifest reg/manifest.json --out plan.json");
  ASSERT_EQ(planned.code, 0) << planned.err;
  const auto plan = last_json(planned);
  EXPECT_TRUE(plan["feasible"].get<bool>());
  ASSERT_EQ(plan["members"].size(), 2u);
  EXPECT_EQ(plan["members"][0]["model_id"], "m0001");
  EXPECT_EQ(plan["members"][1]["model_id"], "m0002");

  const auto merged = run("--registry-dir reg merge --base base.snap --plan plan.json --out merged.snap");
  ASSERT_EQ(merged.code, 0) << merged.err;
  // Same merge done in-process.
  const auto base = read_snapshot(path("base.snap"));
  const auto ta = task_vector(base, read_snapshot(path("a.snap")));
  const auto tb = task_vector(base, read_snapshot(path("b.snap")));
  const std::vector<WeightedTaskVector> w{{&ta, plan["members"][0]["alpha"].get<double>()},
                                          {&tb, plan["members"][1]["alpha"].get<double>()}};
  EXPECT_EQ(read_snapshot(path("merged.snap")).fingerprint(), merge(base, w).fingerprint());
}

}  // namespace
}  // namespace xpert
