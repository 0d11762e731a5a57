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

// xpert: command-line entry point for the registry, the device-side selector,
// merging, the stub backend and the simulation sweeps.

#include <CLI11.hpp>
#include <signal.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "xpert/error.hpp"
#include "xpert/manifest.hpp"
#include "xpert/merge.hpp"
#include "xpert/probe.hpp"
#include "xpert/protocol.hpp"
#include "xpert/registry.hpp"
#include "xpert/selector.hpp"
#include "xpert/server.hpp"
#include "xpert/simharness.hpp"
#include "xpert/snapshot.hpp"
#include "xpert/stub_backend.hpp"

namespace {

using nlohmann::json;
using namespace xpert;
using namespace xpert::sim;

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

// Bad flag combinations found after parsing; reported like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  std::string registry_dir;
  std::string backend;
  std::string base_backend;
  std::string generator_template;
  std::string prompts_file;
  std::string local_file;
  double ortho_threshold = 0.1;
  double epsilon_fraction = 0.2;
  std::string metric = "l1";
  double tau = 0.0;
  std::size_t k_max = 2;
  std::uint64_t seed = 7;
  bool timing = false;
};

struct WorldFlags {
  std::size_t styles = 16;
  std::size_t dim = 32;
  double noise = sim::kCalibratedNoise;
  bool identity_map = false;
};

void add_world_flags(CLI::App* app, WorldFlags& w) {
  app->add_option("--styles", w.styles, "Planted styles in the stub world")->capture_default_str()->check(
      CLI::Range(1, 4096));
  app->add_option("--dim", w.dim, "Stub embedding dimension")->capture_default_str()->check(CLI::Range(2, 4096));
  app->add_option("--noise", w.noise, "Stub shift-embedding noise scale")->capture_default_str()->check(
      CLI::NonNegativeNumber);
  app->add_flag("--identity-map", w.identity_map, "Use an identity word-vector map in the stub");
}

StyleWorld make_world(const Settings& s, const WorldFlags& w) {
  if (w.styles > w.dim) throw UsageError("--styles must not exceed --dim");
  return generate_world(s.seed, w.styles, w.dim, w.noise, w.identity_map);
}

BasisConfig basis_config(const Settings& s) {
  BasisConfig c;
  c.ortho_threshold = s.ortho_threshold;
  c.epsilon_fraction = s.epsilon_fraction;
  return c;
}

probe::PromptSet load_prompts(const Settings& s) {
  if (s.prompts_file.empty()) return sim::synthetic_prompts(probe::kDefaultProbeVolume);
  return probe::PromptSet::from_text(read_file_bytes(s.prompts_file), s.prompts_file);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> out;
  std::istringstream in(read_file_bytes(path));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void require_flag(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

std::unique_ptr<proto::BackendSession> open_backend(const std::string& descriptor) {
  return std::make_unique<proto::BackendSession>(proto::open_channel(descriptor));
}

void emit(const json& j) { std::cout << j.dump() << "\n" << std::flush; }

bool human_tables() { return isatty(STDERR_FILENO) == 1; }

std::vector<double> parse_doubles(const std::string& csv, const char* flag) {
  std::vector<double> out;
  std::stringstream in(csv);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError(std::string(flag) + " is empty");
  return out;
}

RegistryManifest load_manifest(const std::string& where) {
  if (where.rfind("http://", 0) == 0 || where.rfind("https://", 0) == 0) {
    return selector::fetch_manifest(where);
  }
  return decode_manifest(read_file_bytes(where));
}

// Registry base URL of a manifest location, if it is one.
std::optional<std::string> registry_url(const std::string& where) {
  if (where.rfind("http://", 0) != 0) return std::nullopt;
  auto url = where;
  const std::string suffix = "/manifest";
  if (url.size() > suffix.size() && url.compare(url.size() - suffix.size(), suffix.size(), suffix) == 0) {
    url.resize(url.size() - suffix.size());
  }
  return url;
}

selector::LocalProfile local_profile(const Settings& s, const RegistryManifest& manifest) {
  require_flag(s.backend, "--backend");
  require_flag(s.local_file, "--local");
  const auto prompts = load_prompts(s);
  const auto texts = read_lines(s.local_file);
  require(!texts.empty(), ErrorCode::kInvalidArgument, "local data file '" + s.local_file + "' has no samples");
  auto summarizer = open_backend(s.backend);
  std::unique_ptr<proto::BackendSession> base_gen;
  if (!s.base_backend.empty()) base_gen = open_backend(s.base_backend);
  return selector::compute_local_profile(*summarizer, base_gen ? *base_gen : *summarizer, texts, prompts, manifest);
}

std::unique_ptr<registry::Registry> open_registry(const Settings& s, bool must_exist) {
  require_flag(s.registry_dir, "--registry-dir");
  if (must_exist && !std::filesystem::is_directory(s.registry_dir)) {
    throw UsageError("--registry-dir: directory '" + s.registry_dir + "' does not exist");
  }
  return registry::Registry::open_directory(s.registry_dir);
}

// ---- subcommands ----

int cmd_register(const Settings& s, const std::string& artifact, const std::string& name,
                 const std::string& base_path, std::string base_fingerprint) {
  if (base_fingerprint.empty() && !base_path.empty()) base_fingerprint = read_snapshot(base_path).fingerprint();
  if (base_fingerprint.empty()) throw UsageError("one of --base or --base-fingerprint is required");
  auto reg = open_registry(s, false);
  const auto abs = std::filesystem::absolute(artifact).string();
  const auto id = reg->register_model({name, abs, base_fingerprint});
  const auto rec = reg->record(id);
  emit({{"model_id", id}, {"artifact_bytes", rec->artifact_bytes}, {"artifact_sha256", rec->artifact_sha256}});
  return kExitOk;
}

int cmd_explain(const Settings& s) {
  require_flag(s.backend, "--backend");
  require_flag(s.generator_template, "--generator-template");
  auto reg = open_registry(s, true);
  const auto prompts = load_prompts(s);
  auto summarizer = open_backend(s.backend);
  std::unique_ptr<proto::BackendSession> base_gen;
  if (!s.base_backend.empty()) base_gen = open_backend(s.base_backend);
  registry::ExplainOptions options;
  options.basis = basis_config(s);
  const auto result = reg->explain_all(*summarizer, base_gen ? *base_gen : *summarizer,
                                       registry::command_generator_factory(s.generator_template), prompts, options);
  json explained = json::array();
  for (const auto& e : result.explained) {
    explained.push_back({{"model_id", e.model_id},
                         {"candidates_examined", e.candidates_examined},
                         {"members_added", e.members_added},
                         {"satisfied", e.satisfied}});
  }
  json summaries = json::array();
  for (const auto& m : result.manifest.models) {
    summaries.push_back({{"model_id", m.model_id},
                         {"explanation", registry::format_explanation(reg->render_explanation(m.model_id))}});
  }
  emit({{"manifest_version", result.manifest.version},
        {"basis_size", result.manifest.basis.size()},
        {"basis_reset", result.basis_reset},
        {"explained", explained},
        {"explanations", summaries}});
  return kExitOk;
}

int cmd_show(const Settings& s, const std::string& model) {
  auto reg = open_registry(s, true);
  if (!model.empty()) {
    const auto e = reg->render_explanation(model);
    json terms = json::array();
    for (const auto& t : e.terms) terms.push_back({{"word", t.word}, {"coefficient", t.coefficient}});
    emit({{"model_id", e.model_id},
          {"terms", terms},
          {"residual_fraction", e.residual_fraction},
          {"explanation", registry::format_explanation(e)}});
    return kExitOk;
  }
  const auto manifest = reg->manifest();
  json models = json::array();
  for (const auto& r : reg->records()) {
    json entry = {{"model_id", r.model_id}, {"display_name", r.display_name}, {"explained", r.explained}};
    if (manifest->find(r.model_id)) {
      entry["explanation"] = registry::format_explanation(reg->render_explanation(r.model_id));
    }
    models.push_back(entry);
  }
  json basis = json::array();
  for (const auto& b : manifest->basis) basis.push_back(b.word);
  emit({{"manifest_version", manifest->version}, {"basis", basis}, {"models", models}});
  return kExitOk;
}

int cmd_serve(const Settings& s, const std::string& host, std::uint16_t port) {
  auto reg = open_registry(s, false);
  registry::ServerConfig config;
  config.host = host;
  config.port = port;
  config.summarizer = s.backend;
  config.base_generator = s.base_backend;
  config.generator_template = s.generator_template;
  config.prompts = load_prompts(s);
  config.basis = basis_config(s);

  // Signals are taken synchronously so the server can shut down cleanly.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  registry::RegistryServer server(*reg, config);
  const auto bound = server.start();
  emit({{"listening", {{"host", host}, {"port", bound}}}});
  int sig = 0;
  sigwait(&stop_signals, &sig);
  server.stop();
  return kExitOk;
}

void print_ranking(const selector::SelectionResult& r) {
  std::fprintf(stderr, "%-12s %12s\n", "model", "distance");
  for (const auto& [id, d] : r.ranking) std::fprintf(stderr, "%-12s %12.6f\n", id.c_str(), d);
}

int cmd_select(const Settings& s, const std::string& manifest_at, const std::string& download_dir,
               const std::string& profile_out) {
  require_flag(manifest_at, "--manifest");
  const auto manifest = load_manifest(manifest_at);
  const auto metric = selector::parse_metric(s.metric);
  const auto profile = local_profile(s, manifest);
  if (!profile_out.empty()) write_file_atomic(profile_out, selector::profile_to_json(profile).dump(2) + "\n");
  const auto result = selector::select_best(profile, manifest, metric);
  auto out = selector::selection_to_json(result, metric);
  out["manifest_version"] = manifest.version;
  if (!download_dir.empty()) {
    const auto url = registry_url(manifest_at);
    if (!url) throw UsageError("--download needs --manifest to be a registry URL");
    const auto dest = std::filesystem::path(download_dir) / (result.model_id + ".snap");
    out["downloaded"] = selector::download_and_verify(*url, *manifest.find(result.model_id), dest).string();
  }
  if (human_tables()) print_ranking(result);
  emit(out);
  return kExitOk;
}

int cmd_plan(const Settings& s, const std::string& manifest_at, const std::string& out_path) {
  require_flag(manifest_at, "--manifest");
  const auto manifest = load_manifest(manifest_at);
  const auto metric = selector::parse_metric(s.metric);
  const auto profile = local_profile(s, manifest);
  const double tau = s.tau > 0.0 ? s.tau : selector::default_tau(profile.coordinate);
  const auto plan = selector::find_merge_set(profile, manifest, tau, s.k_max, metric);
  const auto j = selector::plan_to_json(plan);
  if (!out_path.empty()) write_file_atomic(out_path, j.dump(2) + "\n");
  emit(j);
  return kExitOk;
}

int cmd_download(const std::string& manifest_at, const std::string& model, const std::string& out,
                 std::size_t chunk) {
  const auto url = registry_url(manifest_at);
  if (!url) throw UsageError("--manifest must be a registry URL");
  const auto manifest = selector::fetch_manifest(*url);
  const auto* entry = manifest.find(model);
  if (!entry) fail(ErrorCode::kNotFound, "model '" + model + "' is not in the manifest");
  selector::DownloadOptions options;
  options.chunk_bytes = chunk;
  const auto path = selector::download_and_verify(*url, *entry, out, options);
  emit({{"model_id", model}, {"path", path.string()}, {"sha256", entry->artifact_sha256}});
  return kExitOk;
}

int cmd_merge(const Settings& s, const std::string& base_path, const std::string& plan_path,
              const std::string& out, const std::vector<std::string>& model_paths) {
  const auto base = read_snapshot(base_path);
  const auto plan_json = json::parse(read_file_bytes(plan_path), nullptr, false);
  if (plan_json.is_discarded()) fail(ErrorCode::kFormat, "merge plan '" + plan_path + "' is not JSON");
  const auto plan = selector::plan_from_json(plan_json);
  require(!plan.members.empty(), ErrorCode::kInvalidArgument, "merge plan has no members");

  std::map<std::string, std::string> paths;
  for (const auto& spec : model_paths) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--model expects ID=PATH, got '" + spec + "'");
    paths[spec.substr(0, eq)] = spec.substr(eq + 1);
  }
  std::unique_ptr<registry::Registry> reg;
  if (!s.registry_dir.empty()) reg = open_registry(s, true);

  std::vector<TaskVector> vectors;
  vectors.reserve(plan.members.size());
  for (const auto& m : plan.members) {
    TensorSnapshot snap;
    if (auto it = paths.find(m.model_id); it != paths.end()) {
      snap = read_snapshot(it->second);
    } else if (reg) {
      snap = decode_snapshot(reg->artifact_bytes(m.model_id));
    } else {
      throw UsageError("no snapshot for '" + m.model_id + "': pass --model ID=PATH or --registry-dir");
    }
    vectors.push_back(task_vector(base, snap, m.model_id));
  }
  std::vector<WeightedTaskVector> weighted;
  for (std::size_t i = 0; i < vectors.size(); ++i) weighted.push_back({&vectors[i], plan.members[i].alpha});
  const auto merged = merge(base, weighted);
  write_snapshot(merged, out);
  emit({{"path", out}, {"fingerprint", merged.fingerprint()}, {"plan", selector::plan_to_json(plan)}});
  return kExitOk;
}

int cmd_stub_backend(const Settings& s, const WorldFlags& w, const std::string& snapshot, int listen,
                     std::size_t max_connections) {
  auto world = std::make_shared<const StyleWorld>(make_world(s, w));
  Persona persona;
  if (!snapshot.empty()) persona = persona_from_snapshot(*world, read_snapshot(snapshot));
  auto backend = std::make_shared<const StubBackend>(world, persona);
  if (listen < 0) {
    proto::serve_stream(backend->handler(), STDIN_FILENO, STDOUT_FILENO);
    return kExitOk;
  }
  proto::serve_tcp([backend] { return backend->handler(); }, static_cast<std::uint16_t>(listen),
                   [](std::uint16_t port) { emit({{"listening", {{"port", port}}}}); }, max_connections);
  return kExitOk;
}

int cmd_stub_snapshot(const Settings& s, const WorldFlags& w, const std::string& out, const std::string& weights,
                      const std::string& base_path, std::uint64_t variant) {
  const auto world = make_world(s, w);
  TensorSnapshot snap;
  if (weights.empty()) {
    snap = base_snapshot(world);
  } else {
    const auto wv = parse_doubles(weights, "--weights");
    if (wv.size() != world.styles.size()) {
      throw UsageError("--weights needs " + std::to_string(world.styles.size()) + " values");
    }
    const auto base = base_path.empty() ? base_snapshot(world) : read_snapshot(base_path);
    snap = personalized_snapshot(world, base, wv, variant);
  }
  write_snapshot(snap, out);
  json styles = json::array();
  for (const auto& st : world.styles) styles.push_back(st.word);
  emit({{"path", out}, {"fingerprint", snap.fingerprint()}, {"styles", styles}});
  return kExitOk;
}

int cmd_stub_generate(const Settings& s, const WorldFlags& w, const std::string& snapshot, std::size_t count) {
  auto world = std::make_shared<const StyleWorld>(make_world(s, w));
  Persona persona;
  if (!snapshot.empty()) persona = persona_from_snapshot(*world, read_snapshot(snapshot));
  StubBackend backend(world, persona);
  const auto prompts = load_prompts(s);
  for (std::size_t i = 0; i < count; ++i) {
    std::cout << backend.generate_one(prompts.prompts[i % prompts.size()], {}) << "\n";
  }
  std::cout << std::flush;
  return kExitOk;
}

sim::SimConfig sim_config(const Settings& s, std::size_t prompts, std::size_t local_samples) {
  sim::SimConfig c;
  c.prompts = prompts;
  c.local_samples = local_samples;
  c.basis = basis_config(s);
  c.metric = selector::parse_metric(s.metric);
  return c;
}

void print_reports(const std::vector<sim::TrialReport>& reports) {
  std::fprintf(stderr, "%-12s %10s %8s %8s %10s %10s %10s %10s\n", "experiment", "similarity", "models", "trials",
               "accuracy", "oracle", "xpert", "exhaustive");
  for (const auto& r : reports) {
    std::fprintf(stderr, "%-12s %10.2f %8zu %8zu %10.3f %10.3f %10zu %10zu\n", r.experiment.c_str(), r.similarity,
                 r.n_models, r.trials, r.selection_accuracy, r.oracle_agreement, r.xpert_calls, r.exhaustive_calls);
  }
}

void emit_reports(const std::vector<sim::TrialReport>& reports, const Settings& s, const std::string& plotdata) {
  for (const auto& r : reports) emit(r.to_json(s.timing));
  if (!plotdata.empty()) write_file_atomic(plotdata, sim::plotdata_csv(reports));
  if (human_tables()) print_reports(reports);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explainable selection and merging of personalized language models.", "xpert"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "Flat 'key = value' settings file; flags override it")
      ->envname("XPERT_CONFIG");
  app.footer(
      "Exit status: 0 success, 1 domain error, 2 usage error.\n"
      "Config keys are the shared flag names without dashes, e.g. 'registry-dir = /srv/xpert'.");

  Settings s;
  app.add_option("--registry-dir", s.registry_dir, "Registry storage directory");
  app.add_option("--backend", s.backend, "Summarizer backend: cmd:<command> or tcp:<host>:<port>");
  app.add_option("--base-backend", s.base_backend, "Base-model generator backend (defaults to --backend)");
  app.add_option("--generator-template", s.generator_template,
                 "Generator backend per model; {snapshot} becomes the artifact path");
  app.add_option("--prompts", s.prompts_file, "Probe prompts, one per line (default: 50 built-in prompts)")
      ->check(CLI::ExistingFile);
  app.add_option("--local", s.local_file, "Local text samples, one per line")->check(CLI::ExistingFile);
  app.add_option("--ortho-threshold", s.ortho_threshold, "Largest |cos| between basis members")
      ->capture_default_str()
      ->check(CLI::Range(1e-12, 1.0));
  app.add_option("--epsilon-fraction", s.epsilon_fraction, "Stop once the residual is below this fraction of |V|")
      ->capture_default_str()
      ->check(CLI::Range(1e-12, 1.0));
  app.add_option("--metric", s.metric, "Coordinate distance")->capture_default_str()->check(
      CLI::IsMember({"l1", "l2"}));
  app.add_option("--tau", s.tau, "Goodness threshold for merge plans (0: 0.25 x |Z_local|_1)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  app.add_option("--k-max", s.k_max, "Largest merge plan")->capture_default_str()->check(CLI::Range(1, 8));
  app.add_option("--seed", s.seed, "Seed for the stub world and simulations")->capture_default_str();
  app.add_flag("--timing", s.timing, "Include runtime_ms in simulation reports");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the registry HTTP service until SIGINT/SIGTERM");
  std::string host = "127.0.0.1";
  std::uint16_t port = 8470;
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--port", port, "Bind port (0 picks one)")->capture_default_str();

  // register
  auto* reg = app.add_subcommand("register", "Add a personalized snapshot to the registry");
  std::string artifact, display_name, base_path, base_fp;
  reg->add_option("--artifact", artifact, "Snapshot file")->required()->check(CLI::ExistingFile);
  reg->add_option("--name", display_name, "Display name");
  reg->add_option("--base", base_path, "Base snapshot the model was fine-tuned from")->check(CLI::ExistingFile);
  reg->add_option("--base-fingerprint", base_fp, "Base snapshot fingerprint, instead of --base");

  // explain / show
  auto* explain = app.add_subcommand("explain", "Explain every unexplained model and publish a new manifest");
  auto* show = app.add_subcommand("show", "Print the manifest summary or one model's explanation");
  std::string show_model;
  show->add_option("--model", show_model, "Model id");

  // select / plan / download
  auto* select = app.add_subcommand("select", "Pick the cached model nearest to the local data");
  std::string manifest_at, download_dir, profile_out;
  select->add_option("--manifest", manifest_at, "Registry URL or manifest file")->required();
  select->add_option("--download", download_dir, "Fetch and verify the selected artifact into this directory");
  select->add_option("--profile-out", profile_out, "Write the local profile JSON here");

  auto* plan = app.add_subcommand("plan", "Find the smallest weighted merge set within --tau");
  std::string plan_out;
  plan->add_option("--manifest", manifest_at, "Registry URL or manifest file")->required();
  plan->add_option("--out", plan_out, "Write the plan JSON here");

  auto* download = app.add_subcommand("download", "Resumable, checksum-verified artifact download");
  std::string download_model, download_out;
  std::size_t chunk = 0;
  download->add_option("--manifest", manifest_at, "Registry URL")->required();
  download->add_option("--model", download_model, "Model id")->required();
  download->add_option("--out", download_out, "Destination file")->required();
  download->add_option("--chunk-bytes", chunk, "Bytes per range request (0: whole remainder)")
      ->capture_default_str();

  // merge
  auto* merge_cmd = app.add_subcommand("merge", "Build the weighted merge of a plan's members");
  std::string merge_base, merge_plan, merge_out;
  std::vector<std::string> merge_models;
  merge_cmd->add_option("--base", merge_base, "Base snapshot")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--plan", merge_plan, "Plan JSON from 'xpert plan'")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--out", merge_out, "Merged snapshot file")->required();
  merge_cmd->add_option("--model", merge_models, "Member snapshot as ID=PATH (else read from --registry-dir)");

  // stub tools
  WorldFlags world;
  auto* stub = app.add_subcommand("stub-backend", "Serve the deterministic stub backend on stdio or TCP");
  add_world_flags(stub, world);
  std::string stub_snapshot;
  int listen = -1;
  std::size_t max_connections = 0;
  stub->add_option("--snapshot", stub_snapshot, "Speak as this snapshot's persona")->check(CLI::ExistingFile);
  stub->add_option("--listen", listen, "Serve TCP on this port instead of stdio (0 picks one)");
  stub->add_option("--max-connections", max_connections, "Exit after this many TCP connections (0: never)")
      ->capture_default_str();

  auto* stub_snap = app.add_subcommand("stub-snapshot", "Write a stub base or personalized snapshot");
  add_world_flags(stub_snap, world);
  std::string snap_out, snap_weights, snap_base;
  std::uint64_t variant = 1;
  stub_snap->add_option("--out", snap_out, "Snapshot file")->required();
  stub_snap->add_option("--weights", snap_weights, "Comma-separated style weights (omit for the base)");
  stub_snap->add_option("--base", snap_base, "Base snapshot to personalize")->check(CLI::ExistingFile);
  stub_snap->add_option("--variant", variant, "Seed of the filler perturbation")->capture_default_str();

  auto* stub_gen = app.add_subcommand("stub-generate", "Print stub generations, one per line, for local data");
  add_world_flags(stub_gen, world);
  std::string gen_snapshot;
  std::size_t gen_count = 50;
  stub_gen->add_option("--snapshot", gen_snapshot, "Persona snapshot")->check(CLI::ExistingFile);
  stub_gen->add_option("--count", gen_count, "Samples")->capture_default_str();

  // sim
  auto* sim_cmd = app.add_subcommand("sim", "Seeded experiments against the stub backend");
  sim_cmd->require_subcommand(1);
  sim_cmd->footer(
      "Reports are JSON lines. --plotdata CSV columns: experiment,similarity,n_models,trials,\n"
      "selection_accuracy,oracle_agreement,xpert_calls,exhaustive_calls,basis_size");
  std::size_t sim_prompts = 50, sim_local = 50, sim_models = 16, sim_trials = 200, levels = 4, mixture = 2;
  std::string similarities = "0.3,0.5,0.7,0.8,0.9", model_counts = "4,16,64,256", plotdata;
  auto add_sim_flags = [&](CLI::App* a) {
    add_world_flags(a, world);
    a->add_option("--prompt-count", sim_prompts, "Probe prompts per model")->capture_default_str()->check(
        CLI::PositiveNumber);
    a->add_option("--local-samples", sim_local, "Local text samples")->capture_default_str()->check(
        CLI::PositiveNumber);
  };
  auto* accuracy = sim_cmd->add_subcommand("accuracy", "Selection accuracy across similarity levels");
  add_sim_flags(accuracy);
  accuracy->add_option("--similarities", similarities, "Comma-separated similarity levels")->capture_default_str();
  accuracy->add_option("--models", sim_models, "Cached models")->capture_default_str()->check(CLI::PositiveNumber);
  accuracy->add_option("--trials", sim_trials, "Trials per level")->capture_default_str()->check(
      CLI::PositiveNumber);
  accuracy->add_option("--plotdata", plotdata, "Also write CSV here");
  auto* scalability = sim_cmd->add_subcommand("scalability", "Backend calls versus an exhaustive baseline");
  add_sim_flags(scalability);
  scalability->add_option("--model-counts", model_counts, "Comma-separated model counts")->capture_default_str();
  scalability->add_option("--plotdata", plotdata, "Also write CSV here");
  auto* multilevel = sim_cmd->add_subcommand("multilevel", "Ordering of graded style levels");
  add_sim_flags(multilevel);
  multilevel->add_option("--levels", levels, "Graded levels")->capture_default_str()->check(CLI::Range(3, 64));
  multilevel->add_option("--trials", sim_trials, "Trials")->capture_default_str()->check(CLI::PositiveNumber);
  auto* merge_sim = sim_cmd->add_subcommand("merge", "Merge plans versus the best single model");
  add_sim_flags(merge_sim);
  merge_sim->add_option("--mixture", mixture, "Styles in the local mixture")->capture_default_str()->check(
      CLI::Range(1, 64));
  merge_sim->add_option("--trials", sim_trials, "Trials")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    BasisConfig{s.ortho_threshold, s.epsilon_fraction}.validate();
    if (serve->parsed()) return cmd_serve(s, host, port);
    if (reg->parsed()) return cmd_register(s, artifact, display_name, base_path, base_fp);
    if (explain->parsed()) return cmd_explain(s);
    if (show->parsed()) return cmd_show(s, show_model);
    if (select->parsed()) return cmd_select(s, manifest_at, download_dir, profile_out);
    if (plan->parsed()) return cmd_plan(s, manifest_at, plan_out);
    if (download->parsed()) return cmd_download(manifest_at, download_model, download_out, chunk);
    if (merge_cmd->parsed()) return cmd_merge(s, merge_base, merge_plan, merge_out, merge_models);
    if (stub->parsed()) return cmd_stub_backend(s, world, stub_snapshot, listen, max_connections);
    if (stub_snap->parsed()) return cmd_stub_snapshot(s, world, snap_out, snap_weights, snap_base, variant);
    if (stub_gen->parsed()) return cmd_stub_generate(s, world, gen_snapshot, gen_count);
    if (sim_cmd->parsed()) {
      const auto config = sim_config(s, sim_prompts, sim_local);
      const auto w = make_world(s, world);
      if (accuracy->parsed()) {
        const auto levels_v = parse_doubles(similarities, "--similarities");
        for (double v : levels_v) {
          if (v < 0.0 || v > 1.0) throw UsageError("--similarities: values must lie in [0,1]");
        }
        emit_reports(sim::run_accuracy_sweep(w, levels_v, sim_models, sim_trials, config), s, plotdata);
      } else if (scalability->parsed()) {
        std::vector<std::size_t> counts;
        for (double v : parse_doubles(model_counts, "--model-counts")) {
          if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
            throw UsageError("--model-counts: values must be positive integers");
          }
          counts.push_back(static_cast<std::size_t>(v));
        }
        emit_reports(sim::run_scalability_sweep(w, counts, config), s, plotdata);
      } else if (multilevel->parsed()) {
        emit(sim::run_multilevel_check(w, levels, sim_trials, config).to_json());
      } else if (merge_sim->parsed()) {
        emit(sim::run_merge_check(w, sim_trials, mixture, s.tau, s.k_max, config).to_json());
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << e.what() << "\nRun with --help for more information.\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << json{{"error", {{"code", error_code_name(e.code())}, {"message", e.what()}}}}.dump() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}
