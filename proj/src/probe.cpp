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

#include "xpert/probe.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "xpert/error.hpp"
#include "xpert/hash.hpp"
#include "xpert/random.hpp"

namespace xpert::probe {

namespace {

std::vector<std::string> split_ws(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<double> pseudo_embedding(const std::string& token, std::size_t dim) {
  SplitMix64 rng(fnv1a64("soft-prompt-token:" + token));
  std::vector<double> v(dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = rng.gaussian() * scale;
  return v;
}

std::string with_index(std::size_t index, const std::string& message) {
  return "prompt " + std::to_string(index) + ": " + message;
}

// Loss and gradient of 1 - cos(out, target) with respect to every soft-prompt
// token, obtained from the backend or by central differences.
struct Evaluation {
  double loss = 0.0;
  std::vector<std::vector<double>> grad_prefix;
  std::vector<std::vector<double>> grad_suffix;
};

double loss_of(const EmbeddingVector& out, const std::vector<double>& target) {
  return cosine_distance(out, EmbeddingVector(target));
}

Evaluation evaluate(BackendSession& backend, const std::string& word, const SoftPrompt& prompt,
                    const std::vector<double>& target, const TuneConfig& config) {
  const bool analytic = !config.force_finite_differences && backend.supports(proto::op::kGradWordVector);
  if (analytic) {
    auto reply = backend.grad_word_vector(prompt.prefix, word, prompt.suffix, target);
    return {reply.loss, std::move(reply.grad_prefix), std::move(reply.grad_suffix)};
  }
  require(backend.supports(proto::op::kWordVector), ErrorCode::kBackend,
          "backend offers neither grad_word_vector nor word_vector");
  Evaluation ev;
  ev.loss = loss_of(backend.word_vector(prompt.prefix, word, prompt.suffix), target);
  SoftPrompt probe = prompt;
  auto differentiate = [&](std::vector<std::vector<double>>& rows,
                           std::vector<std::vector<double>>& grads) {
    grads.assign(rows.size(), std::vector<double>(target.size(), 0.0));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t k = 0; k < rows[r].size(); ++k) {
        const double saved = rows[r][k];
        rows[r][k] = saved + config.fd_step;
        const double up = loss_of(backend.word_vector(probe.prefix, word, probe.suffix), target);
        rows[r][k] = saved - config.fd_step;
        const double down = loss_of(backend.word_vector(probe.prefix, word, probe.suffix), target);
        rows[r][k] = saved;
        grads[r][k] = (up - down) / (2.0 * config.fd_step);
      }
    }
  };
  differentiate(probe.prefix, ev.grad_prefix);
  differentiate(probe.suffix, ev.grad_suffix);
  return ev;
}

SoftPrompt stepped(const SoftPrompt& p, const Evaluation& ev, double lr) {
  SoftPrompt out = p;
  for (std::size_t r = 0; r < out.prefix.size(); ++r) {
    for (std::size_t k = 0; k < out.prefix[r].size(); ++k) out.prefix[r][k] -= lr * ev.grad_prefix[r][k];
  }
  for (std::size_t r = 0; r < out.suffix.size(); ++r) {
    for (std::size_t k = 0; k < out.suffix[r].size(); ++k) out.suffix[r][k] -= lr * ev.grad_suffix[r][k];
  }
  return out;
}

}  // namespace

PromptSet PromptSet::make(std::string id, std::vector<std::string> prompts, std::string source_tag) {
  require(!prompts.empty(), ErrorCode::kInvalidArgument, "prompt set must be nonempty");
  std::set<std::string> seen;
  for (const auto& p : prompts) {
    require(!p.empty(), ErrorCode::kInvalidArgument, "prompts must be nonempty");
    require(seen.insert(p).second, ErrorCode::kInvalidArgument, "duplicate prompt '" + p + "'");
  }
  return PromptSet{std::move(id), std::move(prompts), std::move(source_tag)};
}

PromptSet PromptSet::from_text(std::string_view text, std::string source_tag) {
  std::vector<std::string> prompts;
  std::istringstream in{std::string(text)};
  std::string line;
  Fnv1a64 h;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    h.update(line).update("\n");
    prompts.push_back(line);
  }
  return make("prompts-" + to_hex(h.digest()), std::move(prompts), std::move(source_tag));
}

PromptSet PromptSet::prefix(std::size_t n) const {
  require(n >= 1 && n <= prompts.size(), ErrorCode::kInvalidArgument, "prefix length out of range");
  return PromptSet{id + "[:" + std::to_string(n) + "]",
                   std::vector<std::string>(prompts.begin(), prompts.begin() + static_cast<long>(n)),
                   source_tag};
}

const std::string& instruction_template() {
  static const std::string kText =
      "Each item below pairs a prompt with two responses: BASE comes from the original model and "
      "PERSONALIZED from a fine-tuned copy of it. Compare the language style of all PERSONALIZED "
      "responses with the BASE responses and answer with exactly one adjective that names the "
      "difference.";
  return kText;
}

std::string instruction_template_hash() {
  return to_hex(Fnv1a64{}.update(kInstructionTemplateName).update("\n").update(instruction_template()).digest());
}

void SoftPrompt::validate(std::size_t dim) const {
  const std::size_t n = token_count();
  require(n >= 1 && n <= 64, ErrorCode::kInvalidArgument, "soft prompt token count must be in [1,64]");
  for (const auto* rows : {&prefix, &suffix}) {
    for (const auto& r : *rows) {
      check_same_dim(r.size(), dim, "soft prompt token");
      for (double x : r) require(std::isfinite(x), ErrorCode::kNonFinite, "soft prompt has a non-finite value");
    }
  }
}

EmbeddingVector extract_shift_embedding(BackendSession& summarizer, std::span<const ResponsePair> pairs) {
  require(!pairs.empty(), ErrorCode::kInvalidArgument, "extract_shift_embedding needs >= 1 pair");
  for (const auto& p : pairs) {
    require(!p.prompt.empty() && !p.base_response.empty() && !p.personalized_response.empty(),
            ErrorCode::kInvalidArgument, "response pairs must have nonempty fields");
  }
  return summarizer.shift_embed(instruction_template(), pairs);
}

std::vector<std::string> base_responses(BackendSession& base_gen, const PromptSet& prompts) {
  std::vector<std::string> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      out.push_back(base_gen.generate({prompts.prompts[i]}).front());
    } catch (const Error& e) {
      fail(e.code(), with_index(i, e.what()));
    }
  }
  return out;
}

std::vector<ResponsePair> probe_model(std::span<const std::string> base, BackendSession& pllm_gen,
                                      const PromptSet& prompts) {
  require(base.size() == prompts.size(), ErrorCode::kInvalidArgument,
          "base responses do not match the prompt set");
  std::vector<ResponsePair> pairs;
  pairs.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      pairs.push_back({prompts.prompts[i], base[i], pllm_gen.generate({prompts.prompts[i]}).front()});
    } catch (const Error& e) {
      fail(e.code(), with_index(i, e.what()));
    }
  }
  return pairs;
}

std::vector<ResponsePair> probe_models(BackendSession& base_gen, BackendSession& pllm_gen,
                                       const PromptSet& prompts) {
  std::vector<ResponsePair> pairs;
  pairs.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      auto base = base_gen.generate({prompts.prompts[i]}).front();
      auto personalized = pllm_gen.generate({prompts.prompts[i]}).front();
      pairs.push_back({prompts.prompts[i], std::move(base), std::move(personalized)});
    } catch (const Error& e) {
      fail(e.code(), with_index(i, e.what()));
    }
  }
  return pairs;
}

double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
  const bool za = a.norm() == 0.0;
  const bool zb = b.norm() == 0.0;
  if (za || zb) return (za && zb) ? 0.0 : 1.0;
  return 1.0 - cosine_similarity(a, b);
}

VolumeEstimate estimate_required_prompts(BackendSession& summarizer, BackendSession& base_gen,
                                         BackendSession& pllm_gen, const PromptSet& pool,
                                         double tolerance, std::size_t step) {
  require(step >= 1, ErrorCode::kInvalidArgument, "step must be >= 1");
  require(pool.size() >= 2 * step, ErrorCode::kInvalidArgument, "prompt pool must hold >= 2*step prompts");
  require(tolerance > 0.0 && tolerance < 1.0, ErrorCode::kInvalidArgument, "tolerance must be in (0,1)");

  const auto pairs = probe_models(base_gen, pllm_gen, pool);
  const std::span<const ResponsePair> all(pairs);
  const EmbeddingVector reference = extract_shift_embedding(summarizer, all);

  VolumeEstimate est;
  for (std::size_t n = step; n < pool.size(); n += step) {
    const auto v = extract_shift_embedding(summarizer, all.first(n));
    const double d = cosine_distance(v, reference);
    est.curve.push_back({n, d});
    if (!est.reached && d < tolerance) {
      est.reached = true;
      est.count = n;
    }
  }
  if (!est.reached) est.count = pool.size();
  return est;
}

SubVector word_to_subvector(BackendSession& summarizer, const std::string& word,
                            std::span<const std::string> prompts, std::span<const std::string> base) {
  require(!prompts.empty() && prompts.size() == base.size(), ErrorCode::kInvalidArgument,
          "word_to_subvector needs one base response per prompt");
  std::vector<ResponsePair> pairs;
  pairs.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    pairs.push_back({prompts[i], base[i], summarizer.generate({prompts[i]}, word).front()});
  }
  return SubVector::from_raw(word, extract_shift_embedding(summarizer, pairs));
}

SubVector word_to_subvector(BackendSession& summarizer, const std::string& word,
                            BackendSession& base_gen, const PromptSet& prompts) {
  const auto base = base_responses(base_gen, prompts);
  return word_to_subvector(summarizer, word, prompts.prompts, base);
}

std::vector<Candidate> candidate_words(BackendSession& summarizer, const EmbeddingVector& v,
                                       std::size_t limit) {
  require(limit >= 1, ErrorCode::kInvalidArgument, "candidate limit must be >= 1");
  auto words = summarizer.candidates(v, limit);
  for (const auto& w : words) {
    require(!w.word.empty() && w.probability > 0.0 && w.probability <= 1.0, ErrorCode::kProtocol,
            "candidate '" + w.word + "' has probability outside (0,1]");
  }
  rank_candidates(words);
  if (words.size() > limit) words.resize(limit);
  return words;
}

SoftPrompt initial_soft_prompt(BackendSession& backend, std::size_t token_count) {
  require(token_count >= 1 && token_count <= 64, ErrorCode::kInvalidArgument,
          "soft prompt token count must be in [1,64]");
  const std::string_view tmpl = kSoftPromptTemplate;
  const auto slot = tmpl.find("<word>");
  auto before = split_ws(tmpl.substr(0, slot));
  auto after_text = std::string(tmpl.substr(slot + 6));
  // Keep the comma that trails the slot as its own token.
  if (!after_text.empty() && after_text.front() == ',') after_text.insert(1, " ");
  auto after = split_ws(after_text);

  const std::size_t n_prefix = token_count / 2;
  const std::size_t n_suffix = token_count - n_prefix;
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < n_prefix; ++i) tokens.push_back(before[i % before.size()]);
  for (std::size_t i = 0; i < n_suffix; ++i) tokens.push_back(after[i % after.size()]);

  std::vector<std::vector<double>> vectors;
  if (backend.supports(proto::op::kEmbedTokens)) {
    vectors = backend.embed_tokens(tokens);
  } else {
    for (const auto& t : tokens) vectors.push_back(pseudo_embedding(t, backend.embedding_dim()));
  }
  SoftPrompt p;
  p.prefix.assign(vectors.begin(), vectors.begin() + static_cast<long>(n_prefix));
  p.suffix.assign(vectors.begin() + static_cast<long>(n_prefix), vectors.end());
  return p;
}

TuneResult tune_prompt(BackendSession& backend, const std::string& word, const SubVector& ground_truth,
                       const TuneConfig& config) {
  require(config.learning_rate > 0.0, ErrorCode::kInvalidArgument, "learning_rate must be > 0");
  check_same_dim(ground_truth.dim(), backend.embedding_dim(), "tune_prompt ground truth");
  const std::vector<double> target(ground_truth.direction.values().begin(),
                                   ground_truth.direction.values().end());

  TuneResult result;
  result.prompt = initial_soft_prompt(backend, config.token_count);
  Evaluation current = evaluate(backend, word, result.prompt, target, config);
  require(std::isfinite(current.loss), ErrorCode::kNonFinite, "prompt tuning loss is not finite");
  result.loss_curve.push_back(current.loss);

  double lr = config.learning_rate;
  constexpr int kMaxHalvings = 40;
  while (result.steps < config.max_steps && current.loss > config.target_error) {
    bool accepted = false;
    for (int h = 0; h < kMaxHalvings; ++h) {
      SoftPrompt trial = stepped(result.prompt, current, lr);
      Evaluation next = evaluate(backend, word, trial, target, config);
      require(std::isfinite(next.loss), ErrorCode::kNonFinite, "prompt tuning loss is not finite");
      if (next.loss <= current.loss) {
        result.prompt = std::move(trial);
        current = std::move(next);
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;  // step size underflowed; at a stationary point
    lr *= 1.5;
    ++result.steps;
    result.loss_curve.push_back(current.loss);
  }
  return result;
}

SubVector fast_word_to_subvector(BackendSession& backend, const std::string& word, const SoftPrompt& prompt) {
  prompt.validate(backend.embedding_dim());
  return SubVector::from_raw(word, backend.word_vector(prompt.prefix, word, prompt.suffix));
}

}  // namespace xpert::probe
