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

#include "xpert/stub_backend.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "xpert/error.hpp"
#include "xpert/hash.hpp"
#include "xpert/random.hpp"

namespace xpert::sim {

namespace {

using nlohmann::json;

constexpr const char* kWords[] = {
    "formal",     "casual",     "poetic",     "sarcastic",    "humorous",   "technical",
    "concise",    "verbose",    "optimistic", "pessimistic",  "romantic",   "academic",
    "enthusiastic", "melancholic", "persuasive", "whimsical", "diplomatic", "blunt",
    "archaic",    "dramatic",   "playful",    "solemn",       "cheerful",   "skeptical",
    "nostalgic",  "rhetorical", "lyrical",    "terse",        "ornate",     "colloquial",
    "authoritative", "empathetic"};
constexpr const char* kSynonymSuffixes[kSynonymsPerStyle] = {"-like", "-ish", "-esque"};

std::string style_word(std::size_t k) {
  constexpr std::size_t n = sizeof(kWords) / sizeof(kWords[0]);
  return k < n ? std::string(kWords[k]) : "style" + std::to_string(k);
}

std::string format_real(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::vector<double> gaussian_vector(SplitMix64& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.gaussian();
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  require(n > 0.0, ErrorCode::kZeroVector, "degenerate draw while building the world");
  for (auto& x : v) x /= n;
}

// Removes the components along every vector in `against`, twice for accuracy.
void orthogonalize(std::vector<double>& v, const std::vector<const std::vector<double>*>& against) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto* u : against) {
      const double c = dot(v, *u);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * (*u)[i];
    }
  }
}

std::vector<double> read_row(const json& value, std::size_t dim, const char* what) {
  if (!value.is_array() || value.size() != dim) {
    fail(ErrorCode::kDimensionMismatch, std::string(what) + " must have " + std::to_string(dim) + " reals");
  }
  std::vector<double> row;
  row.reserve(dim);
  for (const auto& x : value) {
    if (!x.is_number()) fail(ErrorCode::kInvalidArgument, std::string(what) + " holds a non-number");
    row.push_back(x.get<double>());
    require(std::isfinite(row.back()), ErrorCode::kNonFinite, std::string(what) + " is not finite");
  }
  return row;
}

std::vector<std::vector<double>> read_rows(const json& value, std::size_t dim, const char* what) {
  if (!value.is_array()) fail(ErrorCode::kInvalidArgument, std::string(what) + " must be an array");
  std::vector<std::vector<double>> rows;
  for (const auto& r : value) rows.push_back(read_row(r, dim, what));
  return rows;
}

const char* reply_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch:
      return "dimension_mismatch";
    case ErrorCode::kZeroVector:
    case ErrorCode::kDegenerateWord:
      return "degenerate";
    default:
      return "bad_request";
  }
}

}  // namespace

const std::vector<double>* StyleWorld::vector_of(std::string_view word) const {
  for (const auto& s : styles) {
    if (s.word == word) return &s.direction;
  }
  for (const auto& s : synonyms) {
    if (s.word == word) return &s.direction;
  }
  return nullptr;
}

std::optional<std::size_t> StyleWorld::style_index(std::string_view word) const {
  for (std::size_t i = 0; i < styles.size(); ++i) {
    if (styles[i].word == word) return i;
  }
  return std::nullopt;
}

std::vector<std::string> StyleWorld::vocabulary() const {
  std::vector<std::string> out;
  for (const auto& s : styles) out.push_back(s.word);
  for (const auto& s : synonyms) out.push_back(s.word);
  return out;
}

StyleWorld generate_world(std::uint64_t seed, std::size_t n_styles, std::size_t dim, double noise_sigma,
                          bool identity_map) {
  require(dim >= 1 && n_styles >= 1, ErrorCode::kInvalidArgument, "world needs dim >= 1 and n_styles >= 1");
  require(n_styles <= dim, ErrorCode::kInvalidArgument,
          "n_styles (" + std::to_string(n_styles) + ") exceeds dim (" + std::to_string(dim) + ")");
  require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorCode::kInvalidArgument,
          "noise_sigma must be finite and >= 0");

  StyleWorld w;
  w.seed = seed;
  w.dim = dim;
  w.noise_sigma = noise_sigma;
  w.identity_map = identity_map;

  SplitMix64 rng(mix_seed(seed, 1));
  std::vector<const std::vector<double>*> planted;
  w.styles.reserve(n_styles);
  for (std::size_t k = 0; k < n_styles; ++k) {
    auto v = gaussian_vector(rng, dim);
    orthogonalize(v, planted);
    normalize(v);
    w.styles.push_back({style_word(k), std::move(v)});
    planted.push_back(&w.styles.back().direction);
  }

  w.style_gap = std::acos(0.0) * 2.0;
  for (std::size_t i = 0; i < n_styles; ++i) {
    for (std::size_t j = i + 1; j < n_styles; ++j) {
      const double c = std::min(1.0, std::abs(dot(w.styles[i].direction, w.styles[j].direction)));
      w.style_gap = std::min(w.style_gap, std::acos(c));
    }
  }

  SplitMix64 syn_rng(mix_seed(seed, 2));
  const double side = std::sqrt(1.0 - kSynonymCosine * kSynonymCosine);
  for (std::size_t k = 0; k < n_styles; ++k) {
    for (const char* suffix : kSynonymSuffixes) {
      auto u = gaussian_vector(syn_rng, dim);
      orthogonalize(u, {&w.styles[k].direction});
      std::vector<double> v(dim);
      if (dim > 1) {
        normalize(u);
        for (std::size_t i = 0; i < dim; ++i) v[i] = kSynonymCosine * w.styles[k].direction[i] + side * u[i];
        normalize(v);
      } else {
        v = w.styles[k].direction;
      }
      w.synonyms.push_back({w.styles[k].word + suffix, k, std::move(v)});
    }
  }

  SplitMix64 map_rng(mix_seed(seed, 3));
  w.linear_map.assign(dim * dim, 0.0);
  const double scale = 0.3 / std::sqrt(static_cast<double>(dim));
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double g = map_rng.gaussian();
      w.linear_map[r * dim + c] = (r == c ? 1.0 : 0.0) + (identity_map ? 0.0 : scale * g);
    }
  }
  return w;
}

namespace {

constexpr std::int64_t kFillerWidth = 16;

std::map<std::string, Tensor> filler_tensors(std::uint64_t seed, double scale) {
  SplitMix64 rng(seed);
  auto draw = [&](std::vector<std::int64_t> shape) {
    Tensor t{std::move(shape), {}};
    t.data.resize(t.element_count());
    for (auto& x : t.data) x = static_cast<float>(scale * rng.gaussian());
    return t;
  };
  std::map<std::string, Tensor> out;
  out.emplace("layer0.weight", draw({kFillerWidth, kFillerWidth}));
  out.emplace("layer0.bias", draw({kFillerWidth}));
  out.emplace("layer1.weight", draw({kFillerWidth, kFillerWidth}));
  return out;
}

}  // namespace

TensorSnapshot base_snapshot(const StyleWorld& world) {
  auto tensors = filler_tensors(mix_seed(world.seed, 4), 0.1);
  tensors.emplace(kStyleWeightsTensor,
                  Tensor{{static_cast<std::int64_t>(world.styles.size())},
                         std::vector<float>(world.styles.size(), 0.0f)});
  return TensorSnapshot(std::move(tensors));
}

TensorSnapshot personalized_snapshot(const StyleWorld& world, const TensorSnapshot& base,
                                     std::span<const double> weights, std::uint64_t seed) {
  require(weights.size() == world.styles.size(), ErrorCode::kInvalidArgument,
          "need one weight per planted style");
  auto tensors = base.tensors();
  const auto delta = filler_tensors(mix_seed(seed, 5), 0.01);
  for (auto& [name, t] : tensors) {
    auto it = delta.find(name);
    if (it == delta.end()) continue;
    require(it->second.shape == t.shape, ErrorCode::kMismatch, "base filler tensor '" + name + "' has an odd shape");
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += it->second.data[i];
  }
  auto& w = tensors.at(kStyleWeightsTensor);
  require(w.data.size() == weights.size(), ErrorCode::kMismatch, "base style weights have the wrong length");
  for (std::size_t i = 0; i < weights.size(); ++i) w.data[i] = static_cast<float>(weights[i]);
  return TensorSnapshot(std::move(tensors));
}

Persona persona_from_snapshot(const StyleWorld& world, const TensorSnapshot& snapshot) {
  if (!snapshot.contains(kStyleWeightsTensor)) {
    fail(ErrorCode::kMismatch, std::string("snapshot has no '") + kStyleWeightsTensor + "' tensor");
  }
  const auto& t = snapshot.at(kStyleWeightsTensor);
  require(t.data.size() == world.styles.size(), ErrorCode::kMismatch,
          "snapshot style weights do not match the world's style count");
  Persona p;
  p.weights.assign(t.data.begin(), t.data.end());
  const bool any = std::any_of(p.weights.begin(), p.weights.end(), [](double x) { return x != 0.0; });
  p.voice = any ? snapshot.fingerprint() : "base";
  return p;
}

ParsedText parse_text(std::string_view text) {
  ParsedText out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    if (tok.size() > 1 && tok[0] == '#') {
      const auto colon = tok.rfind(':');
      std::string word = tok.substr(1);
      double weight = 1.0;
      if (colon != std::string::npos && colon > 1) {
        word = tok.substr(1, colon - 1);
        const char* first = tok.data() + colon + 1;
        const char* last = tok.data() + tok.size();
        auto res = std::from_chars(first, last, weight);
        if (res.ec != std::errc{} || res.ptr != last || !std::isfinite(weight)) {
          fail(ErrorCode::kInvalidArgument, "bad style tag weight in '" + tok + "'");
        }
      }
      out.tags.emplace_back(std::move(word), weight);
    } else {
      if (!out.content.empty()) out.content += ' ';
      out.content += tok;
    }
  }
  return out;
}

std::string render_text(std::string_view prompt, std::string_view voice,
                        const std::vector<std::pair<std::string, double>>& tags) {
  std::string out;
  std::istringstream in{std::string(prompt)};
  std::string tok;
  while (in >> tok) {
    if (!out.empty()) out += ' ';
    if (tok[0] == '#') out += '_';  // keep prompt hashtags out of the tag channel
    out += tok;
  }
  if (!out.empty()) out += ' ';
  out += '~';
  out += voice;
  for (const auto& [word, weight] : tags) {
    out += " #" + word;
    if (weight != 1.0) out += ":" + format_real(weight);
  }
  return out;
}

StubBackend::StubBackend(std::shared_ptr<const StyleWorld> world, Persona persona)
    : world_(std::move(world)), persona_(std::move(persona)) {
  require(world_ != nullptr, ErrorCode::kInvalidArgument, "stub needs a world");
  require(persona_.weights.empty() || persona_.weights.size() == world_->styles.size(),
          ErrorCode::kInvalidArgument, "persona weights do not match the world's style count");
}

std::string StubBackend::fingerprint() const {
  return "stub:v1:seed=" + std::to_string(world_->seed) + ":styles=" + std::to_string(world_->styles.size()) +
         ":dim=" + std::to_string(world_->dim) + ":noise=" + format_real(world_->noise_sigma) +
         ":map=" + (world_->identity_map ? "identity" : "linear") + ":persona=" + persona_.voice;
}

std::string StubBackend::generate_one(std::string_view prompt, const std::optional<std::string>& style_word) const {
  std::vector<std::pair<std::string, double>> tags;
  if (style_word) {
    tags.emplace_back(*style_word, 1.0);
    return render_text(prompt, "base", tags);
  }
  for (std::size_t k = 0; k < persona_.weights.size(); ++k) {
    if (persona_.weights[k] != 0.0) tags.emplace_back(world_->styles[k].word, persona_.weights[k]);
  }
  return render_text(prompt, persona_.voice, tags);
}

std::vector<double> StubBackend::text_noise(std::string_view content) const {
  std::vector<double> out(world_->dim, 0.0);
  if (world_->noise_sigma == 0.0) return out;
  SplitMix64 rng(mix_seed(world_->seed, fnv1a64(content)));
  const double scale = world_->noise_sigma / std::sqrt(2.0);
  for (auto& x : out) x = scale * rng.gaussian();
  return out;
}

std::vector<double> StubBackend::shift_embed(std::span<const ResponsePair> pairs) const {
  require(!pairs.empty(), ErrorCode::kInvalidArgument, "shift_embed needs >= 1 pair");
  const std::size_t dim = world_->dim;
  std::map<std::string, double> coefficient;
  std::vector<double> noise(dim, 0.0);
  bool noisy = false;

  for (const auto& pair : pairs) {
    auto p = parse_text(pair.personalized_response);
    auto b = parse_text(pair.base_response);
    // Identical tags on both sides cancel before any arithmetic happens.
    std::vector<bool> used(b.tags.size(), false);
    for (const auto& tag : p.tags) {
      bool matched = false;
      for (std::size_t j = 0; j < b.tags.size(); ++j) {
        if (!used[j] && b.tags[j] == tag) {
          used[j] = true;
          matched = true;
          break;
        }
      }
      if (!matched) coefficient[tag.first] += tag.second;
    }
    for (std::size_t j = 0; j < b.tags.size(); ++j) {
      if (!used[j]) coefficient[b.tags[j].first] -= b.tags[j].second;
    }
    if (world_->noise_sigma != 0.0 && p.content != b.content) {
      const auto np = text_noise(p.content);
      const auto nb = text_noise(b.content);
      for (std::size_t i = 0; i < dim; ++i) noise[i] += np[i] - nb[i];
      noisy = true;
    }
  }

  const double n = static_cast<double>(pairs.size());
  std::vector<double> v(dim, 0.0);
  for (const auto& [word, c] : coefficient) {
    if (c == 0.0) continue;
    const auto* dir = world_->vector_of(word);
    if (dir == nullptr) continue;
    const double scale = c / n;
    for (std::size_t i = 0; i < dim; ++i) v[i] += scale * (*dir)[i];
  }
  if (noisy) {
    for (std::size_t i = 0; i < dim; ++i) v[i] += noise[i] / n;
  }
  return v;
}

std::vector<Candidate> StubBackend::candidates(std::span<const double> v, std::size_t limit) const {
  check_same_dim(v.size(), world_->dim, "candidates query");
  const double vn = std::sqrt(dot(v, v));
  const auto vocab = world_->vocabulary();
  std::vector<double> logits;
  logits.reserve(vocab.size());
  for (const auto& word : vocab) {
    const auto* dir = world_->vector_of(word);
    const double cos = vn > 0.0 ? dot(v, *dir) / vn : 0.0;
    logits.push_back(cos / kCandidateTemperature);
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l - top));
  std::vector<Candidate> out;
  out.reserve(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) out.push_back({vocab[i], logits[i] / z});
  rank_candidates(out);
  if (out.size() > limit) out.resize(limit);
  return out;
}

std::vector<double> StubBackend::token_embedding(std::string_view token) const {
  SplitMix64 rng(mix_seed(world_->seed, Fnv1a64{}.update("token:").update(token).digest()));
  auto v = gaussian_vector(rng, world_->dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(world_->dim));
  for (auto& x : v) x *= scale;
  return v;
}

namespace {

std::vector<double> apply(const std::vector<double>& m, std::span<const double> x, bool transpose) {
  const std::size_t d = x.size();
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (transpose ? m[c * d + r] : m[r * d + c]) * x[c];
    out[r] = s;
  }
  return out;
}

}  // namespace

std::vector<double> StubBackend::word_vector(const std::vector<std::vector<double>>& prefix,
                                             const std::string& word,
                                             const std::vector<std::vector<double>>& suffix) const {
  const std::size_t dim = world_->dim;
  std::vector<double> mean = token_embedding(word);
  for (const auto* rows : {&prefix, &suffix}) {
    for (const auto& r : *rows) {
      check_same_dim(r.size(), dim, "soft prompt token");
      for (std::size_t i = 0; i < dim; ++i) mean[i] += r[i];
    }
  }
  const double count = static_cast<double>(prefix.size() + suffix.size() + 1);
  for (auto& x : mean) x /= count;
  return apply(world_->linear_map, mean, false);
}

proto::GradReply StubBackend::grad_word_vector(const std::vector<std::vector<double>>& prefix,
                                               const std::string& word,
                                               const std::vector<std::vector<double>>& suffix,
                                               std::span<const double> target) const {
  check_same_dim(target.size(), world_->dim, "grad_word_vector target");
  const auto out = word_vector(prefix, word, suffix);
  const double on = std::sqrt(dot(out, out));
  const double tn = std::sqrt(dot(target, target));
  require(on > 0.0 && tn > 0.0, ErrorCode::kZeroVector, "cosine loss undefined for a zero vector");
  const double cos = dot(out, target) / (on * tn);

  // d(1 - cos)/d out, then through the map and the mean.
  std::vector<double> g(out.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = -(target[i] / (tn * on) - cos * out[i] / (on * on));
  auto row = apply(world_->linear_map, g, true);
  const double count = static_cast<double>(prefix.size() + suffix.size() + 1);
  for (auto& x : row) x /= count;

  proto::GradReply reply;
  reply.loss = 1.0 - cos;
  reply.grad_prefix.assign(prefix.size(), row);
  reply.grad_suffix.assign(suffix.size(), row);
  return reply;
}

std::string StubBackend::handle(std::string_view line) const {
  json req;
  try {
    req = json::parse(line);
  } catch (const json::parse_error&) {
    return proto::error_reply(nullptr, "bad_request", "request is not JSON");
  }
  if (!req.is_object()) return proto::error_reply(nullptr, "bad_request", "request must be an object");
  const json id = req.contains("id") ? req["id"] : json();
  const std::string op = req.value("op", "");
  const std::size_t dim = world_->dim;

  try {
    if (op == "hello") {
      if (req.value("proto", 0) != proto::kProtocolVersion) {
        return proto::error_reply(id, "unsupported", "protocol version mismatch");
      }
      return json{{"op", "hello"},
                  {"embedding_dim", dim},
                  {"capabilities",
                   {proto::op::kGenerate, proto::op::kShiftEmbed, proto::op::kCandidates,
                    proto::op::kWordVector, proto::op::kGradWordVector, proto::op::kEmbedTokens}},
                  {"fingerprint", fingerprint()}}
          .dump();
    }
    if (!id.is_number_integer()) return proto::error_reply(id, "bad_request", "request needs an integer id");

    json reply = {{"id", id}};
    if (op == proto::op::kGenerate) {
      const auto prompts = req.at("prompts").get<std::vector<std::string>>();
      std::optional<std::string> word;
      if (req.contains("style_word") && !req["style_word"].is_null()) word = req["style_word"].get<std::string>();
      std::vector<std::string> texts;
      for (const auto& p : prompts) texts.push_back(generate_one(p, word));
      reply["texts"] = texts;
    } else if (op == proto::op::kShiftEmbed) {
      std::vector<ResponsePair> pairs;
      for (const auto& p : req.at("pairs")) {
        pairs.push_back({p.at("prompt").get<std::string>(), p.at("base").get<std::string>(),
                         p.at("personalized").get<std::string>()});
      }
      reply["vector"] = proto::encode_vector(shift_embed(pairs));
    } else if (op == proto::op::kCandidates) {
      const auto v = read_row(req.at("vector"), dim, "vector");
      const auto limit = req.at("limit").get<std::int64_t>();
      require(limit >= 1, ErrorCode::kInvalidArgument, "limit must be >= 1");
      json words = json::array();
      for (const auto& c : candidates(v, static_cast<std::size_t>(limit))) {
        words.push_back({{"word", c.word}, {"probability", c.probability}});
      }
      reply["words"] = std::move(words);
    } else if (op == proto::op::kWordVector) {
      const auto prefix = read_rows(req.at("prefix"), dim, "prefix");
      const auto suffix = read_rows(req.at("suffix"), dim, "suffix");
      reply["vector"] = proto::encode_vector(word_vector(prefix, req.at("word").get<std::string>(), suffix));
    } else if (op == proto::op::kGradWordVector) {
      const auto prefix = read_rows(req.at("prefix"), dim, "prefix");
      const auto suffix = read_rows(req.at("suffix"), dim, "suffix");
      const auto target = read_row(req.at("target"), dim, "target");
      auto g = grad_word_vector(prefix, req.at("word").get<std::string>(), suffix, target);
      reply["loss"] = g.loss;
      reply["grad_prefix"] = proto::encode_matrix(g.grad_prefix);
      reply["grad_suffix"] = proto::encode_matrix(g.grad_suffix);
    } else if (op == proto::op::kEmbedTokens) {
      std::vector<std::vector<double>> rows;
      for (const auto& t : req.at("tokens").get<std::vector<std::string>>()) rows.push_back(token_embedding(t));
      reply["vectors"] = proto::encode_matrix(rows);
    } else {
      return proto::error_reply(id, "unsupported", "unknown op '" + op + "'");
    }
    return reply.dump();
  } catch (const Error& e) {
    return proto::error_reply(id, reply_code(e.code()), e.what());
  } catch (const json::exception&) {
    // Library wording stays out of replies so transcripts are portable.
    return proto::error_reply(id, "bad_request", "malformed '" + op + "' request");
  }
}

proto::LineHandler StubBackend::handler() const {
  auto self = std::make_shared<StubBackend>(*this);
  return [self](std::string_view line) { return self->handle(line); };
}

std::unique_ptr<proto::BackendSession> connect_stub(std::shared_ptr<const StyleWorld> world, Persona persona) {
  StubBackend stub(std::move(world), std::move(persona));
  return std::make_unique<proto::BackendSession>(std::make_unique<proto::InProcessChannel>(stub.handler()));
}

}  // namespace xpert::sim
