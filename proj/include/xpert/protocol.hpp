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

// Newline-delimited JSON protocol spoken with summarizer/generator backends.
//
//   -> {"op":"hello","proto":1}
//   <- {"op":"hello","embedding_dim":D,"capabilities":[...],"fingerprint":S}
//   -> {"id":n,"op":"generate","prompts":[...],"style_word":w?}
//   <- {"id":n,"texts":[...]}
//   -> {"id":n,"op":"shift_embed","instruction":s,"pairs":[{prompt,base,personalized}]}
//   <- {"id":n,"vector":[D reals]}
//   -> {"id":n,"op":"candidates","vector":[...],"limit":k}
//   <- {"id":n,"words":[{"word":w,"probability":p}]}
//   -> {"id":n,"op":"word_vector","prefix":[[...]],"word":w,"suffix":[[...]]}
//   <- {"id":n,"vector":[...]}
//   -> {"id":n,"op":"grad_word_vector", ...word_vector fields..., "target":[...]}
//   <- {"id":n,"loss":x,"grad_prefix":[[...]],"grad_suffix":[[...]]}
//   -> {"id":n,"op":"embed_tokens","tokens":[...]}
//   <- {"id":n,"vectors":[[...]]}
//   error replies: {"id":n,"error":{"code":c,"message":m}}

#include <cstdint>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xpert/vectorspace.hpp"

namespace xpert {

struct ResponsePair {
  std::string prompt;
  std::string base_response;
  std::string personalized_response;
};

namespace proto {

inline constexpr int kProtocolVersion = 1;

namespace op {
inline constexpr const char* kGenerate = "generate";
inline constexpr const char* kShiftEmbed = "shift_embed";
inline constexpr const char* kCandidates = "candidates";
inline constexpr const char* kWordVector = "word_vector";
inline constexpr const char* kGradWordVector = "grad_word_vector";
inline constexpr const char* kEmbedTokens = "embed_tokens";
}  // namespace op

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send_line(std::string_view line) = 0;
  // Throws kBackend when the peer has gone away.
  virtual std::string receive_line() = 0;
};

// Request line in, reply line out.
using LineHandler = std::function<std::string(std::string_view)>;

// Runs a handler in the caller's thread; messages still go through the full
// JSON encoding so the in-process stub exercises the same wire format.
class InProcessChannel : public Channel {
 public:
  explicit InProcessChannel(LineHandler handler) : handler_(std::move(handler)) {}
  void send_line(std::string_view line) override;
  std::string receive_line() override;

 private:
  LineHandler handler_;
  std::vector<std::string> pending_;
};

// Child process speaking the protocol over its standard input/output.
class ProcessChannel : public Channel {
 public:
  static std::unique_ptr<ProcessChannel> spawn(const std::string& command);
  ~ProcessChannel() override;
  ProcessChannel(const ProcessChannel&) = delete;
  ProcessChannel& operator=(const ProcessChannel&) = delete;

  void send_line(std::string_view line) override;
  std::string receive_line() override;

 private:
  ProcessChannel(int pid, int to_child, int from_child)
      : pid_(pid), to_child_(to_child), from_child_(from_child) {}

  int pid_;
  int to_child_;
  int from_child_;
  std::string buffer_;
};

class TcpChannel : public Channel {
 public:
  static std::unique_ptr<TcpChannel> connect(const std::string& host, std::uint16_t port);
  ~TcpChannel() override;
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

  void send_line(std::string_view line) override;
  std::string receive_line() override;

 private:
  explicit TcpChannel(int fd) : fd_(fd) {}
  int fd_;
  std::string buffer_;
};

// "cmd:<shell command>" or "tcp:<host>:<port>".
std::unique_ptr<Channel> open_channel(const std::string& descriptor);

struct CallCounts {
  std::size_t generate = 0;
  std::size_t shift_embed = 0;
  std::size_t candidates = 0;
  std::size_t word_vector = 0;
  std::size_t grad_word_vector = 0;
  std::size_t embed_tokens = 0;

  std::size_t total() const {
    return generate + shift_embed + candidates + word_vector + grad_word_vector + embed_tokens;
  }
};

struct GradReply {
  double loss = 0.0;
  std::vector<std::vector<double>> grad_prefix;
  std::vector<std::vector<double>> grad_suffix;
};

// Client side of one backend connection. Strictly sequential: one request in
// flight at a time, replies must echo the request id.
class BackendSession {
 public:
  // Performs the handshake; throws kProtocol on a malformed hello.
  explicit BackendSession(std::unique_ptr<Channel> channel);

  std::size_t embedding_dim() const { return embedding_dim_; }
  const std::set<std::string>& capabilities() const { return capabilities_; }
  bool supports(std::string_view op) const { return capabilities_.count(std::string(op)) != 0; }
  const std::string& fingerprint() const { return fingerprint_; }
  const CallCounts& calls() const { return calls_; }

  std::vector<std::string> generate(const std::vector<std::string>& prompts,
                                    const std::optional<std::string>& style_word = std::nullopt);
  EmbeddingVector shift_embed(const std::string& instruction, std::span<const ResponsePair> pairs);
  std::vector<Candidate> candidates(const EmbeddingVector& v, std::size_t limit);
  EmbeddingVector word_vector(const std::vector<std::vector<double>>& prefix, const std::string& word,
                              const std::vector<std::vector<double>>& suffix);
  GradReply grad_word_vector(const std::vector<std::vector<double>>& prefix, const std::string& word,
                             const std::vector<std::vector<double>>& suffix,
                             const std::vector<double>& target);
  std::vector<std::vector<double>> embed_tokens(const std::vector<std::string>& tokens);

 private:
  nlohmann::json call(const char* op, nlohmann::json request);
  void require_capability(const char* op) const;
  std::vector<double> read_vector(const nlohmann::json& value, const char* what) const;
  std::vector<std::vector<double>> read_matrix(const nlohmann::json& value, const char* what) const;

  std::unique_ptr<Channel> channel_;
  std::size_t embedding_dim_ = 0;
  std::set<std::string> capabilities_;
  std::string fingerprint_;
  std::int64_t next_id_ = 1;
  CallCounts calls_;
};

// JSON helpers shared by the client and backend implementations.
nlohmann::json encode_vector(std::span<const double> values);
nlohmann::json encode_matrix(const std::vector<std::vector<double>>& rows);
std::string error_reply(const nlohmann::json& id, std::string_view code, std::string_view message);

// Reads request lines from `in_fd` until EOF, writing each reply to `out_fd`.
void serve_stream(const LineHandler& handler, int in_fd, int out_fd);

// Accepts connections on `port` (0 picks one) and serves each with a fresh
// handler from `make_handler`, one connection at a time. `on_listening` gets
// the bound port. Returns when `max_connections` connections (0 = unbounded)
// have been served.
void serve_tcp(const std::function<LineHandler()>& make_handler, std::uint16_t port,
               const std::function<void(std::uint16_t)>& on_listening,
               std::size_t max_connections = 0);

}  // namespace proto
}  // namespace xpert
