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

#include "xpert/protocol.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>

#include "xpert/error.hpp"

namespace xpert::proto {

namespace {

void write_all(int fd, std::string_view data, bool socket) {
  while (!data.empty()) {
    const ssize_t n = socket ? ::send(fd, data.data(), data.size(), MSG_NOSIGNAL)
                             : ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::kBackend, std::string("backend write failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Returns false on EOF with no buffered partial line.
bool read_line(int fd, std::string& buffer, std::string& line) {
  for (;;) {
    auto pos = buffer.find('\n');
    if (pos != std::string::npos) {
      line.assign(buffer, 0, pos);
      buffer.erase(0, pos + 1);
      return true;
    }
    char chunk[65536];
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::kBackend, std::string("backend read failed: ") + std::strerror(errno));
    }
    if (n == 0) {
      if (buffer.empty()) return false;
      line = std::move(buffer);
      buffer.clear();
      return true;
    }
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace

void InProcessChannel::send_line(std::string_view line) {
  pending_.push_back(handler_(line));
}

std::string InProcessChannel::receive_line() {
  if (pending_.empty()) fail(ErrorCode::kBackend, "in-process backend has no pending reply");
  std::string reply = std::move(pending_.front());
  pending_.erase(pending_.begin());
  return reply;
}

std::unique_ptr<ProcessChannel> ProcessChannel::spawn(const std::string& command) {
  ::signal(SIGPIPE, SIG_IGN);
  int to_child[2];
  int from_child[2];
  if (::pipe(to_child) != 0) fail(ErrorCode::kUnavailable, "pipe() failed");
  if (::pipe(from_child) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    fail(ErrorCode::kUnavailable, "pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) fail(ErrorCode::kUnavailable, "fork() failed");
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  return std::unique_ptr<ProcessChannel>(new ProcessChannel(pid, to_child[1], from_child[0]));
}

ProcessChannel::~ProcessChannel() {
  ::close(to_child_);
  ::close(from_child_);
  int status = 0;
  ::waitpid(pid_, &status, 0);
}

void ProcessChannel::send_line(std::string_view line) {
  std::string framed(line);
  framed.push_back('\n');
  write_all(to_child_, framed, false);
}

std::string ProcessChannel::receive_line() {
  std::string line;
  if (!read_line(from_child_, buffer_, line)) fail(ErrorCode::kBackend, "backend process closed its output");
  return line;
}

std::unique_ptr<TcpChannel> TcpChannel::connect(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port_text = std::to_string(port);
  if (::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &res) != 0 || res == nullptr) {
    fail(ErrorCode::kUnavailable, "cannot resolve backend host " + host);
  }
  int fd = -1;
  for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) fail(ErrorCode::kUnavailable, "cannot connect to backend " + host + ":" + port_text);
  return std::unique_ptr<TcpChannel>(new TcpChannel(fd));
}

TcpChannel::~TcpChannel() { ::close(fd_); }

void TcpChannel::send_line(std::string_view line) {
  std::string framed(line);
  framed.push_back('\n');
  write_all(fd_, framed, true);
}

std::string TcpChannel::receive_line() {
  std::string line;
  if (!read_line(fd_, buffer_, line)) fail(ErrorCode::kBackend, "backend connection closed");
  return line;
}

std::unique_ptr<Channel> open_channel(const std::string& descriptor) {
  if (descriptor.rfind("cmd:", 0) == 0) return ProcessChannel::spawn(descriptor.substr(4));
  if (descriptor.rfind("tcp:", 0) == 0) {
    const std::string rest = descriptor.substr(4);
    const auto colon = rest.rfind(':');
    require(colon != std::string::npos && colon + 1 < rest.size(), ErrorCode::kInvalidArgument,
            "tcp backend must be tcp:host:port, got '" + descriptor + "'");
    int port = 0;
    try {
      port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::kInvalidArgument, "bad port in '" + descriptor + "'");
    }
    require(port > 0 && port < 65536, ErrorCode::kInvalidArgument, "bad port in '" + descriptor + "'");
    return TcpChannel::connect(rest.substr(0, colon), static_cast<std::uint16_t>(port));
  }
  fail(ErrorCode::kInvalidArgument, "backend must be 'cmd:...' or 'tcp:host:port', got '" + descriptor + "'");
}

nlohmann::json encode_vector(std::span<const double> values) {
  return nlohmann::json(std::vector<double>(values.begin(), values.end()));
}

nlohmann::json encode_matrix(const std::vector<std::vector<double>>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) out.push_back(encode_vector(r));
  return out;
}

std::string error_reply(const nlohmann::json& id, std::string_view code, std::string_view message) {
  nlohmann::json reply = {{"error", {{"code", code}, {"message", message}}}};
  if (!id.is_null()) reply["id"] = id;
  return reply.dump();
}

BackendSession::BackendSession(std::unique_ptr<Channel> channel) : channel_(std::move(channel)) {
  require(channel_ != nullptr, ErrorCode::kInvalidArgument, "null backend channel");
  channel_->send_line(nlohmann::json{{"op", "hello"}, {"proto", kProtocolVersion}}.dump());
  nlohmann::json hello;
  try {
    hello = nlohmann::json::parse(channel_->receive_line());
    if (hello.contains("error")) {
      throw BackendError(hello["error"].value("code", "unknown"), hello["error"].value("message", ""));
    }
    require(hello.at("op") == "hello", ErrorCode::kProtocol, "handshake reply is not hello");
    const auto dim = hello.at("embedding_dim").get<std::int64_t>();
    require(dim >= 1, ErrorCode::kProtocol, "handshake embedding_dim must be >= 1");
    embedding_dim_ = static_cast<std::size_t>(dim);
    for (const auto& c : hello.at("capabilities")) capabilities_.insert(c.get<std::string>());
    fingerprint_ = hello.at("fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kProtocol, std::string("malformed handshake: ") + e.what());
  }
}

void BackendSession::require_capability(const char* op) const {
  if (!supports(op)) fail(ErrorCode::kBackend, std::string("backend does not support '") + op + "'");
}

nlohmann::json BackendSession::call(const char* op, nlohmann::json request) {
  require_capability(op);
  const std::int64_t id = next_id_++;
  request["id"] = id;
  request["op"] = op;
  channel_->send_line(request.dump());
  nlohmann::json reply;
  try {
    reply = nlohmann::json::parse(channel_->receive_line());
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kProtocol, std::string("reply to '") + op + "' is not JSON: " + e.what());
  }
  require(reply.is_object() && reply.contains("id") && reply["id"] == id, ErrorCode::kProtocol,
          std::string("reply to '") + op + "' does not echo id " + std::to_string(id));
  if (reply.contains("error")) {
    const auto& err = reply["error"];
    throw BackendError(err.value("code", "unknown"),
                       std::string(op) + ": " + err.value("message", "backend error"));
  }
  return reply;
}

std::vector<double> BackendSession::read_vector(const nlohmann::json& value, const char* what) const {
  std::vector<double> out;
  try {
    out = value.get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::kProtocol, std::string(what) + " is not a numeric array");
  }
  if (out.size() != embedding_dim_) {
    fail(ErrorCode::kProtocol, std::string(what) + " has length " + std::to_string(out.size()) +
                                   ", handshake dim is " + std::to_string(embedding_dim_));
  }
  for (double x : out) require(std::isfinite(x), ErrorCode::kProtocol, std::string(what) + " is not finite");
  return out;
}

std::vector<std::vector<double>> BackendSession::read_matrix(const nlohmann::json& value,
                                                             const char* what) const {
  require(value.is_array(), ErrorCode::kProtocol, std::string(what) + " is not an array");
  std::vector<std::vector<double>> out;
  for (const auto& row : value) out.push_back(read_vector(row, what));
  return out;
}

std::vector<std::string> BackendSession::generate(const std::vector<std::string>& prompts,
                                                  const std::optional<std::string>& style_word) {
  nlohmann::json req = {{"prompts", prompts}};
  if (style_word) req["style_word"] = *style_word;
  auto reply = call(op::kGenerate, std::move(req));
  ++calls_.generate;
  std::vector<std::string> texts;
  try {
    texts = reply.at("texts").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kProtocol, std::string("generate reply: ") + e.what());
  }
  require(texts.size() == prompts.size(), ErrorCode::kProtocol,
          "generate returned " + std::to_string(texts.size()) + " texts for " +
              std::to_string(prompts.size()) + " prompts");
  return texts;
}

EmbeddingVector BackendSession::shift_embed(const std::string& instruction,
                                            std::span<const ResponsePair> pairs) {
  nlohmann::json encoded = nlohmann::json::array();
  for (const auto& p : pairs) {
    encoded.push_back({{"prompt", p.prompt}, {"base", p.base_response}, {"personalized", p.personalized_response}});
  }
  auto reply = call(op::kShiftEmbed, {{"instruction", instruction}, {"pairs", std::move(encoded)}});
  ++calls_.shift_embed;
  require(reply.contains("vector"), ErrorCode::kProtocol, "shift_embed reply has no vector");
  return EmbeddingVector(read_vector(reply["vector"], "shift_embed vector"));
}

std::vector<Candidate> BackendSession::candidates(const EmbeddingVector& v, std::size_t limit) {
  auto reply = call(op::kCandidates, {{"vector", encode_vector(v.values())}, {"limit", limit}});
  ++calls_.candidates;
  std::vector<Candidate> out;
  try {
    for (const auto& w : reply.at("words")) {
      out.push_back({w.at("word").get<std::string>(), w.at("probability").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kProtocol, std::string("candidates reply: ") + e.what());
  }
  return out;
}

EmbeddingVector BackendSession::word_vector(const std::vector<std::vector<double>>& prefix,
                                            const std::string& word,
                                            const std::vector<std::vector<double>>& suffix) {
  auto reply = call(op::kWordVector,
                    {{"prefix", encode_matrix(prefix)}, {"word", word}, {"suffix", encode_matrix(suffix)}});
  ++calls_.word_vector;
  require(reply.contains("vector"), ErrorCode::kProtocol, "word_vector reply has no vector");
  return EmbeddingVector(read_vector(reply["vector"], "word_vector vector"));
}

GradReply BackendSession::grad_word_vector(const std::vector<std::vector<double>>& prefix,
                                           const std::string& word,
                                           const std::vector<std::vector<double>>& suffix,
                                           const std::vector<double>& target) {
  auto reply = call(op::kGradWordVector, {{"prefix", encode_matrix(prefix)},
                                          {"word", word},
                                          {"suffix", encode_matrix(suffix)},
                                          {"target", encode_vector(target)}});
  ++calls_.grad_word_vector;
  GradReply out;
  try {
    out.loss = reply.at("loss").get<double>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::kProtocol, "grad_word_vector reply has no numeric loss");
  }
  out.grad_prefix = read_matrix(reply.at("grad_prefix"), "grad_prefix");
  out.grad_suffix = read_matrix(reply.at("grad_suffix"), "grad_suffix");
  require(out.grad_prefix.size() == prefix.size() && out.grad_suffix.size() == suffix.size(),
          ErrorCode::kProtocol, "gradient shape does not match the soft prompt");
  return out;
}

std::vector<std::vector<double>> BackendSession::embed_tokens(const std::vector<std::string>& tokens) {
  auto reply = call(op::kEmbedTokens, {{"tokens", tokens}});
  ++calls_.embed_tokens;
  auto out = read_matrix(reply.at("vectors"), "embed_tokens vectors");
  require(out.size() == tokens.size(), ErrorCode::kProtocol, "embed_tokens returned the wrong count");
  return out;
}

void serve_stream(const LineHandler& handler, int in_fd, int out_fd) {
  std::string buffer;
  std::string line;
  while (read_line(in_fd, buffer, line)) {
    if (line.empty()) continue;
    std::string reply = handler(line);
    reply.push_back('\n');
    write_all(out_fd, reply, false);
  }
}

void serve_tcp(const std::function<LineHandler()>& make_handler, std::uint16_t port,
               const std::function<void(std::uint16_t)>& on_listening, std::size_t max_connections) {
  ::signal(SIGPIPE, SIG_IGN);
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) fail(ErrorCode::kIo, "socket() failed");
  int yes = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listener, 8) != 0) {
    ::close(listener);
    fail(ErrorCode::kIo, "cannot listen on port " + std::to_string(port));
  }
  socklen_t len = sizeof addr;
  ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
  if (on_listening) on_listening(ntohs(addr.sin_port));

  for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
    const int fd = ::accept(listener, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    try {
      const LineHandler handler = make_handler();
      std::string buffer;
      std::string line;
      while (read_line(fd, buffer, line)) {
        if (line.empty()) continue;
        std::string reply = handler(line);
        reply.push_back('\n');
        write_all(fd, reply, true);
      }
    } catch (const Error&) {
      // Peer vanished mid-reply; drop the connection and keep listening.
    }
    ::close(fd);
  }
  ::close(listener);
}

}  // namespace xpert::proto
