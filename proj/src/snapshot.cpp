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

#include "xpert/snapshot.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "xpert/error.hpp"
#include "xpert/hash.hpp"

namespace xpert {

namespace {

constexpr char kMagic[10] = {'X', 'P', 'E', 'R', 'T', 'S', 'N', 'A', 'P', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "snapshot payloads are memcpy'd and assume a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

std::string canonical_header(const std::map<std::string, Tensor>& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}, {"byte_len", bytes}};
    offset += bytes;
  }
  return header.dump();
}

std::uint64_t content_hash(const std::string& header, const std::map<std::string, Tensor>& tensors) {
  Fnv1a64 h;
  h.update(header);
  for (const auto& [name, t] : tensors) h.update(t.data.data(), t.data.size() * sizeof(float));
  return h.digest();
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

TensorSnapshot::TensorSnapshot(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {
  for (const auto& [name, t] : tensors_) {
    require(!name.empty(), ErrorCode::kInvalidArgument, "tensor name must be nonempty");
    for (auto d : t.shape) {
      require(d >= 0, ErrorCode::kInvalidArgument, "tensor '" + name + "' has a negative dim");
    }
    require(t.element_count() == t.data.size(), ErrorCode::kInvalidArgument,
            "tensor '" + name + "' data length does not match its shape");
    for (float x : t.data) {
      require(std::isfinite(x), ErrorCode::kNonFinite, "tensor '" + name + "' has a non-finite value");
    }
  }
  fingerprint_ = to_hex(content_hash(canonical_header(tensors_), tensors_));
}

const Tensor& TensorSnapshot::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) fail(ErrorCode::kNotFound, "no tensor named '" + name + "'");
  return it->second;
}

std::size_t TensorSnapshot::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.data.size();
  return n;
}

bool TensorSnapshot::bitwise_equal(const TensorSnapshot& other) const {
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape != b->second.shape ||
        a->second.data.size() != b->second.data.size()) {
      return false;
    }
    if (std::memcmp(a->second.data.data(), b->second.data.data(),
                    a->second.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::string encode_snapshot(const TensorSnapshot& snapshot) {
  const std::string header = canonical_header(snapshot.tensors());
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& [name, t] : snapshot.tensors()) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  put_u64(out, content_hash(header, snapshot.tensors()));
  return out;
}

TensorSnapshot decode_snapshot(std::string_view bytes) {
  constexpr std::size_t kFixed = sizeof kMagic + 4 + 4;
  require(bytes.size() >= kFixed + 8, ErrorCode::kFormat, "snapshot truncated before header");
  require(std::memcmp(bytes.data(), kMagic, sizeof kMagic) == 0, ErrorCode::kFormat,
          "snapshot magic mismatch");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, sizeof kMagic, 4));
  require(version == kVersion, ErrorCode::kFormat,
          "unsupported snapshot version " + std::to_string(version));
  const auto header_len = get_le(bytes, sizeof kMagic + 4, 4);
  require(bytes.size() >= kFixed + header_len + 8, ErrorCode::kFormat, "snapshot header truncated");

  const std::string_view header_text = bytes.substr(kFixed, header_len);
  const std::string_view payload = bytes.substr(kFixed + header_len, bytes.size() - kFixed - header_len - 8);
  // A readable header lets a short file be reported as truncated rather than
  // as a checksum failure.
  if (auto declared = nlohmann::json::parse(header_text, nullptr, false); declared.is_object()) {
    std::uint64_t total = 0;
    for (const auto& [name, entry] : declared.items()) {
      if (entry.is_object() && entry.contains("byte_len") && entry["byte_len"].is_number_unsigned()) {
        total += entry["byte_len"].get<std::uint64_t>();
      }
    }
    require(total <= payload.size(), ErrorCode::kFormat,
            "snapshot payload truncated: " + std::to_string(payload.size()) + " of " + std::to_string(total) +
                " bytes");
  }
  const std::uint64_t stored = get_le(bytes, bytes.size() - 8, 8);
  Fnv1a64 h;
  h.update(header_text).update(payload.data(), payload.size());
  require(h.digest() == stored, ErrorCode::kChecksum, "snapshot checksum mismatch");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("snapshot header is not valid JSON: ") + e.what());
  }
  require(header.is_object(), ErrorCode::kFormat, "snapshot header must be an object");

  std::map<std::string, Tensor> tensors;
  std::uint64_t expected_offset = 0;
  for (const auto& [name, entry] : header.items()) {
    try {
      require(entry.at("dtype") == "f32", ErrorCode::kFormat, "tensor '" + name + "' is not f32");
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto byte_len = entry.at("byte_len").get<std::uint64_t>();
      require(offset == expected_offset && offset + byte_len <= payload.size() &&
                  byte_len % sizeof(float) == 0,
              ErrorCode::kFormat, "tensor '" + name + "' has an invalid extent");
      t.data.resize(byte_len / sizeof(float));
      std::memcpy(t.data.data(), payload.data() + offset, byte_len);
      expected_offset += byte_len;
      tensors.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kFormat, "tensor '" + name + "' header entry: " + e.what());
    }
  }
  require(expected_offset == payload.size(), ErrorCode::kFormat, "snapshot payload has trailing bytes");
  try {
    return TensorSnapshot(std::move(tensors));
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, e.what());
  }
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(ErrorCode::kIo, "read failed for " + path.string());
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "rename to " + path.string() + " failed: " + ec.message());
}

TensorSnapshot read_snapshot(const std::filesystem::path& path) {
  return decode_snapshot(read_file_bytes(path));
}

void write_snapshot(const TensorSnapshot& snapshot, const std::filesystem::path& path) {
  write_file_atomic(path, encode_snapshot(snapshot));
}

}  // namespace xpert
