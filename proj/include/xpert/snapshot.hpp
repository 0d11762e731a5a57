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

// Named f32 tensors and their on-disk container.
//
// File layout (all integers little-endian):
//   "XPERTSNAP\0"                      10-byte magic
//   u32 version = 1
//   u32 header_len
//   header JSON                         {name: {dtype, shape, offset, byte_len}}
//   payload                             raw f32 values, tensors in name order
//   u64 checksum                        FNV-1a 64 over header + payload

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xpert {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t element_count() const;
};

class TensorSnapshot {
 public:
  TensorSnapshot() = default;
  // Throws kInvalidArgument when a tensor's data length differs from its
  // shape product and kNonFinite on NaN/Inf.
  explicit TensorSnapshot(std::map<std::string, Tensor> tensors);

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t parameter_count() const;

  // FNV-1a 64 of the canonical header + payload, hex encoded.
  const std::string& fingerprint() const { return fingerprint_; }

  friend bool operator==(const TensorSnapshot& a, const TensorSnapshot& b) {
    return a.tensors_.size() == b.tensors_.size() && a.fingerprint_ == b.fingerprint_ &&
           a.bitwise_equal(b);
  }

 private:
  bool bitwise_equal(const TensorSnapshot& other) const;

  std::map<std::string, Tensor> tensors_;
  std::string fingerprint_;
};

std::string encode_snapshot(const TensorSnapshot& snapshot);
TensorSnapshot decode_snapshot(std::string_view bytes);

TensorSnapshot read_snapshot(const std::filesystem::path& path);
void write_snapshot(const TensorSnapshot& snapshot, const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
// Writes through a temporary sibling and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace xpert
