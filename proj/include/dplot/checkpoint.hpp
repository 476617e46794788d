// Copyright 2026 The dplot-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dplot/data.hpp"
#include "dplot/model.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

inline constexpr int kArchiveFormatVersion = 1;
inline constexpr std::size_t kArchiveAlignment = 64;

// One named float32 array of an archive. `block_index` is 0 for entries
// that do not belong to a network block.
struct ArchiveEntry {
  std::string name;
  std::string kind;
  std::size_t block_index = 0;
  Tensor<float> data;
};

// A directory holding `manifest` (JSON: format_version, kind, meta, tensor
// table with name/shape/block_index/offset_bytes/len_bytes/kind) and
// `params.bin` (little-endian float32 arrays, each starting at a multiple
// of 64 bytes, zero padded).
struct Archive {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveEntry> entries;

  const ArchiveEntry& at(const std::string& name) const;
};

void write_archive(const std::filesystem::path& dir, const Archive& archive);
// Throws FormatError on version mismatch, missing files, non-canonical
// offsets or lengths, and truncated or oversized blobs.
Archive read_archive(const std::filesystem::path& dir);

nlohmann::json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

// Parameters are stored under their model names, BN statistics as
// "<layer>.running_mean" / "<layer>.running_var". Doubles are narrowed.
template <class T>
void save_checkpoint(const BlockNet<T>& model, const std::filesystem::path& dir,
                     const nlohmann::json& meta = nlohmann::json::object());
template <class T>
BlockNet<T> load_checkpoint(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

void save_dataset(const ImageBatch& data, const std::filesystem::path& dir,
                  const nlohmann::json& meta = nlohmann::json::object());
ImageBatch load_dataset(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

}  // namespace dplot
