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

#include "dplot/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "dplot/error.hpp"

namespace dplot {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest";
constexpr const char* kBlobName = "params.bin";

std::size_t align_up(std::size_t n) {
  return (n + kArchiveAlignment - 1) / kArchiveAlignment * kArchiveAlignment;
}

void put_f32_le(const float* src, std::size_t n, char* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(src[i]);
      for (int b = 0; b < 4; ++b) dst[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
  }
}

void get_f32_le(const char* src, std::size_t n, float* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      }
      dst[i] = std::bit_cast<float>(u);
    }
  }
}

template <class T>
Tensor<float> to_f32(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<float>();
  }
}

template <class T>
Tensor<T> from_f32(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

}  // namespace

const ArchiveEntry& Archive::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw FormatError("archive has no tensor '" + name + "'");
}

void write_archive(const fs::path& dir, const Archive& archive) {
  fs::create_directories(dir);
  json table = json::array();
  std::size_t offset = 0;
  for (const auto& e : archive.entries) {
    const std::size_t len = e.data.size() * sizeof(float);
    table.push_back({{"name", e.name},
                     {"shape", e.data.shape()},
                     {"block_index", e.block_index},
                     {"offset_bytes", offset},
                     {"len_bytes", len},
                     {"kind", e.kind}});
    offset = align_up(offset + len);
  }
  std::string blob(offset, '\0');
  std::size_t pos = 0;
  for (const auto& e : archive.entries) {
    put_f32_le(e.data.ptr(), e.data.size(), blob.data() + pos);
    pos = align_up(pos + e.data.size() * sizeof(float));
  }
  json manifest = {{"format_version", kArchiveFormatVersion},
                   {"kind", archive.kind},
                   {"meta", archive.meta},
                   {"blob", kBlobName},
                   {"blob_bytes", blob.size()},
                   {"alignment", kArchiveAlignment},
                   {"tensors", table}};
  {
    std::ofstream out(dir / kBlobName, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("cannot write " + (dir / kBlobName).string());
  }
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError("cannot write " + (dir / kManifestName).string());
}

Archive read_archive(const fs::path& dir) {
  std::ifstream min(dir / kManifestName);
  if (!min) throw FormatError("missing manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw FormatError(std::string("unparseable manifest: ") + e.what());
  }
  std::ifstream bin(dir / kBlobName, std::ios::binary);
  if (!bin) throw FormatError("missing " + std::string(kBlobName) + " in " + dir.string());
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Archive archive;
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kArchiveFormatVersion) {
      throw FormatError("format_version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kArchiveFormatVersion) + ")");
    }
    archive.kind = manifest.at("kind").get<std::string>();
    archive.meta = manifest.value("meta", json::object());
    std::size_t expected_offset = 0;
    for (const auto& row : manifest.at("tensors")) {
      ArchiveEntry e;
      e.name = row.at("name").get<std::string>();
      e.kind = row.at("kind").get<std::string>();
      e.block_index = row.at("block_index").get<std::size_t>();
      const Shape shape = row.at("shape").get<Shape>();
      const auto offset = row.at("offset_bytes").get<std::size_t>();
      const auto len = row.at("len_bytes").get<std::size_t>();
      if (len != shape_numel(shape) * sizeof(float)) {
        throw FormatError("tensor '" + e.name + "': len_bytes " + std::to_string(len) +
                          " does not match shape " + shape_str(shape));
      }
      if (offset != expected_offset) {
        throw FormatError("tensor '" + e.name + "': offset_bytes " + std::to_string(offset) +
                          " expected " + std::to_string(expected_offset));
      }
      if (offset + len > blob.size()) {
        throw FormatError("tensor '" + e.name + "' extends past the end of the blob");
      }
      e.data = Tensor<float>::uninitialized(shape);
      get_f32_le(blob.data() + offset, shape_numel(shape), e.data.ptr());
      expected_offset = align_up(offset + len);
      archive.entries.push_back(std::move(e));
    }
    if (blob.size() != expected_offset) {
      throw FormatError("blob is " + std::to_string(blob.size()) + " bytes, manifest describes " +
                        std::to_string(expected_offset));
    }
    if (manifest.contains("blob_bytes") &&
        manifest["blob_bytes"].get<std::size_t>() != blob.size()) {
      throw FormatError("blob_bytes does not match params.bin size");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return archive;
}

json arch_to_json(const ArchSpec& arch) {
  json blocks = json::array();
  for (const auto& b : arch.blocks) {
    blocks.push_back({{"kind", to_string(b.kind)},
                      {"in", b.in},
                      {"out", b.out},
                      {"stride", b.stride},
                      {"batchnorm", b.batchnorm}});
  }
  return {{"channels", arch.channels},
          {"height", arch.height},
          {"width", arch.width},
          {"blocks", blocks}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec arch;
  try {
    arch.channels = j.at("channels").get<std::size_t>();
    arch.height = j.at("height").get<std::size_t>();
    arch.width = j.at("width").get<std::size_t>();
    for (const auto& b : j.at("blocks")) {
      BlockSpec s;
      s.kind = parse_block_kind(b.at("kind").get<std::string>());
      s.in = b.at("in").get<std::size_t>();
      s.out = b.at("out").get<std::size_t>();
      s.stride = b.value("stride", std::size_t{1});
      s.batchnorm = b.value("batchnorm", true);
      arch.blocks.push_back(s);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed architecture: ") + e.what());
  }
  return arch;
}

template <class T>
void save_checkpoint(const BlockNet<T>& model, const fs::path& dir, const json& meta) {
  Archive a;
  a.kind = "checkpoint";
  a.meta = meta;
  a.meta["arch"] = arch_to_json(model.arch());
  const auto& info = model.param_info();
  for (std::size_t i = 0; i < info.size(); ++i) {
    a.entries.push_back({info[i].name, "param", info[i].block, to_f32(model.params()[i])});
  }
  const auto& layers = model.bn_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& st = model.bn_stats()[i];
    a.entries.push_back({layers[i].name + ".running_mean", "running_mean", layers[i].block,
                         to_f32(st.mean)});
    a.entries.push_back({layers[i].name + ".running_var", "running_var", layers[i].block,
                         to_f32(st.var)});
  }
  write_archive(dir, a);
}

template <class T>
BlockNet<T> load_checkpoint(const fs::path& dir, json* meta) {
  const Archive a = read_archive(dir);
  if (a.kind != "checkpoint") throw FormatError("archive kind '" + a.kind + "' is not a checkpoint");
  if (!a.meta.contains("arch")) throw FormatError("checkpoint manifest lacks an architecture");
  Rng rng(0);
  BlockNet<T> model = BlockNet<T>::build(arch_from_json(a.meta["arch"]), rng);
  const std::size_t expected = model.param_info().size() + 2 * model.bn_layers().size();
  if (a.entries.size() != expected) {
    throw FormatError("checkpoint has " + std::to_string(a.entries.size()) +
                      " tensors, architecture needs " + std::to_string(expected));
  }
  ParamImage<T> image = model.snapshot();
  std::map<std::string, const ArchiveEntry*> by_name;
  for (const auto& e : a.entries) by_name[e.name] = &e;
  const auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<float>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second->data.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(it->second->data.shape()) +
                        ", expected " + shape_str(shape));
    }
    return it->second->data;
  };
  for (std::size_t i = 0; i < image.params.size(); ++i) {
    image.params[i] = from_f32<T>(fetch(model.param_info()[i].name, image.params[i].shape()));
  }
  for (std::size_t i = 0; i < image.stats.size(); ++i) {
    const std::string& name = model.bn_layers()[i].name;
    image.stats[i].mean = from_f32<T>(fetch(name + ".running_mean", image.stats[i].mean.shape()));
    image.stats[i].var = from_f32<T>(fetch(name + ".running_var", image.stats[i].var.shape()));
  }
  model.restore(image);
  if (meta != nullptr) *meta = a.meta;
  return model;
}

template void save_checkpoint(const BlockNet<float>&, const fs::path&, const json&);
template void save_checkpoint(const BlockNet<double>&, const fs::path&, const json&);
template BlockNet<float> load_checkpoint(const fs::path&, json*);
template BlockNet<double> load_checkpoint(const fs::path&, json*);

void save_dataset(const ImageBatch& data, const fs::path& dir, const json& meta) {
  Archive a;
  a.kind = "dataset";
  a.meta = meta;
  Tensor<float> labels({data.size()});
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = static_cast<float>(data.labels[i]);
  a.entries.push_back({"images", "images", 0, data.images});
  a.entries.push_back({"labels", "labels", 0, std::move(labels)});
  write_archive(dir, a);
}

ImageBatch load_dataset(const fs::path& dir, json* meta) {
  const Archive a = read_archive(dir);
  if (a.kind != "dataset") throw FormatError("archive kind '" + a.kind + "' is not a dataset");
  ImageBatch out;
  out.images = a.at("images").data;
  const Tensor<float>& labels = a.at("labels").data;
  if (out.images.rank() != 4 || labels.size() != out.images.dim(0)) {
    throw FormatError("dataset images and labels disagree");
  }
  out.labels.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out.labels[i] = static_cast<int>(labels[i]);
  if (meta != nullptr) *meta = a.meta;
  return out;
}

}  // namespace dplot
