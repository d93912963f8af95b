// Copyright 2026 The UMKD Authors. All Rights Reserved.
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

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/backbone.hpp"

// Checkpoint layout (little-endian):
//   8 bytes   magic "UMKDCKPT"
//   u32       format version
//   u64       metadata length N
//   N bytes   JSON metadata: {"backbone": spec, "tensors": [{name, shape}], "extra": {...}}
//   payload   float64 values of each tensor, in metadata order
namespace umkd {

inline constexpr char kCheckpointMagic[8] = {'U', 'M', 'K', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::ordered_json spec_to_json(const BackboneSpec& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["stage_channels"] = s.stage_channels;
  j["num_classes"] = s.num_classes;
  j["input_resolution"] = {s.input_height, s.input_width};
  j["shallow_stage"] = s.shallow_stage;
  return j;
}

inline BackboneSpec spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.name = j.at("name").get<std::string>();
  s.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  s.num_classes = j.at("num_classes").get<int>();
  const auto res = j.at("input_resolution").get<std::vector<int>>();
  if (res.size() != 2) throw ConfigError("backbone '" + s.name + "': input_resolution must be [height, width]");
  s.input_height = res[0];
  s.input_width = res[1];
  s.shallow_stage = j.value("shallow_stage", 0);
  s.validate();
  return s;
}

struct CheckpointContents {
  nlohmann::json metadata;
  std::vector<NamedParam> tensors;
};

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedParam>& tensors,
                             const nlohmann::ordered_json& metadata_extra, const BackboneSpec* spec = nullptr) {
  nlohmann::ordered_json meta;
  if (spec) meta["backbone"] = spec_to_json(*spec);
  auto list = nlohmann::ordered_json::array();
  for (const auto& t : tensors) list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  meta["tensors"] = list;
  meta["extra"] = metadata_extra;
  const std::string text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("write_checkpoint: cannot open '" + path.string() + "'");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.tensor.values().data()),
              static_cast<std::streamsize>(t.tensor.values().size() * sizeof(double)));
  if (!out) throw IngestionError("write_checkpoint: write failed for '" + path.string() + "'");
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("read_checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IngestionError("read_checkpoint: '" + path.string() + "' is not a checkpoint");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw IngestionError("read_checkpoint: unsupported version " + std::to_string(version));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IngestionError("read_checkpoint: truncated metadata in '" + path.string() + "'");
  CheckpointContents c;
  c.metadata = nlohmann::json::parse(text);
  for (const auto& t : c.metadata.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IngestionError("read_checkpoint: truncated payload in '" + path.string() + "'");
    c.tensors.push_back({t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
  }
  return c;
}

/// Copies checkpointed values into `params` by name; every parameter must be present with the same shape.
inline void load_into(const CheckpointContents& c, const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    auto it = std::find_if(c.tensors.begin(), c.tensors.end(), [&](const NamedParam& t) { return t.name == p.name; });
    if (it == c.tensors.end()) throw IngestionError("checkpoint is missing tensor '" + p.name + "'");
    if (it->tensor.shape() != p.tensor.shape())
      throw IngestionError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->tensor.shape()) +
                           ", expected " + shape_str(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::copy(it->tensor.values().begin(), it->tensor.values().end(), dst.data().begin());
  }
}

inline void save_backbone(const std::filesystem::path& path, const Backbone& model,
                          const nlohmann::ordered_json& extra = nlohmann::ordered_json::object()) {
  write_checkpoint(path, model.parameters(), extra, &model.spec());
}

inline Backbone load_backbone(const std::filesystem::path& path) {
  auto c = read_checkpoint(path);
  if (!c.metadata.contains("backbone"))
    throw IngestionError("load_backbone: '" + path.string() + "' carries no backbone metadata");
  Backbone model(spec_from_json(c.metadata.at("backbone")), 0);
  load_into(c, model.parameters());
  return model;
}

}  // namespace umkd
