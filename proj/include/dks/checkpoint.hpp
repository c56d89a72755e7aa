#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dks/model.hpp"

namespace dks {

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::string role;  // "backbone", "aux:<head id>" or "bn_running_stat"
  uint64_t byte_offset = 0;  // into the float32 blob
};

/// On disk: 8-byte magic, u64 little-endian manifest length, JSON manifest,
/// then a flat little-endian float32 blob. The manifest embeds the model
/// spec so a checkpoint alone is enough to rebuild and evaluate the network.
struct Checkpoint {
  ModelSpec spec;
  std::vector<CheckpointRecord> records;
  std::vector<float> blob;

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& r : records) n += shape_numel(r.shape);
    return n;
  }
};

inline constexpr char kCheckpointMagic[8] = {'D', 'K', 'S', 'C', 'K', 'P', 'T', '1'};

template <typename T>
Checkpoint checkpoint_from_model(MultiHeadModel<T>& model) {
  Checkpoint ck;
  ck.spec = model.spec();
  uint64_t offset = 0;
  for (auto& p : model.params()) {
    CheckpointRecord r;
    r.name = p.name;
    r.shape = p.tensor.shape();
    r.role = model.role_of(p);
    r.byte_offset = offset;
    for (T v : p.tensor.data()) ck.blob.push_back(static_cast<float>(v));
    offset += sizeof(float) * p.tensor.numel();
    ck.records.push_back(std::move(r));
  }
  return ck;
}

/// Copies checkpoint values into an already-built model. Every model
/// parameter must have a matching record (by name) of identical shape, and
/// every record must land in the model; anything else means the file does not
/// describe this network.
template <typename T>
void load_into_model(const Checkpoint& ck, MultiHeadModel<T>& model) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : ck.records) {
    if (!by_name.emplace(r.name, &r).second)
      throw IoError("checkpoint: duplicate record '" + r.name + "'");
  }
  auto params = model.params();
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IoError("checkpoint: missing record '" + p.name + "'");
    const CheckpointRecord& r = *it->second;
    if (r.shape != p.tensor.shape())
      throw IoError("checkpoint: record '" + p.name + "' has shape " + shape_str(r.shape) +
                    " but the model expects " + shape_str(p.tensor.shape()));
    int64_t n = p.tensor.numel();
    uint64_t start = r.byte_offset / sizeof(float);
    if (r.byte_offset % sizeof(float) != 0 || start + n > ck.blob.size())
      throw IoError("checkpoint: record '" + p.name + "' points outside the blob");
    auto dst = p.tensor.data_mut();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<T>(ck.blob[start + i]);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw IoError("checkpoint: record '" + by_name.begin()->first +
                  "' does not match any model parameter");
}

/// Drops every aux-branch record, keeping backbone weights byte-identical.
/// Idempotent: stripping twice yields the same file.
Checkpoint strip_checkpoint(const Checkpoint& ck);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Model-spec JSON round trip (also embedded in checkpoint manifests).
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

}  // namespace dks
