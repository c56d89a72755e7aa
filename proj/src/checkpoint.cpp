#include "dks/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

using nlohmann::json;

namespace dks {

namespace {

json stage_to_json(const StageSpec& st) {
  return json{{"channels", st.channels}, {"blocks", st.blocks}, {"stride", st.stride}};
}

StageSpec stage_from_json(const json& j) {
  StageSpec st;
  st.channels = j.at("channels").get<int64_t>();
  st.blocks = j.at("blocks").get<int64_t>();
  st.stride = j.at("stride").get<int64_t>();
  return st;
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) {
  json j;
  j["preset"] = spec.preset;
  j["in_channels"] = spec.in_channels;
  j["in_h"] = spec.in_h;
  j["in_w"] = spec.in_w;
  j["stem_channels"] = spec.stem_channels;
  j["stem_kernel"] = spec.stem_kernel;
  j["stem_stride"] = spec.stem_stride;
  j["num_classes"] = spec.num_classes;
  j["stages"] = json::array();
  for (const auto& st : spec.stages) j["stages"].push_back(stage_to_json(st));
  j["heads"] = json::array();
  for (const auto& h : spec.heads) {
    json hj;
    hj["id"] = h.id;
    hj["attach_after_stage"] = h.attach_after_stage;
    hj["stages"] = json::array();
    for (const auto& st : h.stages) hj["stages"].push_back(stage_to_json(st));
    j["heads"].push_back(hj);
  }
  return j.dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
  ModelSpec spec;
  try {
    json j = json::parse(text);
    spec.preset = j.at("preset").get<std::string>();
    spec.in_channels = j.at("in_channels").get<int64_t>();
    spec.in_h = j.at("in_h").get<int64_t>();
    spec.in_w = j.at("in_w").get<int64_t>();
    spec.stem_channels = j.at("stem_channels").get<int64_t>();
    spec.stem_kernel = j.at("stem_kernel").get<int64_t>();
    spec.stem_stride = j.at("stem_stride").get<int64_t>();
    spec.num_classes = j.at("num_classes").get<int64_t>();
    for (const auto& st : j.at("stages")) spec.stages.push_back(stage_from_json(st));
    for (const auto& hj : j.at("heads")) {
      HeadSpec h;
      h.id = hj.at("id").get<std::string>();
      h.attach_after_stage = hj.at("attach_after_stage").get<int64_t>();
      for (const auto& st : hj.at("stages")) h.stages.push_back(stage_from_json(st));
      spec.heads.push_back(std::move(h));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: bad model spec: ") + e.what());
  }
  validate_model_spec(spec);
  return spec;
}

Checkpoint strip_checkpoint(const Checkpoint& ck) {
  Checkpoint out;
  out.spec = strip_aux(ck.spec);
  uint64_t offset = 0;
  for (const auto& r : ck.records) {
    if (r.name.rfind("backbone.", 0) != 0) continue;
    CheckpointRecord nr = r;
    nr.byte_offset = offset;
    int64_t n = shape_numel(r.shape);
    uint64_t start = r.byte_offset / sizeof(float);
    if (start + n > ck.blob.size())
      throw IoError("checkpoint: record '" + r.name + "' points outside the blob");
    out.blob.insert(out.blob.end(), ck.blob.begin() + start, ck.blob.begin() + start + n);
    offset += sizeof(float) * n;
    out.records.push_back(std::move(nr));
  }
  return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  json manifest;
  manifest["version"] = 1;
  manifest["model"] = json::parse(model_spec_to_json(ck.spec));
  manifest["blob_bytes"] = ck.blob.size() * sizeof(float);
  manifest["records"] = json::array();
  for (const auto& r : ck.records) {
    json rj;
    rj["name"] = r.name;
    rj["shape"] = r.shape;
    rj["role"] = r.role;
    rj["byte_offset"] = r.byte_offset;
    manifest["records"].push_back(rj);
  }
  std::string text = manifest.dump();

  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot write '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  uint64_t len = text.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  // blob is little-endian float32; this writer assumes a little-endian host
  out.write(reinterpret_cast<const char*>(ck.blob.data()),
            static_cast<std::streamsize>(ck.blob.size() * sizeof(float)));
  if (!out) throw IoError("checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: '" + path + "' is not a checkpoint file (bad magic)");
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw IoError("checkpoint: '" + path + "' truncated before manifest");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(static_cast<uint8_t>(lenbuf[i])) << (8 * i);
  if (len > (1ull << 30)) throw IoError("checkpoint: implausible manifest length in '" + path + "'");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: '" + path + "' truncated inside manifest");

  Checkpoint ck;
  uint64_t blob_bytes = 0;
  try {
    json manifest = json::parse(text);
    if (manifest.at("version").get<int64_t>() != 1)
      throw IoError("checkpoint: unsupported version in '" + path + "'");
    ck.spec = model_spec_from_json(manifest.at("model").dump());
    blob_bytes = manifest.at("blob_bytes").get<uint64_t>();
    for (const auto& rj : manifest.at("records")) {
      CheckpointRecord r;
      r.name = rj.at("name").get<std::string>();
      r.shape = rj.at("shape").get<Shape>();
      r.role = rj.at("role").get<std::string>();
      r.byte_offset = rj.at("byte_offset").get<uint64_t>();
      ck.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("checkpoint: corrupt manifest in '" + path + "': " + e.what());
  }
  if (blob_bytes % sizeof(float) != 0)
    throw IoError("checkpoint: blob length not a multiple of 4 in '" + path + "'");

  ck.blob.resize(blob_bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(ck.blob.data()), static_cast<std::streamsize>(blob_bytes));
  if (!in) throw IoError("checkpoint: '" + path + "' truncated inside the blob");
  char extra;
  if (in.read(&extra, 1))
    throw IoError("checkpoint: trailing bytes after the blob in '" + path + "'");

  for (const auto& r : ck.records) {
    if (r.byte_offset % sizeof(float) != 0 ||
        r.byte_offset / sizeof(float) + shape_numel(r.shape) > ck.blob.size())
      throw IoError("checkpoint: record '" + r.name + "' points outside the blob in '" + path +
                    "'");
    for (int64_t d : r.shape)
      if (d <= 0) throw IoError("checkpoint: record '" + r.name + "' has a bad shape");
  }
  return ck;
}

}  // namespace dks
