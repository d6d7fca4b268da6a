#pragma once

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "psvit/model.hpp"

namespace psvit {

inline nlohmann::ordered_json config_to_json(const PsVitConfig& c) {
  nlohmann::ordered_json j;
  j["iterations"] = c.iterations;
  j["depth"] = c.depth;
  j["channels"] = c.channels;
  j["heads"] = c.heads;
  j["n"] = c.n;
  j["share_weights"] = c.share_weights;
  j["num_classes"] = c.num_classes;
  j["input_size"] = c.input_size;
  j["dropout"] = c.dropout;
  j["backbone"] = {{"stem_channels", c.backbone.stem_channels},
                   {"bottleneck_width", c.backbone.bottleneck_width},
                   {"block_out_channels", c.backbone.block_out_channels},
                   {"blocks", c.backbone.blocks},
                   {"toy_mode", c.backbone.toy_mode}};
  return j;
}

inline PsVitConfig config_from_json(const nlohmann::json& j) {
  PsVitConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.depth = j.value("depth", c.depth);
  c.channels = j.value("channels", c.channels);
  c.heads = j.value("heads", c.heads);
  c.n = j.value("n", c.n);
  c.share_weights = j.value("share_weights", c.share_weights);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.input_size = j.value("input_size", c.input_size);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    c.backbone.stem_channels = b.value("stem_channels", c.backbone.stem_channels);
    c.backbone.bottleneck_width = b.value("bottleneck_width", c.backbone.bottleneck_width);
    c.backbone.block_out_channels = b.value("block_out_channels", c.backbone.block_out_channels);
    c.backbone.blocks = b.value("blocks", c.backbone.blocks);
    c.backbone.toy_mode = b.value("toy_mode", c.backbone.toy_mode);
  }
  c.validate();
  return c;
}

namespace detail {

inline std::vector<std::pair<std::string, std::shared_ptr<Tensor>>> named_tensors(const Model& m) {
  std::vector<std::pair<std::string, std::shared_ptr<Tensor>>> out;
  for (const auto& e : m.store.entries()) out.emplace_back(e.path, e.tensor);
  for (const auto& b : m.buffers) out.push_back(b);
  return out;
}

inline void put_u32_le(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32_le(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

// File layout: "PSVT" magic, format version (u32 LE), JSON header length
// (u32 LE), UTF-8 JSON mapping parameter path -> {dtype, shape, offset,
// byte_length} with the config under "__config__", then raw little-endian
// f32 blobs concatenated in header order. Offsets are relative to the start
// of the blob section.
inline void save_checkpoint(const Model& m, const std::string& path) {
  auto tensors = detail::named_tensors(m);
  nlohmann::ordered_json header;
  header["__config__"] = config_to_json(m.cfg);
  size_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    const size_t bytes = tensor->size() * sizeof(float);
    header[name] = {{"dtype", "f32"}, {"shape", tensor->shape()}, {"offset", offset}, {"byte_length", bytes}};
    offset += bytes;
  }
  const std::string json_str = header.dump();

  std::string out;
  out.reserve(12 + json_str.size() + offset);
  out += "PSVT";
  detail::put_u32_le(out, kCheckpointVersion);
  detail::put_u32_le(out, static_cast<uint32_t>(json_str.size()));
  out += json_str;
  for (const auto& [name, tensor] : tensors) {
    const char* src = reinterpret_cast<const char*>(tensor->data());
    out.append(src, tensor->size() * sizeof(float));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Strict load into an existing model: every model tensor must be present in
// the file with a matching shape and vice versa; offenders are listed.
inline void load_checkpoint_into(Model& m, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 12 || buf.compare(0, 4, "PSVT") != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a PSVT checkpoint");
  }
  const uint32_t version = detail::get_u32_le(buf, 4);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const uint32_t json_len = detail::get_u32_le(buf, 8);
  if (buf.size() < 12 + static_cast<size_t>(json_len)) {
    throw std::runtime_error("checkpoint: truncated header in " + path);
  }
  nlohmann::json header = nlohmann::json::parse(buf.substr(12, json_len));
  const size_t blob_base = 12 + json_len;

  auto tensors = detail::named_tensors(m);
  std::vector<std::string> missing, unexpected, mismatched;
  for (const auto& [name, tensor] : tensors) {
    if (!header.contains(name)) {
      missing.push_back(name);
      continue;
    }
    const auto shape = header[name]["shape"].get<std::vector<int>>();
    if (shape != tensor->shape()) mismatched.push_back(name);
  }
  for (const auto& [key, val] : header.items()) {
    if (key == "__config__") continue;
    bool known = false;
    for (const auto& [name, tensor] : tensors) {
      if (name == key) {
        known = true;
        break;
      }
    }
    if (!known) unexpected.push_back(key);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint: strict load mismatch for " + path + ":";
    auto join = [&msg](const char* label, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string(" ") + label + " [";
      for (size_t i = 0; i < v.size(); ++i) msg += (i ? ", " : "") + v[i];
      msg += "]";
    };
    join("missing", missing);
    join("unexpected", unexpected);
    join("shape-mismatch", mismatched);
    throw std::invalid_argument(msg);
  }

  for (const auto& [name, tensor] : tensors) {
    const size_t off = header[name]["offset"].get<size_t>();
    const size_t bytes = header[name]["byte_length"].get<size_t>();
    if (bytes != tensor->size() * sizeof(float)) {
      throw std::runtime_error("checkpoint: byte length mismatch for " + name);
    }
    if (blob_base + off + bytes > buf.size()) {
      throw std::runtime_error("checkpoint: truncated blob for " + name + " in " + path);
    }
    std::memcpy(tensor->data(), buf.data() + blob_base + off, bytes);
    if (!tensor->all_finite()) {
      throw std::runtime_error("checkpoint: non-finite values in " + name + " from " + path);
    }
  }
}

// Rebuilds the model from the embedded config, then loads all tensors.
inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string head(12, '\0');
  f.read(head.data(), 12);
  if (f.gcount() < 12 || head.compare(0, 4, "PSVT") != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a PSVT checkpoint");
  }
  const uint32_t json_len = detail::get_u32_le(head, 8);
  std::string json_str(json_len, '\0');
  f.read(json_str.data(), json_len);
  if (f.gcount() < static_cast<std::streamsize>(json_len)) {
    throw std::runtime_error("checkpoint: truncated header in " + path);
  }
  nlohmann::json header = nlohmann::json::parse(json_str);
  if (!header.contains("__config__")) throw std::runtime_error("checkpoint: missing __config__ in " + path);
  Model m = build<float>(config_from_json(header["__config__"]), 0);
  load_checkpoint_into(m, path);
  return m;
}

}  // namespace psvit
