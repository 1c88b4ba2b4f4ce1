#pragma once

// Checkpoint container:
//   bytes 0..3   magic "RRCK"
//   bytes 4..7   uint32 LE format version (1)
//   bytes 8..15  uint64 LE header length H
//   H bytes      JSON header: {"format_version", "model", "version",
//                "pooling", "param_count", "blocks": [{"name","rows","cols"}]}
//   then every block of "blocks", in order, as raw little-endian float32
//   values in row-major order with no padding between blocks.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/params.hpp"

namespace reasonrec {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'R', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointFormat = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},         {"heads", c.heads},       {"width", c.width},
          {"ff_width", c.ff_width},     {"vocab_size", c.vocab_size}, {"max_context", c.max_context},
          {"tau_sim", c.tau_sim},       {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.width = j.at("width").get<int>();
  c.ff_width = j.at("ff_width").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.tau_sim = j.at("tau_sim").get<double>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

struct CheckpointInfo {
  ModelConfig model;
  std::uint64_t version = 0;
  Pooling pooling = Pooling::kLast;
};

template <class T>
std::string encode_checkpoint(const PolicyParams<T>& params, Pooling pooling) {
  const auto& layout = params.layout();
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : layout.blocks) blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  const nlohmann::json header = {{"format_version", kCheckpointFormat},
                                 {"model", model_config_to_json(params.config())},
                                 {"version", params.version()},
                                 {"pooling", pooling_name(pooling)},
                                 {"param_count", layout.num_params},
                                 {"blocks", blocks}};
  const std::string hdr = header.dump();
  std::string out;
  out.append(kCheckpointMagic, 4);
  const std::uint32_t fmt = kCheckpointFormat;
  const std::uint64_t len = hdr.size();
  out.append(reinterpret_cast<const char*>(&fmt), 4);
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += hdr;
  std::vector<float> buf;
  for (const auto& b : layout.blocks) {
    buf.resize(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) buf[i] = static_cast<float>(params.data()[b.offset + i]);
    out.append(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
  }
  return out;
}

template <class T>
PolicyParams<T> decode_checkpoint(const std::string& bytes, CheckpointInfo* info = nullptr) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  std::uint32_t fmt = 0;
  std::uint64_t len = 0;
  std::memcpy(&fmt, bytes.data() + 4, 4);
  std::memcpy(&len, bytes.data() + 8, 8);
  if (fmt != kCheckpointFormat) throw std::runtime_error("checkpoint: unsupported format " + std::to_string(fmt));
  if (16 + len > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  const ModelConfig cfg = model_config_from_json(header.at("model"));
  PolicyParams<T> params(cfg);
  params.set_version(header.at("version").get<std::uint64_t>());
  const auto& layout = params.layout();
  const auto& blocks = header.at("blocks");
  if (blocks.size() != layout.blocks.size()) throw std::runtime_error("checkpoint: block count mismatch");
  std::size_t pos = 16 + len;
  std::vector<float> buf;
  for (std::size_t k = 0; k < layout.blocks.size(); ++k) {
    const auto& b = layout.blocks[k];
    if (blocks[k].at("name").get<std::string>() != b.name || blocks[k].at("rows").get<int>() != b.rows ||
        blocks[k].at("cols").get<int>() != b.cols)
      throw std::runtime_error("checkpoint: block '" + b.name + "' does not match the model layout");
    const std::size_t nbytes = b.size() * sizeof(float);
    if (pos + nbytes > bytes.size()) throw std::runtime_error("checkpoint: truncated block " + b.name);
    buf.resize(b.size());
    std::memcpy(buf.data(), bytes.data() + pos, nbytes);
    pos += nbytes;
    for (std::size_t i = 0; i < b.size(); ++i) params.data()[b.offset + i] = static_cast<T>(buf[i]);
  }
  if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  if (info) {
    info->model = cfg;
    info->version = params.version();
    info->pooling = parse_pooling(header.at("pooling").get<std::string>());
  }
  return params;
}

template <class T>
void save_checkpoint(const PolicyParams<T>& params, Pooling pooling, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(params, pooling);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <class T>
PolicyParams<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(bytes, info);
}

}  // namespace reasonrec
