#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "csireid/errors.hpp"
#include "csireid/io.hpp"
#include "csireid/model.hpp"

namespace csireid {

// Checkpoint container:
//   magic "CSIM" | version u16 | hyperparameter JSON (u32 length + bytes) |
//   parameter count u32 | per parameter: name length u16 + UTF-8 name |
//   rank u8 | dims u32[rank] | f32 payload. All little-endian.
inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'I', 'M'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const TwoStreamModel& model, const std::string& path) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u16(out, kCheckpointVersion);
  const std::string hyper = model.cfg.to_json().dump();
  detail::put_u32(out, static_cast<std::uint32_t>(hyper.size()));
  out.append(hyper);

  const auto params = model.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(tensor.rank()));
    for (auto d : tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) detail::put_f32(out, static_cast<float>(v));
  }
  detail::write_file(path, out);
}

inline TwoStreamModel load_checkpoint(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::Reader r(buf, path);
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a model checkpoint (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("'" + path + "': unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t hyper_len = r.u32();
  const std::string hyper = r.bytes(hyper_len, "hyperparameter block");
  ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(hyper));
  TwoStreamModel model = TwoStreamModel::init(cfg, 0);

  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : model.parameters()) by_name.emplace(name, tensor);

  const std::uint32_t count = r.u32();
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len, "parameter name");
    const auto rank = static_cast<std::uint8_t>(r.bytes(1, "rank")[0]);
    Shape dims;
    for (std::uint8_t d = 0; d < rank; ++d) dims.push_back(static_cast<std::int64_t>(r.u32()));
    const auto numel = static_cast<std::size_t>(shape_numel(dims));
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError("'" + path + "': unknown parameter '" + name + "'");
    if (it->second.shape() != dims)
      throw FormatError("'" + path + "': parameter '" + name + "' has shape " + shape_str(dims) +
                        ", model expects " + shape_str(it->second.shape()));
    auto& dst = it->second.values_mut();
    for (std::size_t j = 0; j < numel; ++j) dst[j] = static_cast<double>(r.f32());
    ++loaded;
  }
  if (loaded != by_name.size())
    throw FormatError("'" + path + "': checkpoint holds " + std::to_string(loaded) +
                      " parameters, model needs " + std::to_string(by_name.size()));
  if (!r.at_end()) throw FormatError("'" + path + "': trailing bytes after parameter table");
  return model;
}

}  // namespace csireid
