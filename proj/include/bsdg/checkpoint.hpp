// Parameter checkpoints: a JSON header (model spec, seed, step, tensor
// directory) followed by a little-endian float32 blob of every named tensor,
// the whole file guarded by a trailing CRC-32.
//
// Layout:
//   "BSCK" | version u16 = 1 | header_len u32 | header JSON (UTF-8) |
//   tensor values f32 LE, concatenated in directory order | crc32 u32
// The CRC covers every byte before it.
#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdg/dataset.hpp"
#include "bsdg/model.hpp"

namespace bsdg {

struct Checkpoint {
  ModelSpec spec;
  ModelParams<float> params;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

namespace detail_ckpt {

inline void put_f32le(std::string& s, float v) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  detail_ds::put_u32le(s, bits);
}

inline ParamSet<float>& set_for(ModelParams<float>& p, const std::string& partition) {
  if (partition == "theta") return p.theta;
  if (partition == "phi") return p.phi;
  if (partition == "omega") return p.omega;
  throw parse_error("checkpoint: unknown partition '" + partition + "'", 0);
}

}  // namespace detail_ckpt

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json dir = nlohmann::json::array();
  auto add = [&](const char* partition, const ParamSet<float>& set) {
    for (const auto& [name, t] : set.values) {
      nlohmann::json e;
      e["name"] = name;
      e["partition"] = partition;
      e["shape"] = t.shape();
      dir.push_back(e);
    }
  };
  add("theta", c.params.theta);
  add("phi", c.params.phi);
  add("omega", c.params.omega);

  nlohmann::json header;
  header["model"] = to_json(c.spec);
  header["seed"] = c.seed;
  header["step"] = c.step;
  header["tensors"] = dir;
  const std::string hj = header.dump();

  std::string out = "BSCK";
  detail_ds::put_u16le(out, 1);
  detail_ds::put_u32le(out, static_cast<std::uint32_t>(hj.size()));
  out += hj;
  auto dump_set = [&](const ParamSet<float>& set) {
    for (const auto& [name, t] : set.values)
      for (float v : t.values()) detail_ckpt::put_f32le(out, v);
  };
  dump_set(c.params.theta);
  dump_set(c.params.phi);
  dump_set(c.params.omega);
  detail_ds::put_u32le(out, crc32_ieee(reinterpret_cast<const unsigned char*>(out.data()),
                                       out.size()));
  return out;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  detail_ds::spew(path, serialize_checkpoint(c));
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail_ds::ByteReader r(bytes);
  char magic[4];
  r.need(4, "magic");
  std::memcpy(magic, r.p, 4);
  if (std::string(magic, 4) != "BSCK")
    throw parse_error("checkpoint: bad magic", 0);
  r.off = 4;
  const auto version = r.u16le("version");
  if (version != 1)
    throw parse_error("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto header_len = r.u32le("header length");
  r.need(header_len, "header");
  const std::string hj(reinterpret_cast<const char*>(r.p) + r.off, header_len);
  const std::size_t header_off = r.off;
  r.off += header_len;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hj);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("checkpoint: header is not valid JSON: ") + e.what(),
                      header_off);
  }

  Checkpoint c;
  try {
    c.spec = model_spec_from_json(header.at("model"));
    c.seed = header.at("seed").get<std::uint64_t>();
    c.step = header.at("step").get<std::uint64_t>();
    c.params.theta.partition = Partition::theta;
    c.params.phi.partition = Partition::phi;
    c.params.omega.partition = Partition::omega;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto partition = e.at("partition").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      Tensor<float> t(Shape(shape.begin(), shape.end()));
      for (auto& v : t.values()) {
        const auto bits = r.u32le("tensor values");
        std::memcpy(&v, &bits, sizeof(v));
      }
      auto& set = detail_ckpt::set_for(c.params, partition);
      if (!set.values.emplace(name, std::move(t)).second)
        throw parse_error("checkpoint: duplicate tensor '" + name + "'", header_off);
    }
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("checkpoint: malformed header field: ") + e.what(),
                      header_off);
  }

  const std::size_t body_end = r.off;
  const auto stored = r.u32le("checksum");
  const auto actual = crc32_ieee(r.p, body_end);
  if (stored != actual)
    throw parse_error("checkpoint: checksum mismatch", body_end);
  if (r.off != r.n)
    throw parse_error("checkpoint: trailing bytes after checksum", r.off);
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(detail_ds::slurp(path));
}

}  // namespace bsdg
