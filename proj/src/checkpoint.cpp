#include "xbridge/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "xbridge/metrics.hpp"

namespace xbridge {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'X', '2', 'I', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw std::runtime_error("checkpoint: unknown dtype '" + name + "'");
}

}  // namespace

std::vector<std::uint8_t> checkpoint_serialize(const Checkpoint& ck) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.arrays) {
    manifest.push_back({{"name", name},
                        {"dtype", dtype_name(t.dtype())},
                        {"shape", t.shape()},
                        {"offset", offset},
                        {"bytes", t.bytes().size()}});
    offset += t.bytes().size();
  }
  json header{{"config", ck.config_json.empty() ? json() : json::parse(ck.config_json)},
              {"step", ck.step},
              {"seed_state", ck.seed_state},
              {"arrays", manifest}};
  const std::string header_text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + header_text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, ck.version);
  put_u64(out, header_text.size());
  out.insert(out.end(), header_text.begin(), header_text.end());
  // Raw array payloads; this build runs on little-endian hardware, so the
  // in-memory layout already is the wire layout.
  for (const auto& [name, t] : ck.arrays) {
    const auto bytes = t.bytes();
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
    out.insert(out.end(), p, p + bytes.size());
  }
  return out;
}

void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  const auto bytes = checkpoint_serialize(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());

  if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  Checkpoint ck;
  ck.version = get_u32(raw.data() + 4);
  if (ck.version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(ck.version));
  }
  const std::uint64_t header_len = get_u64(raw.data() + 8);
  // Subtraction form: the sum 16 + header_len could wrap for a hostile file.
  if (header_len > raw.size() - 16) {
    throw std::runtime_error("checkpoint: truncated header in '" + path + "'");
  }

  json header;
  try {
    header = json::parse(raw.begin() + 16, raw.begin() + 16 + header_len);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  }
  try {
    if (!header.at("config").is_null()) ck.config_json = header.at("config").dump();
    ck.step = header.at("step").get<std::int64_t>();
    ck.seed_state = header.at("seed_state").get<std::uint64_t>();

    const std::uint8_t* payload = raw.data() + 16 + header_len;
    const std::uint64_t payload_size = raw.size() - 16 - header_len;
    for (const json& entry : header.at("arrays")) {
      const DType dt = parse_dtype(entry.at("dtype").get<std::string>());
      const Shape shape = entry.at("shape").get<Shape>();
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t bytes = entry.at("bytes").get<std::uint64_t>();
      Tensor t = Tensor::zeros(shape, dt);
      if (bytes != t.bytes().size()) {
        throw std::runtime_error("checkpoint: byte count disagrees with shape for '" +
                                 entry.at("name").get<std::string>() + "'");
      }
      if (bytes > payload_size || offset > payload_size - bytes) {
        throw std::runtime_error("checkpoint: truncated payload in '" + path + "'");
      }
      std::memcpy(t.bytes_mut().data(), payload + offset, bytes);
      ck.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

std::uint64_t checkpoint_hash(const Checkpoint& ck) {
  const auto bytes = checkpoint_serialize(ck);
  return metrics::fnv1a(bytes.data(), bytes.size());
}

}  // namespace xbridge
