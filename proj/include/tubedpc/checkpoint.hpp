#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "TDPCKPT1"
//   bytes 8..15   header length H, uint64 little-endian
//   next H bytes  UTF-8 JSON header
//   remainder     payload of float64 little-endian values
//
// The header lists every array as {"name", "shape", "offset"} where offset is
// the byte offset into the payload, plus free-form "meta".

#include "models.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace tubedpc {

using json = nlohmann::json;

struct ArrayFile {
  std::vector<std::pair<std::string, Tensor>> arrays;
  json meta = json::object();

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return t;
    throw std::runtime_error("checkpoint has no array '" + name + "'");
  }
};

namespace detail {
inline constexpr char kMagic[8] = {'T', 'D', 'P', 'C', 'K', 'P', 'T', '1'};

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}
inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
}  // namespace detail

inline std::string encode_arrays(const ArrayFile& f) {
  json header;
  header["format"] = "tubedpc-arrays";
  header["version"] = 1;
  header["meta"] = f.meta;
  header["arrays"] = json::array();
  std::string payload;
  for (const auto& [name, t] : f.arrays) {
    header["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (double d : t.data()) detail::put_f64(payload, d);
  }
  std::string h = header.dump();
  std::string out(detail::kMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline ArrayFile decode_arrays(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kMagic, 8) != 0)
    throw std::runtime_error("not a tubedpc checkpoint");
  auto hlen = detail::get_u64(bytes.data() + 8);
  if (16 + hlen > bytes.size()) throw std::runtime_error("truncated checkpoint header");
  json header = json::parse(bytes.substr(16, hlen));
  const char* payload = bytes.data() + 16 + hlen;
  std::size_t payload_size = bytes.size() - 16 - hlen;
  ArrayFile f;
  f.meta = header.value("meta", json::object());
  for (const auto& a : header.at("arrays")) {
    auto shape = a.at("shape").get<ad::Shape>();
    auto off = a.at("offset").get<std::size_t>();
    auto n = ad::numel(shape);
    if (off + 8 * n > payload_size) throw std::runtime_error("truncated checkpoint payload");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(detail::get_u64(payload + off + 8 * i));
    f.arrays.emplace_back(a.at("name").get<std::string>(), Tensor(std::move(shape), std::move(v)));
  }
  return f;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

template <class Params>
void append_params(ArrayFile& f, const std::string& prefix, const Params& p) {
  p.visit([&](const std::string& name, const Tensor& t, bool) { f.arrays.emplace_back(prefix + name, t.detached()); });
}

template <class Params>
void load_params(const ArrayFile& f, const std::string& prefix, Params& p) {
  p.visit([&](const std::string& name, Tensor& t, bool) {
    const auto& src = f.get(prefix + name);
    if (src.shape() != t.shape())
      throw ShapeError("checkpoint array " + prefix + name + " has shape " + ad::to_string(src.shape()) +
                       ", expected " + ad::to_string(t.shape()));
    t = src;
  });
}

inline json to_json(const DynamicsConfig& c) {
  return {{"n_state", c.n_state}, {"n_aux", c.n_aux},   {"n_action", c.n_action}, {"width", c.width},
          {"blocks", c.blocks},   {"heads", c.heads},   {"ff_width", c.ff_width}, {"residual", c.residual}};
}

inline DynamicsConfig dynamics_config_from_json(const json& j) {
  DynamicsConfig c;
  c.n_state = j.value("n_state", c.n_state);
  c.n_aux = j.value("n_aux", c.n_aux);
  c.n_action = j.value("n_action", c.n_action);
  c.width = j.value("width", c.width);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  c.ff_width = j.value("ff_width", c.ff_width);
  c.residual = j.value("residual", c.residual);
  return c;
}

inline json to_json(const PolicyDims& d) {
  return {{"input_dim", d.input_dim}, {"hidden", d.hidden}, {"output_dim", d.output_dim}};
}

inline PolicyDims policy_dims_from_json(const json& j) {
  PolicyDims d;
  d.input_dim = j.at("input_dim").get<std::size_t>();
  d.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  d.output_dim = j.at("output_dim").get<std::size_t>();
  return d;
}

/// Trained controller bundle: policy, dynamics model and free-form metadata
/// (variant, tightening schedule, certificate, ...).
struct Checkpoint {
  std::string variant;
  PolicyParams policy;
  DynamicsParams dynamics;
  json meta = json::object();
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  ArrayFile f;
  f.meta = c.meta;
  f.meta["variant"] = c.variant;
  f.meta["policy"] = to_json(c.policy.dims());
  f.meta["dynamics"] = to_json(c.dynamics.config);
  append_params(f, "policy.", c.policy);
  append_params(f, "dynamics.", c.dynamics);
  return encode_arrays(f);
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  auto f = decode_arrays(bytes);
  Checkpoint c;
  c.variant = f.meta.at("variant").get<std::string>();
  c.policy = init_policy(0, policy_dims_from_json(f.meta.at("policy")));
  c.dynamics = init_dynamics(0, dynamics_config_from_json(f.meta.at("dynamics")));
  load_params(f, "policy.", c.policy);
  load_params(f, "dynamics.", c.dynamics);
  c.meta = f.meta;
  c.meta.erase("variant");
  c.meta.erase("policy");
  c.meta.erase("dynamics");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace tubedpc
