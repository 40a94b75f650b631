#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpf/adam.hpp"
#include "dpf/errors.hpp"
#include "dpf/tensor.hpp"

namespace dpf {

/// On-disk container: 8-byte magic, u32 format version, u64 JSON header
/// length, JSON header (names, shapes, optimizer hyperparameters, free-form
/// metadata), then all tensor payloads as little-endian 64-bit floats in
/// header order.
struct Checkpoint {
  std::string kind;                       // "dpf" or "baseline"
  std::map<std::string, Tensor> tensors;  // parameters by name
  std::optional<AdamState> adam;
  nlohmann::json meta;                    // model config, state scale, etc.
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'D', 'P', 'F', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void write_doubles(std::ostream& os, const std::vector<double>& d) {
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(d.data()),
           static_cast<std::streamsize>(d.size() * 8));
}

inline void read_doubles(std::istream& is, std::vector<double>& d) {
  is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
  if (!is) throw DataError("checkpoint: truncated tensor payload");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = detail::kCkptVersion;
  header["kind"] = ck.kind;
  header["meta"] = ck.meta;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) {
    params.push_back({{"name", name}, {"shape", t.shape}});
  }
  header["params"] = params;
  if (ck.adam) {
    const AdamState& a = *ck.adam;
    header["adam"] = {{"lr", a.lr},   {"beta1", a.beta1},         {"beta2", a.beta2},
                      {"eps", a.eps}, {"clip_norm", a.clip_norm}, {"t", a.t}};
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& [name, mv] : a.moments) {
      moments.push_back({{"name", name}, {"shape", mv.first.shape}});
    }
    header["adam_moments"] = moments;
  }
  std::string hs = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(detail::kCkptMagic, 8);
  std::uint32_t ver = detail::kCkptVersion;
  std::uint64_t hlen = hs.size();
  os.write(reinterpret_cast<const char*>(&ver), 4);
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ck.tensors) detail::write_doubles(os, t.data);
  if (ck.adam) {
    for (const auto& [name, mv] : ck.adam->moments) {
      detail::write_doubles(os, mv.first.data);
      detail::write_doubles(os, mv.second.data);
    }
  }
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  std::uint32_t ver = 0;
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&ver), 4);
  is.read(reinterpret_cast<char*>(&hlen), 8);
  if (ver != detail::kCkptVersion) {
    throw DataError("unsupported checkpoint version: " + std::to_string(ver));
  }
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw DataError("checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw DataError("checkpoint: bad header JSON");

  Checkpoint ck;
  ck.kind = header.value("kind", "");
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header["params"]) {
    std::vector<std::size_t> shape = e["shape"].get<std::vector<std::size_t>>();
    Tensor t = Tensor::zeros(shape);
    detail::read_doubles(is, t.data);
    ck.tensors.emplace(e["name"].get<std::string>(), std::move(t));
  }
  if (header.contains("adam")) {
    AdamState a;
    a.lr = header["adam"]["lr"];
    a.beta1 = header["adam"]["beta1"];
    a.beta2 = header["adam"]["beta2"];
    a.eps = header["adam"]["eps"];
    a.clip_norm = header["adam"]["clip_norm"];
    a.t = header["adam"]["t"];
    for (const auto& e : header["adam_moments"]) {
      std::vector<std::size_t> shape = e["shape"].get<std::vector<std::size_t>>();
      Tensor m = Tensor::zeros(shape);
      Tensor v = Tensor::zeros(shape);
      detail::read_doubles(is, m.data);
      detail::read_doubles(is, v.data);
      a.moments.emplace(e["name"].get<std::string>(), std::make_pair(std::move(m), std::move(v)));
    }
    ck.adam = std::move(a);
  }
  return ck;
}

}  // namespace dpf
