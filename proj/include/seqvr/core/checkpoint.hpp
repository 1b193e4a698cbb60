// Copyright 2026 seqvr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "seqvr/core/optim.hpp"

namespace seqvr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32; big-endian hosts are unsupported");

// Checkpoint file layout:
//   8 bytes  magic "SQVRCKPT"
//   u32      format version (1)
//   u32      header length in bytes
//   header   UTF-8 JSON: {"arch": ..., "extra": ..., "tensors": [{name, shape}...]}
//   payload  float32 little-endian arrays, concatenated in tensor order

struct Checkpoint {
  nlohmann::ordered_json arch;
  nlohmann::ordered_json extra;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.first == name) return &t.second;
    return nullptr;
  }
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["arch"] = ckpt.arch;
  header["extra"] = ckpt.extra;
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : ckpt.tensors)
    header["tensors"].push_back({{"name", t.first}, {"shape", t.second.shape()}});
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open checkpoint for writing: " + path);
  out.write("SQVRCKPT", 8);
  const std::uint32_t version = 1;
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.second.data()),
              static_cast<std::streamsize>(t.second.numel() * sizeof(float)));
  require(out.good(), "checkpoint write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, "SQVRCKPT", 8) == 0, "bad checkpoint magic: " + path);
  std::uint32_t version = 0, hlen = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  require(in.good() && version == 1, "unsupported checkpoint version in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  require(in.good(), "truncated checkpoint header: " + path);
  nlohmann::ordered_json header = nlohmann::ordered_json::parse(hs);

  Checkpoint ckpt;
  ckpt.arch = header.value("arch", nlohmann::ordered_json::object());
  ckpt.extra = header.value("extra", nlohmann::ordered_json::object());
  for (const auto& entry : header["tensors"]) {
    const std::string name = entry["name"].get<std::string>();
    const std::vector<int> shape = entry["shape"].get<std::vector<int>>();
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    require(in.good(), "truncated checkpoint payload at tensor " + name + " in " + path);
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

/// Serializes parameters (and, when given, optimizer moments + step counter)
/// as float32. T=float round-trips losslessly.
template <typename T>
Checkpoint snapshot_params(const ParamSet<T>& params, nlohmann::ordered_json arch,
                           const Optimizer<T>* opt = nullptr) {
  Checkpoint ckpt;
  ckpt.arch = std::move(arch);
  for (std::size_t i = 0; i < params.size(); ++i)
    ckpt.tensors.emplace_back(params.name(i), params.param(i).value().template cast<float>());
  if (opt != nullptr && opt->has_state()) {
    auto* mutable_opt = const_cast<Optimizer<T>*>(opt);
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.tensors.emplace_back("opt/m/" + params.name(i),
                                mutable_opt->moment1(i).template cast<float>());
      ckpt.tensors.emplace_back("opt/v/" + params.name(i),
                                mutable_opt->moment2(i).template cast<float>());
    }
  }
  ckpt.extra["step"] = opt != nullptr ? opt->step_count() : 0;
  return ckpt;
}

template <typename T>
void restore_params(const Checkpoint& ckpt, ParamSet<T>& params, Optimizer<T>* opt = nullptr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<float>* t = ckpt.find(params.name(i));
    require(t != nullptr, "checkpoint is missing parameter " + params.name(i));
    require(t->shape() == params.param(i).value().shape(),
            "checkpoint shape mismatch for " + params.name(i));
    params.param(i).mutable_value() = t->template cast<T>();
  }
  if (opt != nullptr && opt->has_state()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<float>* m = ckpt.find("opt/m/" + params.name(i));
      const Tensor<float>* v = ckpt.find("opt/v/" + params.name(i));
      require(m != nullptr && v != nullptr,
              "checkpoint lacks optimizer state for " + params.name(i));
      opt->moment1(i) = m->template cast<T>();
      opt->moment2(i) = v->template cast<T>();
    }
    opt->set_step_count(ckpt.extra.value("step", std::int64_t(0)));
  }
}

/// Fails when the stored architecture header differs from the expected one.
inline void validate_arch(const Checkpoint& ckpt, const nlohmann::ordered_json& expected,
                          const std::string& path) {
  require(ckpt.arch == expected, "checkpoint architecture header mismatch in " + path +
                                     ": stored " + ckpt.arch.dump() + ", expected " +
                                     expected.dump());
}

}  // namespace seqvr
