#pragma once

#include "crisp/common.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace crisp {

// Shared on-disk container: 4-byte magic, u32 version, u64 header length,
// JSON header (metadata plus tensor name/shape/offset table), then payload of
// little-endian 32-bit floats in row-major order.
//
// Magics: "CRLM" language model, "CRSA" sparse autoencoder, "CRLA" adapter.
inline constexpr uint32_t kContainerVersion = 1;

struct TensorContainer {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> order;  // write order, stable across runs
  std::map<std::string, Eigen::MatrixXf> tensors;

  void add(const std::string& name, const Eigen::MatrixXf& t) {
    if (!tensors.count(name)) order.push_back(name);
    tensors[name] = t;
  }
  const Eigen::MatrixXf& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("missing tensor: " + name);
    return it->second;
  }
};

void save_container(const std::string& path, const std::string& magic, const TensorContainer& c);
TensorContainer load_container(const std::string& path, const std::string& expected_magic);

template <class S>
Eigen::MatrixXf to_f32(const MatT<S>& m) {
  return m.template cast<float>();
}
template <class S>
MatT<S> from_f32(const Eigen::MatrixXf& m) {
  return m.cast<S>();
}

// FNV-1a over file bytes, used for pipeline stage skipping.
uint64_t hash_file(const std::string& path);
uint64_t hash_bytes(const std::string& bytes);

}  // namespace crisp
