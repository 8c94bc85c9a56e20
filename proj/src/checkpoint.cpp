#include "crisp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace crisp {

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace {

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated container");
  return v;
}

}  // namespace

void save_container(const std::string& path, const std::string& magic, const TensorContainer& c) {
  if (magic.size() != 4) throw IoError("magic must be 4 bytes");

  nlohmann::json header;
  header["meta"] = c.meta;
  nlohmann::json table = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& name : c.order) {
    const auto& t = c.tensors.at(name);
    table.push_back({{"name", name},
                     {"shape", {t.rows(), t.cols()}},
                     {"offset", offset}});
    offset += uint64_t(t.size()) * 4;
  }
  header["tensors"] = table;
  const std::string hbytes = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write(magic.data(), 4);
  write_pod<uint32_t>(os, kContainerVersion);
  write_pod<uint64_t>(os, hbytes.size());
  os.write(hbytes.data(), std::streamsize(hbytes.size()));
  std::vector<float> row;
  for (const auto& name : c.order) {
    const auto& t = c.tensors.at(name);
    row.resize(size_t(t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) row[size_t(j)] = t(i, j);
      os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

TensorContainer load_container(const std::string& path, const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != expected_magic)
    throw IoError("bad magic in " + path + " (expected " + expected_magic + ")");
  const auto version = read_pod<uint32_t>(is);
  if (version != kContainerVersion) throw IoError("unsupported container version");
  const auto hlen = read_pod<uint64_t>(is);
  std::string hbytes(hlen, '\0');
  is.read(hbytes.data(), std::streamsize(hlen));
  if (!is) throw IoError("truncated header in " + path);
  const auto header = nlohmann::json::parse(hbytes);

  TensorContainer c;
  c.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const auto shape = entry.at("shape");
    Eigen::MatrixXf t(shape[0].get<Eigen::Index>(), shape[1].get<Eigen::Index>());
    std::vector<float> row(size_t(t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * 4));
      if (!is) throw IoError("truncated tensor " + name + " in " + path);
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = row[size_t(j)];
    }
    c.add(name, t);
  }
  return c;
}

uint64_t hash_bytes(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    const auto n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace crisp
