#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iqa/nn.hpp"

// Checkpoint directory layout: meta.txt (flat `key = value` lines, including
// format_version), tensors.bin (raw little-endian float32, concatenated), and
// index.csv (name,shape,offset,length with shape dims joined by 'x' and
// offset/length in bytes). Parameters and running-stat buffers both ship.

namespace iqa {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw DataError("checkpoints are little-endian only");
}

inline std::string shape_text(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out.empty() ? "1" : out;
}

inline Shape parse_shape_text(const std::string& text) {
  Shape s;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t next = text.find('x', pos);
    if (next == std::string::npos) next = text.size();
    s.push_back(parse_int(text.substr(pos, next - pos), "shape dim"));
    pos = next + 1;
  }
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir,
                            const NamedParams<float>& params,
                            const NamedBuffers<float>& buffers,
                            const std::map<std::string, std::string>& meta) {
  detail::require_little_endian();
  std::filesystem::create_directories(dir);
  auto p = [&](const char* f) {
    return (std::filesystem::path(dir) / f).string();
  };
  std::ofstream bin(p("tensors.bin"), std::ios::binary | std::ios::trunc);
  std::ofstream idx(p("index.csv"), std::ios::binary | std::ios::trunc);
  if (!bin || !idx) throw DataError("cannot write checkpoint in " + dir);
  idx << "name,shape,offset,length\n";
  int64_t offset = 0;
  auto dump = [&](const std::string& name, const Tensor<float>& t) {
    int64_t bytes = t.size() * static_cast<int64_t>(sizeof(float));
    bin.write(reinterpret_cast<const char*>(t.data().data()), bytes);
    idx << name << "," << detail::shape_text(t.shape()) << "," << offset
        << "," << bytes << "\n";
    offset += bytes;
  };
  for (const auto& [name, param] : params) dump(name, param->value);
  for (const auto& [name, buf] : buffers) dump(name, *buf);
  if (!bin || !idx) throw DataError("checkpoint write failed in " + dir);

  std::ofstream mt(p("meta.txt"), std::ios::binary | std::ios::trunc);
  if (!mt) throw DataError("cannot write checkpoint meta in " + dir);
  mt << "format_version = " << kCheckpointVersion << "\n";
  mt << "n_params = " << params.size() << "\n";
  mt << "n_buffers = " << buffers.size() << "\n";
  for (const auto& [k, v] : meta) mt << k << " = " << v << "\n";
  if (!mt) throw DataError("checkpoint meta write failed in " + dir);
}

inline std::map<std::string, std::string> read_checkpoint_meta(
    const std::string& dir) {
  auto path = (std::filesystem::path(dir) / "meta.txt").string();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint meta: " + path);
  std::map<std::string, std::string> meta;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t eq = line.find(" = ");
    if (eq == std::string::npos)
      throw DataError(path + " line " + std::to_string(line_no) +
                      ": want `key = value`");
    meta[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (!meta.count("format_version"))
    throw DataError("checkpoint meta missing format_version: " + path);
  int64_t version = parse_int(meta.at("format_version"), "format_version");
  if (version != kCheckpointVersion)
    throw DataError("checkpoint format_version " + std::to_string(version) +
                    " unsupported (want " +
                    std::to_string(kCheckpointVersion) + ")");
  return meta;
}

// Loads tensors into an existing model's registry; every archive entry must
// match a registered name and shape, and every parameter must be covered.
inline void load_checkpoint(const std::string& dir,
                            const NamedParams<float>& params,
                            const NamedBuffers<float>& buffers) {
  detail::require_little_endian();
  read_checkpoint_meta(dir);  // validates version
  auto p = [&](const char* f) {
    return (std::filesystem::path(dir) / f).string();
  };
  std::ifstream bin(p("tensors.bin"), std::ios::binary);
  if (!bin) throw DataError("cannot open " + p("tensors.bin"));
  bin.seekg(0, std::ios::end);
  int64_t blob_size = bin.tellg();

  std::map<std::string, Tensor<float>*> targets;
  for (const auto& [name, param] : params) targets[name] = &param->value;
  for (const auto& [name, buf] : buffers) targets[name] = buf;

  std::ifstream idx(p("index.csv"));
  if (!idx) throw DataError("cannot open " + p("index.csv"));
  std::string line;
  if (!std::getline(idx, line) || line != "name,shape,offset,length")
    throw DataError("bad checkpoint index header in " + dir);
  std::map<std::string, bool> loaded;
  int64_t line_no = 1;
  while (std::getline(idx, line)) {
    ++line_no;
    if (line.empty()) continue;
    size_t c1 = line.find(',');
    size_t c2 = line.find(',', c1 + 1);
    size_t c3 = line.find(',', c2 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos ||
        c3 == std::string::npos)
      throw DataError("bad checkpoint index row at line " +
                      std::to_string(line_no));
    std::string name = line.substr(0, c1);
    Shape shape = detail::parse_shape_text(line.substr(c1 + 1, c2 - c1 - 1));
    int64_t offset = parse_int(line.substr(c2 + 1, c3 - c2 - 1), "offset");
    int64_t length = parse_int(line.substr(c3 + 1), "length");
    auto it = targets.find(name);
    if (it == targets.end())
      throw DataError("checkpoint tensor `" + name +
                      "` has no matching model tensor");
    Tensor<float>& t = *it->second;
    if (t.shape() != shape)
      throw DataError("checkpoint tensor `" + name + "` shape " +
                      detail::shape_text(shape) + " does not match model " +
                      shape_str(t.shape()));
    if (length != t.size() * static_cast<int64_t>(sizeof(float)))
      throw DataError("checkpoint tensor `" + name + "` length mismatch");
    if (offset < 0 || offset + length > blob_size)
      throw DataError("checkpoint tensor `" + name +
                      "` offset/length outside tensors.bin (corrupt index)");
    bin.seekg(offset);
    bin.read(reinterpret_cast<char*>(t.data().data()), length);
    if (bin.gcount() != length)
      throw DataError("truncated read for checkpoint tensor `" + name + "`");
    loaded[name] = true;
  }
  for (const auto& [name, _] : targets)
    if (!loaded.count(name))
      throw DataError("checkpoint is missing tensor `" + name + "`");
}

}  // namespace iqa
