#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>

#include "duo/serde.hpp"

// DUO1 checkpoint format:
//   magic "DUO1"
//   UTF-8 manifest, one line per entry, blank-line terminated:
//     config <json>                      (model config, one line)
//     meta <json>                        (optional free-form metadata)
//     <name> f32 <d0>x<d1>... <offset> <length>
//   raw little-endian float payloads, offsets relative to the byte after
//   the blank line.

namespace duo {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  DuoConfig config;
  DuoParams<float> params;
  std::map<std::string, Tensor<float>> extras;  // e.g. router.layer{l}.W
  nlohmann::json meta;                          // optional, defaults to null
};

inline void save_checkpoint(const DuoParams<float>& params, const std::string& path,
                            const std::map<std::string, Tensor<float>>& extras = {},
                            const nlohmann::json& meta = nullptr) {
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  params.for_each([&](const std::string& n, const Tensor<float>& t) { entries.emplace_back(n, &t); });
  for (const auto& [n, t] : extras) entries.emplace_back(n, &t);

  std::ostringstream manifest;
  manifest << "config " << config_to_json(params.config).dump() << "\n";
  if (!meta.is_null()) manifest << "meta " << meta.dump() << "\n";
  std::uint64_t offset = 0;
  for (const auto& [n, t] : entries) {
    manifest << n << " f32 ";
    for (std::size_t i = 0; i < t->shape.size(); ++i) manifest << (i ? "x" : "") << t->shape[i];
    const std::uint64_t len = t->numel() * sizeof(float);
    manifest << " " << offset << " " << len << "\n";
    offset += len;
  }
  manifest << "\n";

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
  f.write("DUO1", 4);
  const std::string m = manifest.str();
  f.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [n, t] : entries)
    f.write(reinterpret_cast<const char*>(t->data.data()),
            static_cast<std::streamsize>(t->numel() * sizeof(float)));
  if (!f) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "DUO1")
    throw FormatError("checkpoint: bad magic in " + path);

  struct Entry {
    std::string name, dtype;
    std::vector<std::size_t> shape;
    std::uint64_t offset, length;
  };
  std::vector<Entry> entries;
  Checkpoint ck;
  bool have_config = false;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    if (name == "config") {
      std::string rest;
      std::getline(ls, rest);
      ck.config = config_from_json(nlohmann::json::parse(rest));
      have_config = true;
      continue;
    }
    if (name == "meta") {
      std::string rest;
      std::getline(ls, rest);
      ck.meta = nlohmann::json::parse(rest);
      continue;
    }
    Entry e;
    e.name = name;
    std::string shape;
    if (!(ls >> e.dtype >> shape >> e.offset >> e.length))
      throw FormatError("checkpoint: malformed manifest line: " + line);
    if (e.dtype != "f32") throw FormatError("checkpoint: unsupported dtype " + e.dtype);
    std::size_t pos = 0;
    while (pos < shape.size()) {
      std::size_t next = shape.find('x', pos);
      if (next == std::string::npos) next = shape.size();
      e.shape.push_back(std::stoull(shape.substr(pos, next - pos)));
      pos = next + 1;
    }
    if (numel_of(e.shape) * sizeof(float) != e.length)
      throw FormatError("checkpoint: length mismatch for tensor " + e.name);
    entries.push_back(std::move(e));
  }
  if (!have_config) throw FormatError("checkpoint: manifest missing config");

  const std::streampos payload_start = f.tellg();
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;

  auto read_tensor = [&](const Entry& e) {
    Tensor<float> t(e.shape);
    f.seekg(payload_start + static_cast<std::streamoff>(e.offset));
    f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(e.length));
    if (static_cast<std::uint64_t>(f.gcount()) != e.length)
      throw FormatError("checkpoint: truncated payload for tensor " + e.name);
    return t;
  };

  ck.params.config = ck.config;
  ck.params = init_params<float>(ck.config, 0);  // shapes only; data overwritten below
  std::vector<std::string> model_names;
  ck.params.for_each([&](const std::string& n, Tensor<float>& t) {
    model_names.push_back(n);
    auto it = by_name.find(n);
    if (it == by_name.end()) throw FormatError("checkpoint: manifest missing tensor " + n);
    if (it->second->shape != t.shape)
      throw FormatError("checkpoint: shape mismatch for tensor " + n + ": manifest " +
                        shape_str(it->second->shape) + " vs config " + shape_str(t.shape));
    t = read_tensor(*it->second);
  });
  for (const auto& e : entries) {
    if (std::find(model_names.begin(), model_names.end(), e.name) != model_names.end()) continue;
    ck.extras[e.name] = read_tensor(e);
  }
  return ck;
}

}  // namespace duo
