#include "gridner/checkpoint.hpp"

#include "gridner/checkpoint_peek.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "gridner/error.hpp"
#include "gridner/utf8.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace gridner::train {

using json = nlohmann::json;

namespace {

template <typename S>
const char* dtype_name() {
  if constexpr (sizeof(S) == 8) {
    return "f64";
  } else {
    return "f32";
  }
}

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& in, const std::string& what) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw IoError("checkpoint: truncated file while reading " + what);
  return v;
}

std::string meta_to_json(const CheckpointMeta& meta) {
  json j{{"version", meta.version},
         {"dtype", meta.dtype},
         {"model_config", json::parse(model_config_to_json(meta.model_config))},
         {"vocab", utf8_encode(meta.vocab_chars)},
         {"vocab_hash", meta.vocab_hash},
         {"step", meta.step},
         {"dev_metric", meta.dev_metric}};
  return j.dump();
}

CheckpointMeta meta_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint: corrupt header JSON: ") + e.what());
  }
  CheckpointMeta m;
  m.version = j.at("version").get<int>();
  m.dtype = j.at("dtype").get<std::string>();
  m.model_config = model_config_from_json(j.at("model_config").dump());
  m.vocab_chars = utf8_decode(j.at("vocab").get<std::string>());
  m.vocab_hash = j.at("vocab_hash").get<uint64_t>();
  m.step = j.at("step").get<int64_t>();
  m.dev_metric = j.at("dev_metric").get<double>();
  return m;
}

}  // namespace

template <typename S>
void save_checkpoint(const std::string& path, const nn::ParamStore<S>& params,
                     const CheckpointMeta& meta) {
  CheckpointMeta m = meta;
  m.version = kCheckpointVersion;
  m.dtype = dtype_name<S>();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::string header = meta_to_json(m);
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : params.items()) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<uint64_t>(t->numel()));
    out.write(reinterpret_cast<const char*>(t->value.data()),
              static_cast<std::streamsize>(t->value.size() * sizeof(S)));
  }
  if (!out) throw IoError("checkpoint: write failed: " + path);
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  const uint64_t header_len = read_u64(in, "header length");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("checkpoint: truncated header in " + path);

  LoadedCheckpoint<S> out;
  out.meta = meta_from_json(header);
  if (out.meta.version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(out.meta.version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  if (out.meta.dtype != dtype_name<S>()) {
    throw ConfigError("checkpoint: file width " + out.meta.dtype +
                      " does not match run width " + dtype_name<S>());
  }
  while (true) {
    uint64_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (in.gcount() == 0 && in.eof()) break;
    if (!in || in.gcount() != sizeof(name_len)) {
      throw IoError("checkpoint: truncated file while reading name length");
    }
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw IoError("checkpoint: truncated parameter name");
    const uint64_t count = read_u64(in, "element count of " + name);
    std::vector<S> payload(count);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(count * sizeof(S)));
    if (!in || static_cast<uint64_t>(in.gcount()) != count * sizeof(S)) {
      throw IoError("checkpoint: truncated payload of " + name);
    }
    out.tensors.emplace_back(std::move(name), std::move(payload));
  }
  return out;
}

template <typename S>
void apply_checkpoint(nn::ParamStore<S>& params,
                      const LoadedCheckpoint<S>& loaded,
                      const std::string& prefix) {
  std::set<std::string> expected;
  for (const auto& [name, t] : params.items()) {
    if (prefix.empty() || name.rfind(prefix, 0) == 0) expected.insert(name);
  }
  std::set<std::string> seen;
  for (const auto& [name, payload] : loaded.tensors) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    if (!expected.count(name)) {
      throw IoError("checkpoint: unknown parameter name \"" + name + "\"");
    }
    const auto& t = params.get(name);
    if (static_cast<uint64_t>(t->numel()) != payload.size()) {
      throw ConfigError("checkpoint: shape mismatch for \"" + name +
                        "\": expected " + std::to_string(t->numel()) +
                        " elements " + diff::shape_str(t->shape) + ", file has " +
                        std::to_string(payload.size()));
    }
    std::copy(payload.begin(), payload.end(), t->value.begin());
    seen.insert(name);
  }
  if (seen.size() != expected.size()) {
    for (const auto& name : expected) {
      if (!seen.count(name)) {
        throw IoError("checkpoint: missing parameter \"" + name + "\"");
      }
    }
  }
}

std::string peek_checkpoint_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  const uint64_t header_len = read_u64(in, "header length");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("checkpoint: truncated header in " + path);
  return meta_from_json(header).dtype;
}

template void save_checkpoint<float>(const std::string&,
                                     const nn::ParamStore<float>&,
                                     const CheckpointMeta&);
template void save_checkpoint<double>(const std::string&,
                                      const nn::ParamStore<double>&,
                                      const CheckpointMeta&);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);
template void apply_checkpoint<float>(nn::ParamStore<float>&,
                                      const LoadedCheckpoint<float>&,
                                      const std::string&);
template void apply_checkpoint<double>(nn::ParamStore<double>&,
                                       const LoadedCheckpoint<double>&,
                                       const std::string&);

}  // namespace gridner::train
