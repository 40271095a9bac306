#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gridner/config.hpp"
#include "gridner/model.hpp"

namespace gridner::train {

// On-disk layout (all integers little-endian, documented in docs/formats.md):
//   magic "GRIDNER1"
//   u64 header length, then that many bytes of UTF-8 JSON
//   per parameter, in store order:
//     u64 name length, name bytes
//     u64 element count
//     raw element payload at the configured float width
inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'I', 'D',
                                             'N', 'E', 'R', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  int version = kCheckpointVersion;
  std::string dtype;  // "f64" or "f32"
  ModelConfig model_config;
  std::u32string vocab_chars;  // vocabulary characters in id order
  uint64_t vocab_hash = 0;
  int64_t step = 0;
  double dev_metric = -1.0;  // -1 when no dev evaluation happened
};

template <typename S>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, std::vector<S>>> tensors;
};

template <typename S>
void save_checkpoint(const std::string& path, const nn::ParamStore<S>& params,
                     const CheckpointMeta& meta);

// Throws IoError on bad magic/version/truncation and ConfigError when the
// file's float width differs from S.
template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path);

// Copies loaded tensors into the store. With an empty prefix the name sets
// must match exactly; with a prefix only matching names are required and
// copied (e.g. "encoder." to initialize from a pre-training checkpoint).
// Shape mismatches name the offending tensor.
template <typename S>
void apply_checkpoint(nn::ParamStore<S>& params,
                      const LoadedCheckpoint<S>& loaded,
                      const std::string& prefix = "");

}  // namespace gridner::train
