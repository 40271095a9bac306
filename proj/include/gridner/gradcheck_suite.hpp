#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridner/config.hpp"
#include "gridner/corpus.hpp"

namespace gridner::diff {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

// Finite-difference checks for every diffcore op plus the end-to-end
// loss(forward(.)) on a 12-token instance with tiny dims. Runs at 64-bit.
// `only` filters rows by exact name when nonempty; include_model drops the
// (comparatively slow) end-to-end row when false.
std::vector<GradCheckRow> run_gradcheck_suite(uint64_t seed,
                                              const std::string& only = "",
                                              bool include_model = true);

// 12-token synthetic instance (2-token query, 7-token context) used by the
// end-to-end check and by tests.
data::MrcInstance make_tiny_instance();

// Matching tiny model config.
ModelConfig make_tiny_model_config();

}  // namespace gridner::diff
