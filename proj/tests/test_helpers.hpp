#pragma once

#include <algorithm>
#include <set>
#include <tuple>
#include <vector>

#include "gridner/corpus.hpp"
#include "gridner/rng.hpp"
#include "gridner/types.hpp"

namespace gridner::testutil {

// Random synthetic sentence with possibly nested/overlapping entities.
// Characters come from a small CJK block so one char == one code point.
inline data::SentenceRecord make_random_record(Rng& rng, int64_t max_text_len = 24,
                                               int max_entities = 6) {
  data::SentenceRecord rec;
  const int64_t len = rng.uniform_int(1, max_text_len + 1);
  for (int64_t i = 0; i < len; ++i) {
    rec.text.push_back(static_cast<char32_t>(0x4E00 + rng.uniform_int(0, 40)));
  }
  const int64_t want = rng.uniform_int(0, max_entities + 1);
  std::set<std::tuple<int64_t, int64_t, int>> seen;
  for (int64_t k = 0; k < want; ++k) {
    const int64_t start = rng.uniform_int(0, len);
    const int64_t span = std::min<int64_t>(rng.uniform_int(1, 9), len - start);
    const int64_t end = start + span - 1;
    const int type = static_cast<int>(rng.uniform_int(0, kNumEntityTypes));
    if (!seen.insert({start, end, type}).second) continue;
    data::EntityAnnotation e;
    e.start_idx = start;
    e.end_idx = end;
    e.type = static_cast<EntityType>(type);
    e.surface = rec.text.substr(static_cast<size_t>(start),
                                static_cast<size_t>(span));
    rec.entities.push_back(std::move(e));
  }
  return rec;
}

// Gold label grid rendered as one-hot probabilities [n,n,C].
inline std::vector<double> gold_probs(const data::MrcInstance& inst,
                                      int64_t n_classes) {
  const int64_t n = inst.n();
  std::vector<double> probs(static_cast<size_t>(n * n * n_classes), 0.0);
  for (int64_t i = 0; i < n * n; ++i) {
    probs[static_cast<size_t>(i * n_classes + inst.label_grid[static_cast<size_t>(i)])] =
        1.0;
  }
  return probs;
}

}  // namespace gridner::testutil
