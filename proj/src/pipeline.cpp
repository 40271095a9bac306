#include "gridner/pipeline.hpp"

#include <json.hpp>

#include "gridner/utf8.hpp"

namespace gridner::pipeline {

using json = nlohmann::json;

std::string predictions_to_json(const std::vector<eval::PredictedEntity>& preds,
                                const std::u32string& text) {
  json arr = json::array();
  for (const auto& e : preds) {
    json o{{"start_idx", e.start},
           {"end_idx", e.end},
           {"type", std::string(type_name(e.type))},
           {"score", e.score}};
    if (e.start >= 0 && e.end < static_cast<int64_t>(text.size())) {
      o["entity"] = utf8_encode(text.substr(static_cast<size_t>(e.start),
                                            static_cast<size_t>(e.end - e.start + 1)));
    }
    arr.push_back(std::move(o));
  }
  return arr.dump(2);
}

}  // namespace gridner::pipeline
