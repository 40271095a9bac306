#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gridner/corpus.hpp"
#include "gridner/model.hpp"
#include "gridner/types.hpp"

namespace gridner::eval {

struct PredictedEntity {
  int64_t start = 0;  // sentence character offsets, inclusive
  int64_t end = 0;
  EntityType type = EntityType::kBod;
  double score = 0.0;
};

struct Triple {
  int64_t start = 0;
  int64_t end = 0;
  int type = 0;
  auto operator<=>(const Triple&) const = default;
};

inline Triple to_triple(const PredictedEntity& e) {
  return {e.start, e.end, static_cast<int>(e.type)};
}
inline Triple to_triple(const data::EntityAnnotation& e) {
  return {e.start_idx, e.end_idx, static_cast<int>(e.type)};
}

struct DecodeDiag {
  // cells whose argmax is an entity class other than the queried one
  int64_t off_query_cells = 0;
};

// Argmax decode of one instance grid (ties -> lowest class index). Keeps a
// cell iff the winner is the instance's queried class, maps back to sentence
// offsets, deduplicates identical triples keeping the max score.
std::vector<PredictedEntity> decode_grid(const std::vector<double>& probs,
                                         int64_t n, int64_t n_classes,
                                         const data::MrcInstance& inst,
                                         int64_t positive_class = -1,
                                         DecodeDiag* diag = nullptr);

// All nine queries on one record, union of the decoded spans.
template <typename S>
std::vector<PredictedEntity> predict(const data::SentenceRecord& record,
                                     const nn::ParamStore<S>& params,
                                     const data::Vocab& vocab,
                                     const ModelConfig& cfg,
                                     data::TruncationReport* trunc = nullptr,
                                     DecodeDiag* diag = nullptr) {
  std::map<Triple, double> best;
  for (int t = 0; t < kNumEntityTypes; ++t) {
    auto inst = data::build_instance(record, static_cast<EntityType>(t), vocab,
                                     cfg.max_len, 0, trunc, cfg.binary_grid);
    diff::Tape<S> tape;
    diff::NoGradGuard<S> guard(tape);
    auto grid = nn::forward(tape, inst, params, cfg, false, nullptr);
    std::vector<double> probs(grid.probs->value.begin(),
                              grid.probs->value.end());
    for (const auto& e :
         decode_grid(probs, inst.n(), cfg.n_classes, inst,
                     cfg.positive_class(inst.type_id), diag)) {
      auto [it, inserted] = best.emplace(to_triple(e), e.score);
      if (!inserted && e.score > it->second) it->second = e.score;
    }
  }
  std::vector<PredictedEntity> out;
  out.reserve(best.size());
  for (const auto& [tr, score] : best) {
    out.push_back({tr.start, tr.end, static_cast<EntityType>(tr.type), score});
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MicroMetrics {
  int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

// Exact (start,end,type) set matching pooled over the corpus; empty
// denominators yield 0 by convention.
MicroMetrics micro_metrics(const std::vector<std::vector<Triple>>& preds,
                           const std::vector<std::vector<Triple>>& golds);

struct PerTypeReport {
  std::array<MicroMetrics, kNumEntityTypes> rows;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  // types with neither gold nor predicted entities; excluded from the macro
  // average and footnoted in the rendering
  std::vector<int> absent_types;
};

PerTypeReport per_type_report(const std::vector<std::vector<Triple>>& preds,
                              const std::vector<std::vector<Triple>>& golds);

struct ConfusionReport {
  // matrix[pred_type][gold_type], exact-boundary matches only
  std::array<std::array<int64_t, kNumEntityTypes>, kNumEntityTypes> matrix{};
  int64_t unmatched_predictions = 0;  // no gold span with the same boundaries
  int64_t unmatched_golds = 0;        // no prediction with the same boundaries
};

ConfusionReport confusion_matrix(const std::vector<std::vector<Triple>>& preds,
                                 const std::vector<std::vector<Triple>>& golds);

struct SubsetRecall {
  int64_t recognized = 0;
  int64_t total = 0;
  bool defined() const { return total > 0; }
  double recall() const {
    return total > 0 ? static_cast<double>(recognized) /
                           static_cast<double>(total)
                     : 0.0;
  }
};

// Exact-match recall on gold subsets: Flat = neither contains nor is
// contained; Inner = strictly contained in another gold; Outer = strictly
// contains another gold; Nested = Inner u Outer.
struct NestedFlatReport {
  SubsetRecall all, flat, nested, inner, outer;
};

NestedFlatReport nested_flat_report(
    const std::vector<std::vector<Triple>>& preds,
    const std::vector<std::vector<Triple>>& golds);

struct MetricsReport {
  MicroMetrics micro;
  PerTypeReport per_type;
  ConfusionReport confusion;
  NestedFlatReport nested_flat;
  data::TruncationReport truncation;
  int64_t off_query_cells = 0;
};

MetricsReport evaluate(const std::vector<std::vector<Triple>>& preds,
                       const std::vector<std::vector<Triple>>& golds);

// Deterministic renderings; config_echo_json (may be empty) is embedded for
// provenance. Percentages render with two decimals.
std::string report_to_json(const MetricsReport& report,
                           const std::string& config_echo_json = "");
std::string report_to_markdown(const MetricsReport& report);

std::vector<std::vector<Triple>> gold_triples(
    const std::vector<data::SentenceRecord>& records);

inline std::vector<std::vector<Triple>> pred_triples(
    const std::vector<std::vector<PredictedEntity>>& preds) {
  std::vector<std::vector<Triple>> out(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    out[i].reserve(preds[i].size());
    for (const auto& e : preds[i]) out[i].push_back(to_triple(e));
  }
  return out;
}

// Convenience used by dev evaluation during fine-tuning.
template <typename S>
MicroMetrics micro_for_records(const std::vector<data::SentenceRecord>& records,
                               const nn::ParamStore<S>& params,
                               const data::Vocab& vocab,
                               const ModelConfig& cfg) {
  std::vector<std::vector<Triple>> preds(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    for (const auto& e : predict(records[i], params, vocab, cfg)) {
      preds[i].push_back(to_triple(e));
    }
  }
  return micro_metrics(preds, gold_triples(records));
}

}  // namespace gridner::eval
