#pragma once

#include <string>
#include <vector>

#include "gridner/checkpoint.hpp"
#include "gridner/config.hpp"
#include "gridner/corpus.hpp"
#include "gridner/eval.hpp"
#include "gridner/model.hpp"
#include "gridner/train.hpp"

namespace gridner::pipeline {

// The MRC inputs concatenate fixed query strings; their characters are added
// to the vocabulary as pseudo-records so query tokens do not collapse to
// <unk>.
inline data::Vocab build_vocab_with_queries(
    const std::vector<data::SentenceRecord>& records, int min_freq = 1) {
  std::vector<data::SentenceRecord> extended = records;
  for (int t = 0; t < kNumEntityTypes; ++t) {
    data::SentenceRecord r;
    r.text = data::query_for(static_cast<EntityType>(t));
    extended.push_back(std::move(r));
  }
  return data::build_vocab(extended, min_freq);
}

template <typename S>
struct EvalRun {
  eval::MetricsReport report;
  std::vector<std::vector<eval::PredictedEntity>> predictions;
};

template <typename S>
EvalRun<S> evaluate_records(const std::vector<data::SentenceRecord>& records,
                            const nn::ParamStore<S>& params,
                            const data::Vocab& vocab, const ModelConfig& cfg) {
  EvalRun<S> run;
  run.predictions.resize(records.size());
  eval::DecodeDiag diag;
  data::TruncationReport trunc;
  for (size_t i = 0; i < records.size(); ++i) {
    run.predictions[i] =
        eval::predict(records[i], params, vocab, cfg, &trunc, &diag);
  }
  run.report = eval::evaluate(eval::pred_triples(run.predictions),
                              eval::gold_triples(records));
  run.report.truncation = trunc;
  run.report.off_query_cells = diag.off_query_cells;
  return run;
}

inline std::u32string vocab_u32(const data::Vocab& vocab) {
  return std::u32string(vocab.chars().begin(), vocab.chars().end());
}

inline data::Vocab vocab_from_meta(const train::CheckpointMeta& meta) {
  return data::Vocab::from_chars(
      std::vector<char32_t>(meta.vocab_chars.begin(), meta.vocab_chars.end()));
}

template <typename S>
train::CheckpointMeta make_meta(const ModelConfig& cfg, const data::Vocab& vocab,
                                int64_t step, double dev_metric) {
  train::CheckpointMeta meta;
  meta.dtype = sizeof(S) == 8 ? "f64" : "f32";
  meta.model_config = cfg;
  meta.vocab_chars = vocab_u32(vocab);
  meta.vocab_hash = vocab.hash();
  meta.step = step;
  meta.dev_metric = dev_metric;
  return meta;
}

// JSON lines for cmd_predict output: [{"start":..,"end":..,"type":..,
// "score":..,"entity":..}, ...].
std::string predictions_to_json(const std::vector<eval::PredictedEntity>& preds,
                                const std::u32string& text);

}  // namespace gridner::pipeline
