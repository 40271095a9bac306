#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gridner/config.hpp"
#include "gridner/corpus.hpp"
#include "gridner/eval.hpp"
#include "gridner/model.hpp"

namespace gridner::train {

template <typename S>
struct OptimState {
  struct Moments {
    std::vector<S> m;
    std::vector<S> v;
  };
  std::unordered_map<std::string, Moments> moments;
  int64_t step = 0;
};

// Bias-corrected Adam over every parameter with a live grad buffer.
// Gradients are clipped by global norm first; encoder-group tensors use
// lr_encoder, everything else lr_heads. Optional linear warmup scales both.
template <typename S>
void adam_step(nn::ParamStore<S>& params, OptimState<S>& state,
               const TrainConfig& cfg) {
  double sq_norm = 0.0;
  for (const auto& [name, t] : params.items()) {
    if (t->grad.empty()) continue;
    for (S g : t->grad) {
      const double gv = static_cast<double>(g);
      if (!std::isfinite(gv)) {
        throw Error("adam_step: non-finite gradient in parameter \"" + name +
                    "\"");
      }
      sq_norm += gv * gv;
    }
  }
  const double norm = std::sqrt(sq_norm);
  const double clip_scale =
      (cfg.grad_clip_norm > 0 && norm > cfg.grad_clip_norm)
          ? cfg.grad_clip_norm / norm
          : 1.0;

  state.step += 1;
  const double t_step = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t_step);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t_step);
  const double warmup =
      cfg.warmup_steps > 0
          ? std::min(1.0, t_step / static_cast<double>(cfg.warmup_steps))
          : 1.0;

  for (const auto& [name, t] : params.items()) {
    if (t->grad.empty()) continue;
    auto& mom = state.moments[name];
    if (mom.m.size() != t->grad.size()) {
      mom.m.assign(t->grad.size(), S(0));
      mom.v.assign(t->grad.size(), S(0));
    }
    const double lr =
        (nn::is_encoder_param(name) ? cfg.lr_encoder : cfg.lr_heads) * warmup;
    for (size_t i = 0; i < t->grad.size(); ++i) {
      const double g = static_cast<double>(t->grad[i]) * clip_scale;
      const double m = cfg.adam_beta1 * static_cast<double>(mom.m[i]) +
                       (1.0 - cfg.adam_beta1) * g;
      const double v = cfg.adam_beta2 * static_cast<double>(mom.v[i]) +
                       (1.0 - cfg.adam_beta2) * g * g;
      mom.m[i] = static_cast<S>(m);
      mom.v[i] = static_cast<S>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      t->value[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

// ---------------------------------------------------------------------------
// masked-LM pre-training
// ---------------------------------------------------------------------------

struct MlmLog {
  std::vector<double> epoch_losses;
  int64_t steps = 0;
  int64_t skipped_sequences = 0;
};

namespace detail {

struct MaskedSeq {
  std::vector<int32_t> input;
  std::vector<int32_t> labels;
  std::vector<uint8_t> mask;
  int64_t selected = 0;
};

// 80% <mask>, 10% random character, 10% unchanged, over
// max(1, round(rate * #non-special)) positions.
inline MaskedSeq apply_mlm_mask(const std::vector<int32_t>& seq, double rate,
                                int64_t vocab_size, Rng& rng) {
  MaskedSeq out;
  out.input = seq;
  out.labels.assign(seq.size(), 0);
  out.mask.assign(seq.size(), 0);
  if (rate <= 0) return out;
  std::vector<int64_t> candidates;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] >= data::Vocab::kNumSpecials)
      candidates.push_back(static_cast<int64_t>(i));
  }
  if (candidates.empty()) return out;
  const int64_t k = std::max<int64_t>(
      1, std::llround(rate * static_cast<double>(candidates.size())));
  auto picks = rng.sample_without_replacement(
      static_cast<int64_t>(candidates.size()), k);
  for (int64_t pi : picks) {
    const size_t pos = static_cast<size_t>(candidates[static_cast<size_t>(pi)]);
    out.labels[pos] = seq[pos];
    out.mask[pos] = 1;
    ++out.selected;
    const double r = rng.next_double();
    if (r < 0.8) {
      out.input[pos] = data::Vocab::kMask;
    } else if (r < 0.9) {
      out.input[pos] = static_cast<int32_t>(
          rng.uniform_int(data::Vocab::kNumSpecials, vocab_size));
    }
  }
  return out;
}

}  // namespace detail

// Task-adaptive masked-LM pre-training of the encoder with a tied-embedding
// softmax head. Trains only the "encoder." parameter group (the rest of the
// network never enters the graph).
template <typename S>
MlmLog mlm_pretrain(const std::vector<std::vector<int32_t>>& sequences,
                    nn::ParamStore<S>& params, OptimState<S>& state,
                    const ModelConfig& mcfg, const TrainConfig& tcfg,
                    std::ostream* log = nullptr) {
  tcfg.validate();
  if (mcfg.vocab_size - data::Vocab::kNumSpecials < 2) {
    throw ConfigError(
        "mlm_pretrain: vocabulary must contain at least two non-special tokens");
  }
  MlmLog result;
  Rng shuffle_rng = Rng(tcfg.seed).stream("mlm.shuffle");
  Rng mask_rng = Rng(tcfg.seed).stream("mlm.mask");
  Rng drop_rng = Rng(tcfg.seed).stream("mlm.dropout");
  bool warned = false;

  std::vector<size_t> order(sequences.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < tcfg.mlm_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t counted = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(tcfg.batch_size)) {
      const size_t stop = std::min(order.size(),
                                   start + static_cast<size_t>(tcfg.batch_size));
      diff::Tape<S> tape;
      std::vector<diff::Tensor<S>> losses;
      for (size_t bi = start; bi < stop; ++bi) {
        const auto& seq = sequences[order[bi]];
        auto masked = detail::apply_mlm_mask(seq, tcfg.mlm_mask_rate,
                                             mcfg.vocab_size, mask_rng);
        if (masked.selected == 0) {
          ++result.skipped_sequences;
          if (!warned) {
            std::cerr << "warning: mlm_pretrain: sequence with no maskable "
                         "positions skipped (mask rate "
                      << tcfg.mlm_mask_rate << ")\n";
            warned = true;
          }
          continue;
        }
        auto layers = encode(tape, masked.input, params, mcfg, true, &drop_rng);
        auto logits = diff::matmul(tape, layers.back(),
                                   diff::permute(tape, params.get("encoder.tok_emb"),
                                                 {1, 0}));
        auto probs = diff::softmax(tape, logits, 1);
        losses.push_back(diff::masked_cross_entropy(tape, probs, masked.labels,
                                                    masked.mask));
      }
      if (losses.empty()) continue;
      auto batch_loss = diff::scale(tape, diff::reduce_sum(tape, diff::concat(tape, losses, 0)),
                                    1.0 / static_cast<double>(losses.size()));
      const double lv = static_cast<double>(batch_loss->value[0]);
      if (!std::isfinite(lv)) {
        throw Error("mlm_pretrain: non-finite loss in epoch " +
                    std::to_string(epoch));
      }
      params.zero_grads();
      tape.backward(batch_loss);
      adam_step(params, state, tcfg);
      ++result.steps;
      epoch_loss += lv * static_cast<double>(losses.size());
      counted += static_cast<int64_t>(losses.size());
    }
    const double avg = counted > 0 ? epoch_loss / static_cast<double>(counted)
                                   : std::numeric_limits<double>::quiet_NaN();
    result.epoch_losses.push_back(avg);
    if (log) {
      (*log) << "mlm epoch " << epoch << " loss " << avg << "\n";
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// supervised fine-tuning
// ---------------------------------------------------------------------------

struct EpochLog {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double dev_f1 = -1.0;  // -1 when not evaluated
};

template <typename S>
struct FinetuneResult {
  nn::ParamStore<S> best_params;
  double best_f1 = -1.0;
  int64_t best_epoch = -1;
  std::vector<EpochLog> log;
  int64_t epochs_run = 0;
  int64_t steps = 0;
  data::TruncationReport truncation;
};

// All 9 queries per sentence; negative (no-answer) instances are kept with
// probability negative_sample_rate.
inline std::vector<data::MrcInstance> build_training_instances(
    const std::vector<data::SentenceRecord>& records, const data::Vocab& vocab,
    const ModelConfig& mcfg, const TrainConfig& tcfg,
    data::TruncationReport* trunc = nullptr) {
  Rng neg_rng = Rng(tcfg.seed).stream("negsample");
  std::vector<data::MrcInstance> out;
  for (size_t ri = 0; ri < records.size(); ++ri) {
    for (int t = 0; t < kNumEntityTypes; ++t) {
      auto inst = data::build_instance(records[ri], static_cast<EntityType>(t),
                                       vocab, mcfg.max_len, 0, trunc,
                                       mcfg.binary_grid);
      inst.record_index = static_cast<int32_t>(ri);
      bool has_answer = false;
      for (uint8_t v : inst.label_grid) {
        if (v != 0) {
          has_answer = true;
          break;
        }
      }
      if (!has_answer && tcfg.negative_sample_rate < 1.0 &&
          !neg_rng.bernoulli(tcfg.negative_sample_rate)) {
        continue;
      }
      out.push_back(std::move(inst));
    }
  }
  return out;
}

// Epoch loop with seeded shuffling, per-batch Adam updates, per-epoch dev
// micro-F1, best-checkpoint retention and early stopping.
template <typename S>
FinetuneResult<S> finetune(const std::vector<data::SentenceRecord>& train_records,
                           const std::vector<data::SentenceRecord>& dev_records,
                           nn::ParamStore<S>& params, OptimState<S>& state,
                           const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const data::Vocab& vocab,
                           std::ostream* log = nullptr) {
  mcfg.validate();
  tcfg.validate();
  if (train_records.empty()) {
    throw DataError("finetune: train set must be nonempty");
  }
  FinetuneResult<S> result;
  auto instances = build_training_instances(train_records, vocab, mcfg, tcfg,
                                            &result.truncation);
  if (instances.empty()) {
    throw DataError("finetune: no training instances after sampling");
  }
  Rng shuffle_rng = Rng(tcfg.seed).stream("shuffle");
  Rng drop_rng = Rng(tcfg.seed).stream("dropout");
  if (dev_records.empty()) {
    std::cerr << "warning: finetune: empty dev set, evaluation skipped; the "
                 "final parameters are returned\n";
  }

  std::vector<size_t> order(instances.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int64_t evals_since_best = 0;
  for (int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t counted = 0;
    int64_t batch_id = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(tcfg.batch_size), ++batch_id) {
      const size_t stop = std::min(order.size(),
                                   start + static_cast<size_t>(tcfg.batch_size));
      diff::Tape<S> tape;
      std::vector<diff::Tensor<S>> losses;
      losses.reserve(stop - start);
      for (size_t bi = start; bi < stop; ++bi) {
        const auto& inst = instances[order[bi]];
        auto grid = nn::forward(tape, inst, params, mcfg, true, &drop_rng);
        losses.push_back(nn::loss(tape, grid, inst, mcfg));
      }
      auto batch_loss = diff::scale(tape, diff::reduce_sum(tape, diff::concat(tape, losses, 0)),
                                    1.0 / static_cast<double>(losses.size()));
      const double lv = static_cast<double>(batch_loss->value[0]);
      if (!std::isfinite(lv)) {
        throw Error("finetune: non-finite loss in epoch " +
                    std::to_string(epoch) + " batch " +
                    std::to_string(batch_id));
      }
      params.zero_grads();
      tape.backward(batch_loss);
      adam_step(params, state, tcfg);
      ++result.steps;
      epoch_loss += lv * static_cast<double>(losses.size());
      counted += static_cast<int64_t>(losses.size());
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = epoch_loss / static_cast<double>(counted);
    result.epochs_run = epoch + 1;

    const bool eval_now =
        !dev_records.empty() && ((epoch + 1) % tcfg.eval_every == 0 ||
                                 epoch + 1 == tcfg.epochs);
    if (eval_now) {
      const auto micro = eval::micro_for_records(dev_records, params, vocab, mcfg);
      entry.dev_f1 = micro.f1;
      if (micro.f1 > result.best_f1) {
        result.best_f1 = micro.f1;
        result.best_epoch = epoch;
        result.best_params = params.clone();
        evals_since_best = 0;
      } else {
        ++evals_since_best;
      }
    }
    result.log.push_back(entry);
    if (log) {
      (*log) << "epoch " << epoch << " train_loss " << entry.train_loss;
      if (entry.dev_f1 >= 0) (*log) << " dev_f1 " << entry.dev_f1;
      (*log) << "\n";
    }
    if (tcfg.stop_dev_f1 > 0 && result.best_f1 >= tcfg.stop_dev_f1) break;
    if (tcfg.patience > 0 && evals_since_best >= tcfg.patience) break;
  }
  if (result.best_epoch < 0) {
    result.best_params = params.clone();
    result.best_epoch = result.epochs_run - 1;
  }
  return result;
}

}  // namespace gridner::train
