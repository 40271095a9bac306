#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gridner/config.hpp"
#include "gridner/corpus.hpp"
#include "gridner/ops.hpp"
#include "gridner/tensor.hpp"

namespace gridner::nn {

using diff::Tape;
using diff::Tensor;

// Named, ordered parameter collection. Order is creation order and fixes the
// checkpoint layout, optimizer iteration and init draw sequence. Names
// starting with "encoder." form the encoder learning-rate group.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    if (index_.count(name)) throw Error("ParamStore: duplicate name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  const Tensor<S>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter " + name);
    return items_[it->second].second;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Tensor<S>>>& items() const {
    return items_;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t->numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) {
      t->ensure_grad();
      t->zero_grad();
    }
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : items_) {
      auto c = std::make_shared<diff::TensorImpl<S>>(*t);
      out.add(name, std::move(c));
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

inline bool is_encoder_param(const std::string& name) {
  return name.rfind("encoder.", 0) == 0;
}

// Distance buckets for |j - i|: {0,1,2,3,4-7,8-15,16-31,32-63,64-127,>=128}.
inline int distance_bucket(int64_t d) {
  if (d < 0) d = -d;
  if (d <= 3) return static_cast<int>(d);
  if (d < 8) return 4;
  if (d < 16) return 5;
  if (d < 32) return 6;
  if (d < 64) return 7;
  if (d < 128) return 8;
  return 9;
}

// All learnable tensors; shapes are a pure function of the config. Every
// tensor exists regardless of ablation flags so the checkpoint name set and
// the init draw sequence stay stable.
template <typename S>
ParamStore<S> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.vocab_size < data::Vocab::kNumSpecials + 1) {
    throw ConfigError("init_params: vocab_size must cover the specials plus at least one character");
  }
  using diff::xavier;
  using diff::zeros;
  using diff::ones;
  using diff::normal;
  ParamStore<S> p;
  const int64_t d = cfg.d_model;
  const int64_t h = cfg.d_lstm;
  const int64_t db = cfg.d_biaffine;
  const int64_t C = cfg.n_classes;

  p.add("encoder.tok_emb", normal<S>({cfg.vocab_size, d}, 0.0, 0.02, rng, true));
  p.add("encoder.pos_emb", normal<S>({cfg.max_len, d}, 0.0, 0.02, rng, true));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "encoder.layer" + std::to_string(l) + ".";
    p.add(pre + "ln1.gamma", ones<S>({d}, true));
    p.add(pre + "ln1.beta", zeros<S>({d}, true));
    for (const char* w : {"wq", "wk", "wv", "wo"})
      p.add(pre + "attn." + w, xavier<S>({d, d}, rng, true));
    for (const char* b : {"bq", "bk", "bv", "bo"})
      p.add(pre + "attn." + b, zeros<S>({d}, true));
    p.add(pre + "ln2.gamma", ones<S>({d}, true));
    p.add(pre + "ln2.beta", zeros<S>({d}, true));
    p.add(pre + "ffn.w1", xavier<S>({d, cfg.d_ff}, rng, true));
    p.add(pre + "ffn.b1", zeros<S>({cfg.d_ff}, true));
    p.add(pre + "ffn.w2", xavier<S>({cfg.d_ff, d}, rng, true));
    p.add(pre + "ffn.b2", zeros<S>({d}, true));
  }
  p.add("fusion.alpha", zeros<S>({cfg.n_layers + 1}, true));
  p.add("type_emb", normal<S>({kNumEntityTypes, cfg.d_type}, 0.0, 0.02, rng, true));

  p.add("cln_type.w_gamma", xavier<S>({cfg.d_type, d}, rng, true));
  p.add("cln_type.b_gamma", ones<S>({d}, true));
  p.add("cln_type.w_beta", xavier<S>({cfg.d_type, d}, rng, true));
  p.add("cln_type.b_beta", zeros<S>({d}, true));
  p.add("cln_grid.w_gamma", xavier<S>({d, d}, rng, true));
  p.add("cln_grid.b_gamma", ones<S>({d}, true));
  p.add("cln_grid.w_beta", xavier<S>({d, d}, rng, true));
  p.add("cln_grid.b_beta", zeros<S>({d}, true));

  for (const char* dir : {"fwd", "bwd"}) {
    const std::string pre = std::string("biaffine.lstm_") + dir + ".";
    p.add(pre + "w_ih", xavier<S>({d, 4 * h}, rng, true));
    p.add(pre + "w_hh", xavier<S>({h, 4 * h}, rng, true));
    p.add(pre + "b", zeros<S>({4 * h}, true));
  }
  p.add("biaffine.start.w", xavier<S>({2 * h, db}, rng, true));
  p.add("biaffine.start.b", zeros<S>({db}, true));
  p.add("biaffine.end.w", xavier<S>({2 * h, db}, rng, true));
  p.add("biaffine.end.b", zeros<S>({db}, true));
  p.add("biaffine.u", xavier<S>({db, C, db}, rng, true));
  p.add("biaffine.w", xavier<S>({2 * db, C}, rng, true));
  p.add("biaffine.b", zeros<S>({C}, true));

  p.add("grid.v_proj.w", xavier<S>({d, cfg.d_h}, rng, true));
  p.add("grid.v_proj.b", zeros<S>({cfg.d_h}, true));
  p.add("grid.dist_emb",
        normal<S>({cfg.n_dist_buckets, cfg.d_e_d}, 0.0, 0.02, rng, true));
  p.add("grid.region_emb",
        normal<S>({cfg.n_region_ids, cfg.d_e_t}, 0.0, 0.02, rng, true));
  const int64_t grid_in = cfg.d_h + cfg.d_e_d + cfg.d_e_t;
  p.add("grid.in_mlp.w", xavier<S>({grid_in, cfg.d_conv_in}, rng, true));
  p.add("grid.in_mlp.b", zeros<S>({cfg.d_conv_in}, true));
  for (int dil = 1; dil <= 3; ++dil) {
    const std::string pre = "grid.conv" + std::to_string(dil) + ".";
    p.add(pre + "kernel", xavier<S>({3, 3, cfg.d_conv_in, cfg.d_g}, rng, true));
    p.add(pre + "bias", zeros<S>({cfg.d_g}, true));
  }
  p.add("grid.out_mlp.w", xavier<S>({3 * cfg.d_g, C}, rng, true));
  p.add("grid.out_mlp.b", zeros<S>({C}, true));
  return p;
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> dropout(Tape<S>& tape, const Tensor<S>& t, double rate,
                  bool train_mode, Rng* rng) {
  if (!train_mode || rate <= 0.0) return t;
  if (rng == nullptr) throw ContractError("dropout: train mode needs an rng");
  const double keep = 1.0 - rate;
  auto mask = diff::zeros<S>(t->shape);
  for (auto& v : mask->value)
    v = rng->bernoulli(keep) ? static_cast<S>(1.0 / keep) : S(0);
  return diff::mul(tape, t, mask);
}

// Repeats a single row [1,d] into [n,d] (grads from every copy accumulate).
template <typename S>
Tensor<S> tile_rows(Tape<S>& tape, const Tensor<S>& row, int64_t n) {
  if (n == 1) return row;
  std::vector<Tensor<S>> copies(static_cast<size_t>(n), row);
  return diff::concat(tape, copies, 0);
}

// Conditional layer normalization: plain LN of x, then the affine whose
// gamma/beta are generated from the condition vector.
template <typename S>
Tensor<S> cln(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& cond,
              const Tensor<S>& w_gamma, const Tensor<S>& b_gamma,
              const Tensor<S>& w_beta, const Tensor<S>& b_beta) {
  const int64_t n = x->shape[0];
  const int64_t d = x->shape[1];
  if (cond->ndim() != 2 || cond->shape[0] != 1 ||
      cond->shape[1] != w_gamma->shape[0]) {
    throw ShapeError("cln: condition dim does not match projection input");
  }
  auto unit_gamma = diff::ones<S>({d});
  auto zero_beta = diff::zeros<S>({d});
  auto xhat = diff::layer_norm(tape, x, unit_gamma, zero_beta);
  auto gamma = diff::add(tape, diff::matmul(tape, cond, w_gamma), b_gamma);
  auto beta = diff::add(tape, diff::matmul(tape, cond, w_beta), b_beta);
  auto out = diff::add(tape, diff::mul(tape, xhat, tile_rows(tape, gamma, n)),
                       tile_rows(tape, beta, n));
  return out;
}

// Token + position embeddings followed by pre-norm transformer blocks.
// Returns all n_layers+1 hidden sequences (index 0 = embeddings) for the
// weighted layer fusion. Padding keys are masked out of attention.
template <typename S>
std::vector<Tensor<S>> encode(Tape<S>& tape, const std::vector<int32_t>& token_ids,
                              const ParamStore<S>& p, const ModelConfig& cfg,
                              bool train_mode, Rng* drop_rng) {
  const int64_t n = static_cast<int64_t>(token_ids.size());
  if (n < 1) throw ContractError("encode: empty token sequence");
  if (n > cfg.max_len) {
    throw ContractError("encode: sequence length " + std::to_string(n) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
  }
  std::vector<int64_t> ids(token_ids.begin(), token_ids.end());
  std::vector<int64_t> pos_ids(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pos_ids[static_cast<size_t>(i)] = i;

  auto x = diff::add(tape,
                     diff::embedding_lookup(tape, p.get("encoder.tok_emb"), ids, {n}),
                     diff::embedding_lookup(tape, p.get("encoder.pos_emb"), pos_ids, {n}));
  x = dropout(tape, x, cfg.dropout, train_mode, drop_rng);

  // Additive attention mask: key columns at padding positions get -1e30,
  // which exp() flushes to exactly zero after the row max subtraction.
  auto key_mask = diff::zeros<S>({n, n});
  for (int64_t j = 0; j < n; ++j) {
    if (token_ids[static_cast<size_t>(j)] == data::Vocab::kPad) {
      for (int64_t i = 0; i < n; ++i)
        key_mask->value[i * n + j] = static_cast<S>(-1e30);
    }
  }

  std::vector<Tensor<S>> layers;
  layers.reserve(static_cast<size_t>(cfg.n_layers + 1));
  layers.push_back(x);
  const int64_t dh = cfg.d_model / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "encoder.layer" + std::to_string(l) + ".";
    auto h1 = diff::layer_norm(tape, x, p.get(pre + "ln1.gamma"),
                               p.get(pre + "ln1.beta"));
    auto q = diff::add(tape, diff::matmul(tape, h1, p.get(pre + "attn.wq")),
                       p.get(pre + "attn.bq"));
    auto k = diff::add(tape, diff::matmul(tape, h1, p.get(pre + "attn.wk")),
                       p.get(pre + "attn.bk"));
    auto v = diff::add(tape, diff::matmul(tape, h1, p.get(pre + "attn.wv")),
                       p.get(pre + "attn.bv"));
    std::vector<Tensor<S>> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int64_t hd = 0; hd < cfg.n_heads; ++hd) {
      auto qh = diff::slice(tape, q, 1, hd * dh, dh);
      auto kh = diff::slice(tape, k, 1, hd * dh, dh);
      auto vh = diff::slice(tape, v, 1, hd * dh, dh);
      auto scores = diff::scale(
          tape, diff::matmul(tape, qh, diff::permute(tape, kh, {1, 0})),
          att_scale);
      scores = diff::add(tape, scores, key_mask);
      auto attn = diff::softmax(tape, scores, 1);
      attn = dropout(tape, attn, cfg.dropout, train_mode, drop_rng);
      heads.push_back(diff::matmul(tape, attn, vh));
    }
    auto ctx = cfg.n_heads == 1 ? heads[0] : diff::concat(tape, heads, 1);
    auto attn_out = diff::add(tape, diff::matmul(tape, ctx, p.get(pre + "attn.wo")),
                              p.get(pre + "attn.bo"));
    x = diff::add(tape, x, attn_out);
    auto h2 = diff::layer_norm(tape, x, p.get(pre + "ln2.gamma"),
                               p.get(pre + "ln2.beta"));
    auto hidden = diff::gelu(
        tape, diff::add(tape, diff::matmul(tape, h2, p.get(pre + "ffn.w1")),
                        p.get(pre + "ffn.b1")));
    hidden = dropout(tape, hidden, cfg.dropout, train_mode, drop_rng);
    auto ff = diff::add(tape, diff::matmul(tape, hidden, p.get(pre + "ffn.w2")),
                        p.get(pre + "ffn.b2"));
    x = diff::add(tape, x, ff);
    layers.push_back(x);
  }
  return layers;
}

// H = sum_l softmax(alpha)_l * layer_l.
template <typename S>
Tensor<S> fuse_layers(Tape<S>& tape, const std::vector<Tensor<S>>& layers,
                      const Tensor<S>& alpha) {
  auto weights = diff::softmax(tape, alpha, 0);
  return diff::weighted_sum(tape, layers, weights);
}

// Biaffine branch (all-zero when disabled): CLN with the type embedding,
// BiLSTM, GELU start/end projections, then bilinear + linear pair scores.
template <typename S>
Tensor<S> biaffine_branch(Tape<S>& tape, const Tensor<S>& h, int type_id,
                          const ParamStore<S>& p, const ModelConfig& cfg) {
  const int64_t n = h->shape[0];
  if (!cfg.use_biaffine) return diff::zeros<S>({n, n, cfg.n_classes});
  if (type_id < 0 || type_id >= kNumEntityTypes) {
    throw ContractError("biaffine_branch: type_id out of range");
  }
  auto cond = diff::embedding_lookup(tape, p.get("type_emb"), {type_id}, {1});
  auto h1 = cln(tape, h, cond, p.get("cln_type.w_gamma"), p.get("cln_type.b_gamma"),
                p.get("cln_type.w_beta"), p.get("cln_type.b_beta"));
  diff::BiLstmParams<S> lstm{{p.get("biaffine.lstm_fwd.w_ih"),
                              p.get("biaffine.lstm_fwd.w_hh"),
                              p.get("biaffine.lstm_fwd.b")},
                             {p.get("biaffine.lstm_bwd.w_ih"),
                              p.get("biaffine.lstm_bwd.w_hh"),
                              p.get("biaffine.lstm_bwd.b")}};
  auto s = diff::bilstm(tape, h1, lstm);
  auto xs = diff::gelu(tape, diff::add(tape, diff::matmul(tape, s, p.get("biaffine.start.w")),
                                       p.get("biaffine.start.b")));
  auto xe = diff::gelu(tape, diff::add(tape, diff::matmul(tape, s, p.get("biaffine.end.w")),
                                       p.get("biaffine.end.b")));
  auto bil = diff::pairwise_bilinear(tape, xs, p.get("biaffine.u"), xe);
  const int64_t db = cfg.d_biaffine;
  auto w_start = diff::slice(tape, p.get("biaffine.w"), 0, 0, db);
  auto w_end = diff::slice(tape, p.get("biaffine.w"), 0, db, db);
  auto lin = diff::pair_outer_add(tape, diff::matmul(tape, xs, w_start),
                                  diff::matmul(tape, xe, w_end),
                                  p.get("biaffine.b"));
  return diff::add(tape, bil, lin);
}

template <typename S>
struct GridEmbeddings {
  Tensor<S> v;    // [N,N,d_h]
  Tensor<S> e_d;  // [N,N,d_e_d]
  Tensor<S> e_t;  // [N,N,d_e_t]
};

// Word-pair grid inputs: CLN-conditioned word tensor V plus distance and
// region embeddings. Disabled embeddings are exact zeros.
template <typename S>
GridEmbeddings<S> word_pair_embeddings(Tape<S>& tape, const Tensor<S>& h,
                                       const ParamStore<S>& p,
                                       const ModelConfig& cfg) {
  const int64_t n = h->shape[0];
  const int64_t d = h->shape[1];
  GridEmbeddings<S> out;

  auto unit_gamma = diff::ones<S>({d});
  auto zero_beta = diff::zeros<S>({d});
  auto ln_h = diff::layer_norm(tape, h, unit_gamma, zero_beta);
  auto gamma_rows = diff::add(tape, diff::matmul(tape, h, p.get("cln_grid.w_gamma")),
                              p.get("cln_grid.b_gamma"));
  auto beta_rows = diff::add(tape, diff::matmul(tape, h, p.get("cln_grid.w_beta")),
                             p.get("cln_grid.b_beta"));
  auto v_full = diff::pair_affine(tape, ln_h, gamma_rows, beta_rows);
  auto v_flat = diff::reshape(tape, v_full, {n * n, d});
  auto v_proj = diff::add(tape, diff::matmul(tape, v_flat, p.get("grid.v_proj.w")),
                          p.get("grid.v_proj.b"));
  out.v = diff::reshape(tape, v_proj, {n, n, cfg.d_h});

  if (cfg.use_distance_emb) {
    std::vector<int64_t> ids(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        ids[static_cast<size_t>(i * n + j)] = distance_bucket(j - i);
      }
    }
    out.e_d = diff::embedding_lookup(tape, p.get("grid.dist_emb"), ids, {n, n});
  } else {
    out.e_d = diff::zeros<S>({n, n, cfg.d_e_d});
  }

  if (cfg.use_region_emb) {
    std::vector<int64_t> ids(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        ids[static_cast<size_t>(i * n + j)] = i < j ? 0 : (i == j ? 1 : 2);
      }
    }
    out.e_t = diff::embedding_lookup(tape, p.get("grid.region_emb"), ids, {n, n});
  } else {
    out.e_t = diff::zeros<S>({n, n, cfg.d_e_t});
  }
  return out;
}

// MLP branch (all-zero when disabled): grid MLP, multi-granularity dilated
// convolution (dilations 1/2/3), per-cell output MLP.
template <typename S>
Tensor<S> mlp_branch(Tape<S>& tape, const GridEmbeddings<S>& emb,
                     const ParamStore<S>& p, const ModelConfig& cfg,
                     bool train_mode, Rng* drop_rng) {
  const int64_t n = emb.v->shape[0];
  if (!cfg.use_mlp_branch) return diff::zeros<S>({n, n, cfg.n_classes});
  auto x = diff::concat(tape, {emb.v, emb.e_d, emb.e_t}, 2);
  x = dropout(tape, x, cfg.dropout, train_mode, drop_rng);
  const int64_t grid_in = cfg.d_h + cfg.d_e_d + cfg.d_e_t;
  auto g_flat = diff::gelu(
      tape, diff::add(tape, diff::matmul(tape, diff::reshape(tape, x, {n * n, grid_in}),
                                         p.get("grid.in_mlp.w")),
                      p.get("grid.in_mlp.b")));
  auto g = diff::reshape(tape, g_flat, {n, n, cfg.d_conv_in});

  Tensor<S> q;
  if (cfg.use_dconv) {
    std::vector<Tensor<S>> qs;
    for (int dil = 1; dil <= 3; ++dil) {
      const std::string pre = "grid.conv" + std::to_string(dil) + ".";
      qs.push_back(diff::gelu(
          tape, diff::conv2d_dilated(tape, g, p.get(pre + "kernel"),
                                     dil, p.get(pre + "bias"))));
    }
    q = diff::concat(tape, qs, 2);
  } else {
    // Identity projection: tile G's channels cyclically to the fused width
    // so the same output MLP applies without the convolution stack.
    const int64_t want = 3 * cfg.d_g;
    std::vector<Tensor<S>> parts;
    int64_t have = 0;
    while (have + cfg.d_conv_in <= want) {
      parts.push_back(g);
      have += cfg.d_conv_in;
    }
    if (have < want)
      parts.push_back(diff::slice(tape, g, 2, 0, want - have));
    q = parts.size() == 1 ? parts[0] : diff::concat(tape, parts, 2);
  }
  auto y = diff::add(tape, diff::matmul(tape, diff::reshape(tape, q, {n * n, 3 * cfg.d_g}),
                                        p.get("grid.out_mlp.w")),
                     p.get("grid.out_mlp.b"));
  return diff::reshape(tape, y, {n, n, cfg.n_classes});
}

// Cellwise softmax over the summed branch logits.
template <typename S>
Tensor<S> co_predict(Tape<S>& tape, const Tensor<S>& biaffine_logits,
                     const Tensor<S>& mlp_logits) {
  if (biaffine_logits->shape != mlp_logits->shape) {
    throw ShapeError("co_predict: branch logit shapes differ");
  }
  auto sum = diff::add(tape, biaffine_logits, mlp_logits);
  return diff::softmax(tape, sum, sum->ndim() - 1);
}

template <typename S>
struct ScoreGrid {
  Tensor<S> biaffine_logits;  // y'
  Tensor<S> mlp_logits;       // y''
  Tensor<S> probs;            // softmax(y' + y'')
};

template <typename S>
ScoreGrid<S> forward(Tape<S>& tape, const data::MrcInstance& inst,
                     const ParamStore<S>& p, const ModelConfig& cfg,
                     bool train_mode = false, Rng* drop_rng = nullptr) {
  auto layers = encode(tape, inst.token_ids, p, cfg, train_mode, drop_rng);
  auto h = fuse_layers(tape, layers, p.get("fusion.alpha"));
  ScoreGrid<S> out;
  out.biaffine_logits = biaffine_branch(tape, h, inst.type_id, p, cfg);
  auto emb = word_pair_embeddings(tape, h, p, cfg);
  out.mlp_logits = mlp_branch(tape, emb, p, cfg, train_mode, drop_rng);
  out.probs = co_predict(tape, out.biaffine_logits, out.mlp_logits);
  return out;
}

// Masked cross-entropy over the instance's supervision mask.
template <typename S>
Tensor<S> loss(Tape<S>& tape, const ScoreGrid<S>& grid,
               const data::MrcInstance& inst, const ModelConfig& cfg) {
  const int64_t n = inst.n();
  if (grid.probs->shape != diff::Shape{n, n, cfg.n_classes}) {
    throw ContractError("loss: probs shape does not match instance grid");
  }
  std::vector<int32_t> labels(inst.label_grid.begin(), inst.label_grid.end());
  return diff::masked_cross_entropy(tape, grid.probs, labels, inst.loss_mask,
                                    cfg.loss_denom_all_cells
                                        ? diff::LossDenom::kAllCells
                                        : diff::LossDenom::kUnmaskedCount);
}

}  // namespace gridner::nn
