#pragma once

#include <cstdint>
#include <string>

namespace gridner {

// Network dimensions and ablation switches.
struct ModelConfig {
  int64_t vocab_size = 0;  // filled in from the vocabulary
  int64_t d_model = 128;
  int64_t n_layers = 2;
  int64_t n_heads = 4;
  int64_t d_ff = 256;
  int64_t d_type = 32;
  int64_t d_lstm = 64;
  int64_t d_biaffine = 64;
  int64_t d_h = 64;
  int64_t d_e_d = 20;
  int64_t d_e_t = 20;
  int64_t d_conv_in = 64;
  int64_t d_g = 64;
  double dropout = 0.1;
  int64_t n_classes = 10;
  int64_t n_dist_buckets = 10;
  int64_t n_region_ids = 3;
  int64_t max_len = 200;
  bool use_biaffine = true;
  bool use_mlp_branch = true;
  bool use_dconv = true;
  bool use_region_emb = true;
  bool use_distance_emb = true;
  // Two-class per-query grid (queried type vs non-entity) instead of the
  // full 10-class space.
  bool binary_grid = false;
  // Normalize the loss by the full grid size instead of the unmasked count.
  bool loss_denom_all_cells = false;

  int64_t positive_class(int type_id) const {
    return binary_grid ? 1 : 1 + type_id;
  }

  void validate() const;  // throws ConfigError
};

struct TrainConfig {
  int64_t batch_size = 16;
  double lr_encoder = 2e-5;
  double lr_heads = 2.5e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;
  int64_t epochs = 50;
  int64_t mlm_epochs = 100;
  double mlm_mask_rate = 0.15;
  uint64_t seed = 42;
  int64_t eval_every = 1;
  int64_t patience = 10;
  int64_t warmup_steps = 0;          // linear warmup; 0 disables
  double negative_sample_rate = 1.0; // keep-fraction of no-answer queries
  double stop_dev_f1 = 0.0;          // early exit threshold; 0 disables

  void validate() const;
};

// One JSON document describes a full run; every field has a default and the
// parsed config is echoed into reports.
struct RunConfig {
  uint64_t seed = 42;
  std::string precision = "f64";  // "f64" or "f32"
  ModelConfig model;
  TrainConfig train;
  std::string train_file;
  std::string dev_file;
  std::string test_file;
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";

  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace gridner
