#include "gridner/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gridner/error.hpp"

namespace gridner {

using json = nlohmann::json;

void ModelConfig::validate() const {
  const auto positive = [](int64_t v, const char* name) {
    if (v < 1) {
      throw ConfigError(std::string("model config: ") + name +
                        " must be >= 1, got " + std::to_string(v));
    }
  };
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(d_type, "d_type");
  positive(d_lstm, "d_lstm");
  positive(d_biaffine, "d_biaffine");
  positive(d_h, "d_h");
  positive(d_e_d, "d_e_d");
  positive(d_e_t, "d_e_t");
  positive(d_conv_in, "d_conv_in");
  positive(d_g, "d_g");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model must be divisible by n_heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("model config: dropout must be in [0,1)");
  }
  if (!use_biaffine && !use_mlp_branch) {
    throw ConfigError(
        "model config: at least one of use_biaffine/use_mlp_branch must be enabled");
  }
  const int64_t expected_classes = binary_grid ? 2 : 10;
  if (n_classes != expected_classes) {
    throw ConfigError("model config: n_classes must be " +
                      std::to_string(expected_classes) +
                      (binary_grid ? " with binary_grid" : "") + ", got " +
                      std::to_string(n_classes));
  }
  if (n_dist_buckets != 10 || n_region_ids != 3) {
    throw ConfigError("model config: n_dist_buckets/n_region_ids are fixed at 10/3");
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (lr_encoder <= 0 || lr_heads <= 0) {
    throw ConfigError("train config: learning rates must be > 0");
  }
  if (adam_beta1 <= 0 || adam_beta1 >= 1 || adam_beta2 <= 0 || adam_beta2 >= 1) {
    throw ConfigError("train config: adam betas must be in (0,1)");
  }
  if (adam_eps <= 0) throw ConfigError("train config: adam_eps must be > 0");
  if (epochs < 0 || mlm_epochs < 0) {
    throw ConfigError("train config: epoch counts must be >= 0");
  }
  if (mlm_mask_rate < 0 || mlm_mask_rate >= 1) {
    throw ConfigError("train config: mlm_mask_rate must be in [0,1)");
  }
  if (eval_every < 1) throw ConfigError("train config: eval_every must be >= 1");
  if (patience < 0) throw ConfigError("train config: patience must be >= 0");
  if (warmup_steps < 0) throw ConfigError("train config: warmup_steps must be >= 0");
  if (negative_sample_rate < 0 || negative_sample_rate > 1) {
    throw ConfigError("train config: negative_sample_rate must be in [0,1]");
  }
}

void RunConfig::validate() const {
  if (precision != "f64" && precision != "f32") {
    throw ConfigError("run config: precision must be \"f64\" or \"f32\"");
  }
  model.validate();
  train.validate();
  for (const std::string* p : {&train_file, &dev_file, &test_file}) {
    if (!p->empty() && !std::filesystem::exists(*p)) {
      throw ConfigError("run config: input file does not exist: " + *p);
    }
  }
}

namespace {

template <typename T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ModelConfig model_from(const json& j) {
  ModelConfig m;
  opt(j, "vocab_size", m.vocab_size);
  opt(j, "d_model", m.d_model);
  opt(j, "n_layers", m.n_layers);
  opt(j, "n_heads", m.n_heads);
  opt(j, "d_ff", m.d_ff);
  opt(j, "d_type", m.d_type);
  opt(j, "d_lstm", m.d_lstm);
  opt(j, "d_biaffine", m.d_biaffine);
  opt(j, "d_h", m.d_h);
  opt(j, "d_e_d", m.d_e_d);
  opt(j, "d_e_t", m.d_e_t);
  opt(j, "d_conv_in", m.d_conv_in);
  opt(j, "d_g", m.d_g);
  opt(j, "dropout", m.dropout);
  opt(j, "max_len", m.max_len);
  opt(j, "use_biaffine", m.use_biaffine);
  opt(j, "use_mlp_branch", m.use_mlp_branch);
  opt(j, "use_dconv", m.use_dconv);
  opt(j, "use_region_emb", m.use_region_emb);
  opt(j, "use_distance_emb", m.use_distance_emb);
  opt(j, "binary_grid", m.binary_grid);
  opt(j, "loss_denom_all_cells", m.loss_denom_all_cells);
  if (m.binary_grid) m.n_classes = 2;
  opt(j, "n_classes", m.n_classes);
  return m;
}

json model_to(const ModelConfig& m) {
  return json{{"vocab_size", m.vocab_size},
              {"d_model", m.d_model},
              {"n_layers", m.n_layers},
              {"n_heads", m.n_heads},
              {"d_ff", m.d_ff},
              {"d_type", m.d_type},
              {"d_lstm", m.d_lstm},
              {"d_biaffine", m.d_biaffine},
              {"d_h", m.d_h},
              {"d_e_d", m.d_e_d},
              {"d_e_t", m.d_e_t},
              {"d_conv_in", m.d_conv_in},
              {"d_g", m.d_g},
              {"dropout", m.dropout},
              {"n_classes", m.n_classes},
              {"max_len", m.max_len},
              {"use_biaffine", m.use_biaffine},
              {"use_mlp_branch", m.use_mlp_branch},
              {"use_dconv", m.use_dconv},
              {"use_region_emb", m.use_region_emb},
              {"use_distance_emb", m.use_distance_emb},
              {"binary_grid", m.binary_grid},
              {"loss_denom_all_cells", m.loss_denom_all_cells}};
}

TrainConfig train_from(const json& j) {
  TrainConfig t;
  opt(j, "batch_size", t.batch_size);
  opt(j, "lr_encoder", t.lr_encoder);
  opt(j, "lr_heads", t.lr_heads);
  opt(j, "adam_beta1", t.adam_beta1);
  opt(j, "adam_beta2", t.adam_beta2);
  opt(j, "adam_eps", t.adam_eps);
  opt(j, "grad_clip_norm", t.grad_clip_norm);
  opt(j, "epochs", t.epochs);
  opt(j, "mlm_epochs", t.mlm_epochs);
  opt(j, "mlm_mask_rate", t.mlm_mask_rate);
  opt(j, "eval_every", t.eval_every);
  opt(j, "patience", t.patience);
  opt(j, "warmup_steps", t.warmup_steps);
  opt(j, "negative_sample_rate", t.negative_sample_rate);
  opt(j, "stop_dev_f1", t.stop_dev_f1);
  return t;
}

json train_to(const TrainConfig& t) {
  return json{{"batch_size", t.batch_size},
              {"lr_encoder", t.lr_encoder},
              {"lr_heads", t.lr_heads},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"adam_eps", t.adam_eps},
              {"grad_clip_norm", t.grad_clip_norm},
              {"epochs", t.epochs},
              {"mlm_epochs", t.mlm_epochs},
              {"mlm_mask_rate", t.mlm_mask_rate},
              {"eval_every", t.eval_every},
              {"patience", t.patience},
              {"warmup_steps", t.warmup_steps},
              {"negative_sample_rate", t.negative_sample_rate},
              {"stop_dev_f1", t.stop_dev_f1}};
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: JSON parse error: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top-level value must be an object");
  RunConfig cfg;
  opt(j, "seed", cfg.seed);
  opt(j, "precision", cfg.precision);
  if (j.contains("model")) cfg.model = model_from(j.at("model"));
  if (j.contains("train")) cfg.train = train_from(j.at("train"));
  opt(j, "train_file", cfg.train_file);
  opt(j, "dev_file", cfg.dev_file);
  opt(j, "test_file", cfg.test_file);
  opt(j, "checkpoint_dir", cfg.checkpoint_dir);
  opt(j, "report_dir", cfg.report_dir);
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j{{"seed", cfg.seed},
         {"precision", cfg.precision},
         {"model", model_to(cfg.model)},
         {"train", train_to(cfg.train)},
         {"train_file", cfg.train_file},
         {"dev_file", cfg.dev_file},
         {"test_file", cfg.test_file},
         {"checkpoint_dir", cfg.checkpoint_dir},
         {"report_dir", cfg.report_dir}};
  return j.dump(2);
}

std::string model_config_to_json(const ModelConfig& cfg) {
  return model_to(cfg).dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config: JSON parse error: ") + e.what());
  }
  return model_from(j);
}

}  // namespace gridner
