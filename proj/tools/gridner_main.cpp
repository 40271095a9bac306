// Command-line entry point: stats / pretrain / train / eval / predict /
// gradcheck, all driven by one JSON run config. Exit codes: 0 success,
// 1 check or metric failure, 2 usage/config/data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gridner/checkpoint.hpp"
#include "gridner/checkpoint_peek.hpp"
#include "gridner/config.hpp"
#include "gridner/corpus.hpp"
#include "gridner/error.hpp"
#include "gridner/eval.hpp"
#include "gridner/gradcheck_suite.hpp"
#include "gridner/pipeline.hpp"
#include "gridner/train.hpp"
#include "gridner/utf8.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gridner;

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

template <typename Fn>
int with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f32") return fn(float{});
  if (precision == "f64") return fn(double{});
  throw ConfigError("precision must be \"f64\" or \"f32\", got " + precision);
}

int cmd_stats(const std::string& data_path, const std::string& out_dir) {
  const auto records = data::load_corpus(data_path);
  const auto stats = data::compute_stats(records);
  fs::create_directories(out_dir);
  write_file(out_dir + "/stats.json", data::stats_to_json(stats));
  write_file(out_dir + "/stats.md", data::stats_to_markdown(stats));
  std::cerr << "stats: " << records.size() << " records, " << stats.total
            << " entities -> " << out_dir << "/stats.{json,md}\n";
  return 0;
}

json epoch_log_json(const std::vector<train::EpochLog>& log) {
  json arr = json::array();
  for (const auto& e : log) {
    json o{{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.dev_f1 >= 0) o["dev_f1"] = e.dev_f1;
    arr.push_back(std::move(o));
  }
  return arr;
}

int cmd_pretrain(const std::string& config_path, const std::string& resume) {
  RunConfig cfg = load_run_config(config_path);
  cfg.validate();
  if (cfg.train_file.empty()) {
    throw ConfigError("pretrain: config must set train_file");
  }
  const auto records = data::load_corpus(cfg.train_file);
  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    data::Vocab vocab;
    nn::ParamStore<S> params;
    train::OptimState<S> state;
    ModelConfig mcfg = cfg.model;
    if (!resume.empty()) {
      auto loaded = train::load_checkpoint<S>(resume);
      mcfg = loaded.meta.model_config;
      vocab = pipeline::vocab_from_meta(loaded.meta);
      Rng init_rng = Rng(cfg.seed).stream("init");
      params = nn::init_params<S>(mcfg, init_rng);
      train::apply_checkpoint(params, loaded);
      state.step = loaded.meta.step;
      std::cerr << "pretrain: resumed from " << resume << " at step "
                << state.step << "\n";
    } else {
      vocab = pipeline::build_vocab_with_queries(records);
      mcfg.vocab_size = vocab.size();
      Rng init_rng = Rng(cfg.seed).stream("init");
      params = nn::init_params<S>(mcfg, init_rng);
    }
    const auto sequences = data::mlm_corpus(records, vocab, mcfg.max_len);
    auto result = train::mlm_pretrain(sequences, params, state, mcfg, cfg.train,
                                      &std::cerr);
    fs::create_directories(cfg.checkpoint_dir);
    fs::create_directories(cfg.report_dir);
    const std::string ckpt = cfg.checkpoint_dir + "/mlm.ckpt";
    train::save_checkpoint(ckpt, params,
                           pipeline::make_meta<S>(mcfg, vocab, state.step, -1.0));
    json log{{"config", json::parse(run_config_to_json(cfg))},
             {"epoch_losses", result.epoch_losses},
             {"steps", result.steps},
             {"skipped_sequences", result.skipped_sequences}};
    write_file(cfg.report_dir + "/mlm_log.json", log.dump(2));
    std::cerr << "pretrain: wrote " << ckpt << "\n";
    return 0;
  });
}

int cmd_train(const std::string& config_path, const std::string& init_ckpt) {
  RunConfig cfg = load_run_config(config_path);
  cfg.validate();
  if (cfg.train_file.empty()) {
    throw ConfigError("train: config must set train_file");
  }
  const auto train_records = data::load_corpus(cfg.train_file);
  const auto dev_records = cfg.dev_file.empty()
                               ? std::vector<data::SentenceRecord>{}
                               : data::load_corpus(cfg.dev_file);
  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    data::Vocab vocab;
    ModelConfig mcfg = cfg.model;
    nn::ParamStore<S> params;
    if (!init_ckpt.empty()) {
      // Encoder weights come from the pre-training checkpoint; heads stay
      // freshly initialized.
      auto loaded = train::load_checkpoint<S>(init_ckpt);
      vocab = pipeline::vocab_from_meta(loaded.meta);
      mcfg.vocab_size = vocab.size();
      Rng init_rng = Rng(cfg.seed).stream("init");
      params = nn::init_params<S>(mcfg, init_rng);
      train::apply_checkpoint(params, loaded, "encoder.");
      std::cerr << "train: encoder initialized from " << init_ckpt << "\n";
    } else {
      vocab = pipeline::build_vocab_with_queries(train_records);
      mcfg.vocab_size = vocab.size();
      Rng init_rng = Rng(cfg.seed).stream("init");
      params = nn::init_params<S>(mcfg, init_rng);
    }
    std::cerr << "train: " << params.param_count() << " parameters\n";
    train::OptimState<S> state;
    auto result = train::finetune(train_records, dev_records, params, state,
                                  mcfg, cfg.train, vocab, &std::cerr);
    fs::create_directories(cfg.checkpoint_dir);
    fs::create_directories(cfg.report_dir);
    const std::string ckpt = cfg.checkpoint_dir + "/best.ckpt";
    train::save_checkpoint(ckpt, result.best_params,
                           pipeline::make_meta<S>(mcfg, vocab, result.steps,
                                                  result.best_f1));
    RunConfig echo = cfg;
    echo.model = mcfg;
    json log{{"config", json::parse(run_config_to_json(echo))},
             {"epochs", epoch_log_json(result.log)},
             {"best_epoch", result.best_epoch},
             {"best_dev_f1", result.best_f1},
             {"steps", result.steps}};
    write_file(cfg.report_dir + "/train_log.json", log.dump(2));
    std::cerr << "train: wrote " << ckpt << " (best dev F1 "
              << result.best_f1 << " at epoch " << result.best_epoch << ")\n";
    return 0;
  });
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& data_path) {
  RunConfig cfg = load_run_config(config_path);
  cfg.validate();
  const auto records = data::load_corpus(data_path);
  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    auto loaded = train::load_checkpoint<S>(ckpt_path);
    const auto vocab = pipeline::vocab_from_meta(loaded.meta);
    ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = vocab.size();
    Rng init_rng = Rng(cfg.seed).stream("init");
    auto params = nn::init_params<S>(mcfg, init_rng);
    train::apply_checkpoint(params, loaded);
    auto run = pipeline::evaluate_records(records, params, vocab, mcfg);
    RunConfig echo = cfg;
    echo.model = mcfg;
    fs::create_directories(cfg.report_dir);
    write_file(cfg.report_dir + "/report.json",
               eval::report_to_json(run.report, run_config_to_json(echo)));
    write_file(cfg.report_dir + "/report.md",
               eval::report_to_markdown(run.report));
    std::printf("micro P %.4f R %.4f F1 %.4f\n", run.report.micro.precision,
                run.report.micro.recall, run.report.micro.f1);
    std::cerr << "eval: wrote " << cfg.report_dir << "/report.{json,md}\n";
    return 0;
  });
}

int cmd_predict(const std::string& ckpt_path, const std::string& text,
                const std::string& in_file) {
  const std::string dtype = train::peek_checkpoint_dtype(ckpt_path);
  return with_precision(dtype, [&](auto tag) {
    using S = decltype(tag);
    auto loaded = train::load_checkpoint<S>(ckpt_path);
    const auto vocab = pipeline::vocab_from_meta(loaded.meta);
    ModelConfig mcfg = loaded.meta.model_config;
    Rng init_rng(0);
    auto params = nn::init_params<S>(mcfg, init_rng);
    train::apply_checkpoint(params, loaded);
    if (!in_file.empty()) {
      const auto records = data::load_corpus(in_file);
      json arr = json::array();
      for (const auto& r : records) {
        const auto preds = eval::predict(r, params, vocab, mcfg);
        arr.push_back(
            json{{"text", utf8_encode(r.text)},
                 {"entities",
                  json::parse(pipeline::predictions_to_json(preds, r.text))}});
      }
      std::cout << arr.dump(2) << "\n";
    } else {
      data::SentenceRecord r;
      r.text = utf8_decode(text);
      const auto preds = eval::predict(r, params, vocab, mcfg);
      std::cout << pipeline::predictions_to_json(preds, r.text) << "\n";
    }
    return 0;
  });
}

int cmd_gradcheck(const std::string& only, uint64_t seed, bool inject_fault) {
  if (inject_fault) diff::testing::gelu_grad_fault() = 1.05;
  const auto rows = diff::run_gradcheck_suite(seed, only);
  bool all_pass = true;
  std::printf("%-24s %-14s %-10s %s\n", "op", "max_rel_err", "threshold",
              "status");
  for (const auto& row : rows) {
    std::printf("%-24s %-14.3e %-10.0e %s\n", row.name.c_str(),
                row.max_rel_err, row.threshold, row.pass ? "pass" : "FAIL");
    all_pass = all_pass && row.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridner: flat and nested medical NER over a word-pair grid"};
  app.require_subcommand(1);

  auto* stats = app.add_subcommand("stats", "Dataset statistics report");
  std::string stats_data, stats_out = "reports";
  stats->add_option("--data", stats_data, "Corpus JSON file")->required();
  stats->add_option("--out", stats_out, "Output directory");

  auto* pretrain =
      app.add_subcommand("pretrain", "Task-adaptive masked-LM pre-training");
  std::string pre_config, pre_resume;
  pretrain->add_option("--config", pre_config, "Run config JSON")->required();
  pretrain->add_option("--resume", pre_resume, "Checkpoint to resume from");

  auto* train_cmd = app.add_subcommand("train", "Supervised fine-tuning");
  std::string train_config, train_init;
  train_cmd->add_option("--config", train_config, "Run config JSON")->required();
  train_cmd->add_option("--init", train_init,
                        "Pre-training checkpoint for encoder init");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_config, eval_ckpt, eval_data;
  eval_cmd->add_option("--config", eval_config, "Run config JSON")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Corpus JSON file")->required();

  auto* predict = app.add_subcommand("predict", "Predict entities");
  std::string pred_ckpt, pred_text, pred_in;
  predict->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required();
  auto* topt = predict->add_option("--text", pred_text, "Input text");
  auto* fopt = predict->add_option("--in", pred_in, "Corpus JSON file");
  topt->excludes(fopt);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks");
  std::string gc_op;
  uint64_t gc_seed = 1;
  bool gc_fault = false;
  gradcheck->add_option("--op", gc_op, "Run only this op");
  gradcheck->add_option("--seed", gc_seed, "Base seed");
  gradcheck->add_flag("--inject-fault", gc_fault,
                      "Corrupt one backward rule (negative control)")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*stats) return cmd_stats(stats_data, stats_out);
    if (*pretrain) return cmd_pretrain(pre_config, pre_resume);
    if (*train_cmd) return cmd_train(train_config, train_init);
    if (*eval_cmd) return cmd_eval(eval_config, eval_ckpt, eval_data);
    if (*predict) {
      if (pred_text.empty() && pred_in.empty() && topt->count() == 0) {
        std::cerr << "error: predict needs --text or --in\n";
        return 2;
      }
      return cmd_predict(pred_ckpt, pred_text, pred_in);
    }
    if (*gradcheck) return cmd_gradcheck(gc_op, gc_seed, gc_fault);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
