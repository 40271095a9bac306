// Python bindings: corpus loading, dataset statistics, the training engine
// (f64), prediction, evaluation and the gradient-check suite.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "gridner/checkpoint.hpp"
#include "gridner/config.hpp"
#include "gridner/corpus.hpp"
#include "gridner/eval.hpp"
#include "gridner/gradcheck_suite.hpp"
#include "gridner/pipeline.hpp"
#include "gridner/train.hpp"
#include "gridner/utf8.hpp"

namespace py = pybind11;
using namespace gridner;

namespace {

struct PyRecord {
  data::SentenceRecord rec;
};

PyRecord make_record(const std::string& text,
                     const std::vector<std::tuple<int64_t, int64_t, std::string>>&
                         entities) {
  PyRecord out;
  out.rec.text = utf8_decode(text);
  for (const auto& [start, end, type_name_str] : entities) {
    const auto t = type_from_name(type_name_str);
    if (!t) throw DataError("unknown entity type \"" + type_name_str + "\"");
    if (start < 0 || end < start ||
        end >= static_cast<int64_t>(out.rec.text.size())) {
      throw DataError("entity span out of bounds");
    }
    data::EntityAnnotation e;
    e.start_idx = start;
    e.end_idx = end;
    e.type = *t;
    e.surface = out.rec.text.substr(static_cast<size_t>(start),
                                    static_cast<size_t>(end - start + 1));
    out.rec.entities.push_back(std::move(e));
  }
  return out;
}

std::vector<data::SentenceRecord> unwrap(const std::vector<PyRecord>& records) {
  std::vector<data::SentenceRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.rec);
  return out;
}

py::list entities_to_py(const std::vector<eval::PredictedEntity>& preds,
                        const std::u32string& text) {
  py::list out;
  for (const auto& e : preds) {
    py::dict d;
    d["start_idx"] = e.start;
    d["end_idx"] = e.end;
    d["type"] = std::string(type_name(e.type));
    d["score"] = e.score;
    if (e.start >= 0 && e.end < static_cast<int64_t>(text.size())) {
      d["entity"] = utf8_encode(text.substr(static_cast<size_t>(e.start),
                                            static_cast<size_t>(e.end - e.start + 1)));
    }
    out.append(std::move(d));
  }
  return out;
}

// Fine-tuning / prediction engine at 64-bit precision.
class Engine {
 public:
  Engine(const std::string& config_json, const std::vector<PyRecord>& records)
      : cfg_(parse_run_config(config_json)) {
    vocab_ = pipeline::build_vocab_with_queries(unwrap(records));
    cfg_.model.vocab_size = vocab_.size();
    cfg_.validate();
    Rng init = Rng(cfg_.seed).stream("init");
    params_ = nn::init_params<double>(cfg_.model, init);
  }

  explicit Engine(const std::string& checkpoint_path) {
    auto loaded = train::load_checkpoint<double>(checkpoint_path);
    vocab_ = pipeline::vocab_from_meta(loaded.meta);
    cfg_.model = loaded.meta.model_config;
    Rng init(0);
    params_ = nn::init_params<double>(cfg_.model, init);
    train::apply_checkpoint(params_, loaded);
    state_.step = loaded.meta.step;
  }

  py::list fit(const std::vector<PyRecord>& train_records,
               const std::vector<PyRecord>& dev_records,
               std::optional<int64_t> epochs) {
    TrainConfig t = cfg_.train;
    if (epochs) t.epochs = *epochs;
    auto result = train::finetune(unwrap(train_records), unwrap(dev_records),
                                  params_, state_, cfg_.model, t, vocab_);
    if (result.best_f1 >= 0) {
      // keep the best-F1 parameters, matching the CLI behavior
      for (const auto& [name, tensor] : result.best_params.items()) {
        params_.get(name)->value = tensor->value;
      }
    }
    py::list log;
    for (const auto& e : result.log) {
      py::dict d;
      d["epoch"] = e.epoch;
      d["train_loss"] = e.train_loss;
      if (e.dev_f1 >= 0) d["dev_f1"] = e.dev_f1;
      log.append(std::move(d));
    }
    return log;
  }

  std::vector<double> pretrain(const std::vector<PyRecord>& records,
                               std::optional<int64_t> epochs) {
    TrainConfig t = cfg_.train;
    if (epochs) t.mlm_epochs = *epochs;
    const auto sequences =
        data::mlm_corpus(unwrap(records), vocab_, cfg_.model.max_len);
    auto log = train::mlm_pretrain(sequences, params_, state_, cfg_.model, t);
    return log.epoch_losses;
  }

  py::list predict(const std::string& text) const {
    data::SentenceRecord rec;
    rec.text = utf8_decode(text);
    return entities_to_py(eval::predict(rec, params_, vocab_, cfg_.model),
                          rec.text);
  }

  std::string evaluate_json(const std::vector<PyRecord>& records) const {
    auto run =
        pipeline::evaluate_records(unwrap(records), params_, vocab_, cfg_.model);
    return eval::report_to_json(run.report, run_config_to_json(cfg_));
  }

  double micro_f1(const std::vector<PyRecord>& records) const {
    return eval::micro_for_records(unwrap(records), params_, vocab_, cfg_.model)
        .f1;
  }

  void save(const std::string& path) const {
    train::save_checkpoint(path, params_,
                           pipeline::make_meta<double>(cfg_.model, vocab_,
                                                       state_.step, -1.0));
  }

  int64_t param_count() const { return params_.param_count(); }
  int64_t vocab_size() const { return vocab_.size(); }

 private:
  RunConfig cfg_;
  data::Vocab vocab_;
  nn::ParamStore<double> params_;
  train::OptimState<double> state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Flat and nested medical NER over a word-pair grid";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");

  py::class_<PyRecord>(m, "Record")
      .def(py::init(&make_record), py::arg("text"),
           py::arg("entities") =
               std::vector<std::tuple<int64_t, int64_t, std::string>>{})
      .def_property_readonly(
          "text", [](const PyRecord& r) { return utf8_encode(r.rec.text); })
      .def_property_readonly("entities",
                             [](const PyRecord& r) {
                               py::list out;
                               for (const auto& e : r.rec.entities) {
                                 py::dict d;
                                 d["start_idx"] = e.start_idx;
                                 d["end_idx"] = e.end_idx;
                                 d["type"] = std::string(type_name(e.type));
                                 d["entity"] = utf8_encode(e.surface);
                                 out.append(std::move(d));
                               }
                               return out;
                             })
      .def("__repr__", [](const PyRecord& r) {
        return "Record(text=\"" + utf8_encode(r.rec.text) + "\", entities=" +
               std::to_string(r.rec.entities.size()) + ")";
      });

  m.def(
      "load_corpus",
      [](const std::string& path) {
        std::vector<PyRecord> out;
        for (auto& rec : data::load_corpus(path)) {
          out.push_back(PyRecord{std::move(rec)});
        }
        return out;
      },
      py::arg("path"), "Load a CMeEE-format JSON corpus");

  m.def(
      "stats_json",
      [](const std::vector<PyRecord>& records) {
        return data::stats_to_json(data::compute_stats(unwrap(records)));
      },
      py::arg("records"), "Dataset statistics as a JSON string");

  m.def(
      "stats_markdown",
      [](const std::vector<PyRecord>& records) {
        return data::stats_to_markdown(data::compute_stats(unwrap(records)));
      },
      py::arg("records"));

  m.def(
      "query_for",
      [](const std::string& type_name_str) {
        const auto t = type_from_name(type_name_str);
        if (!t) throw ConfigError("unknown entity type \"" + type_name_str + "\"");
        return utf8_encode(data::query_for(*t));
      },
      py::arg("type"), "The fixed Chinese query text for one entity type");

  m.def(
      "gradcheck",
      [](uint64_t seed, bool include_model) {
        py::list out;
        for (const auto& row :
             diff::run_gradcheck_suite(seed, "", include_model)) {
          py::dict d;
          d["op"] = row.name;
          d["max_rel_err"] = row.max_rel_err;
          d["threshold"] = row.threshold;
          d["pass"] = row.pass;
          out.append(std::move(d));
        }
        return out;
      },
      py::arg("seed") = 1, py::arg("include_model") = true,
      "Finite-difference checks for every op (and the end-to-end model)");

  py::class_<Engine>(m, "Engine")
      .def(py::init<const std::string&, const std::vector<PyRecord>&>(),
           py::arg("config_json"), py::arg("vocab_records"),
           "New engine; the vocabulary comes from the given records plus the "
           "nine query strings")
      .def_static(
          "load", [](const std::string& path) { return Engine(path); },
          py::arg("checkpoint_path"))
      .def("fit", &Engine::fit, py::arg("train_records"),
           py::arg("dev_records") = std::vector<PyRecord>{},
           py::arg("epochs") = std::nullopt)
      .def("pretrain", &Engine::pretrain, py::arg("records"),
           py::arg("epochs") = std::nullopt)
      .def("predict", &Engine::predict, py::arg("text"))
      .def("evaluate_json", &Engine::evaluate_json, py::arg("records"))
      .def("micro_f1", &Engine::micro_f1, py::arg("records"))
      .def("save", &Engine::save, py::arg("path"))
      .def_property_readonly("param_count", &Engine::param_count)
      .def_property_readonly("vocab_size", &Engine::vocab_size);
}
