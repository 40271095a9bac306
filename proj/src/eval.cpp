#include "gridner/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gridner/error.hpp"

namespace gridner::eval {

using json = nlohmann::json;

std::vector<PredictedEntity> decode_grid(const std::vector<double>& probs,
                                         int64_t n, int64_t n_classes,
                                         const data::MrcInstance& inst,
                                         int64_t positive_class,
                                         DecodeDiag* diag) {
  if (inst.n() != n ||
      static_cast<int64_t>(probs.size()) != n * n * n_classes) {
    throw ContractError("decode_grid: probs shape does not match instance");
  }
  if (positive_class < 0) positive_class = 1 + inst.type_id;
  std::map<Triple, double> best;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (!inst.loss_mask[static_cast<size_t>(i * n + j)]) continue;
      const double* cell = probs.data() + (i * n + j) * n_classes;
      int64_t arg = 0;
      for (int64_t c = 1; c < n_classes; ++c) {
        if (cell[c] > cell[arg]) arg = c;  // ties keep the lowest index
      }
      if (arg == 0) continue;
      if (arg != positive_class) {
        if (diag) ++diag->off_query_cells;
        continue;
      }
      const Triple tr{i - inst.context_offset, j - inst.context_offset,
                      inst.type_id};
      auto [it, inserted] = best.emplace(tr, cell[arg]);
      if (!inserted && cell[arg] > it->second) it->second = cell[arg];
    }
  }
  std::vector<PredictedEntity> out;
  out.reserve(best.size());
  for (const auto& [tr, score] : best) {
    out.push_back({tr.start, tr.end, static_cast<EntityType>(tr.type), score});
  }
  return out;
}

std::vector<std::vector<Triple>> gold_triples(
    const std::vector<data::SentenceRecord>& records) {
  std::vector<std::vector<Triple>> out(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    out[i].reserve(records[i].entities.size());
    for (const auto& e : records[i].entities) out[i].push_back(to_triple(e));
  }
  return out;
}

namespace {

void finish(MicroMetrics& m) {
  m.precision = (m.tp + m.fp) > 0
                    ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp)
                    : 0.0;
  m.recall = (m.tp + m.fn) > 0
                 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn)
                 : 0.0;
  m.f1 = (m.precision + m.recall) > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
}

void check_aligned(const std::vector<std::vector<Triple>>& preds,
                   const std::vector<std::vector<Triple>>& golds) {
  if (preds.size() != golds.size()) {
    throw ContractError("metrics: prediction and gold record lists differ in length");
  }
}

}  // namespace

MicroMetrics micro_metrics(const std::vector<std::vector<Triple>>& preds,
                           const std::vector<std::vector<Triple>>& golds) {
  check_aligned(preds, golds);
  MicroMetrics m;
  for (size_t r = 0; r < preds.size(); ++r) {
    const std::set<Triple> p(preds[r].begin(), preds[r].end());
    const std::set<Triple> g(golds[r].begin(), golds[r].end());
    for (const auto& t : p) {
      if (g.count(t)) {
        ++m.tp;
      } else {
        ++m.fp;
      }
    }
    for (const auto& t : g) {
      if (!p.count(t)) ++m.fn;
    }
  }
  finish(m);
  return m;
}

PerTypeReport per_type_report(const std::vector<std::vector<Triple>>& preds,
                              const std::vector<std::vector<Triple>>& golds) {
  check_aligned(preds, golds);
  PerTypeReport rep;
  int present = 0;
  for (int t = 0; t < kNumEntityTypes; ++t) {
    std::vector<std::vector<Triple>> pt(preds.size()), gt(golds.size());
    for (size_t r = 0; r < preds.size(); ++r) {
      for (const auto& tr : preds[r])
        if (tr.type == t) pt[r].push_back(tr);
      for (const auto& tr : golds[r])
        if (tr.type == t) gt[r].push_back(tr);
    }
    auto m = micro_metrics(pt, gt);
    const bool absent = (m.tp + m.fp + m.fn) == 0;
    rep.rows[static_cast<size_t>(t)] = m;
    if (absent) {
      rep.absent_types.push_back(t);
    } else {
      ++present;
      rep.macro_precision += m.precision;
      rep.macro_recall += m.recall;
      rep.macro_f1 += m.f1;
    }
  }
  if (present > 0) {
    rep.macro_precision /= present;
    rep.macro_recall /= present;
    rep.macro_f1 /= present;
  }
  return rep;
}

ConfusionReport confusion_matrix(const std::vector<std::vector<Triple>>& preds,
                                 const std::vector<std::vector<Triple>>& golds) {
  check_aligned(preds, golds);
  ConfusionReport rep;
  for (size_t r = 0; r < preds.size(); ++r) {
    const std::set<Triple> g(golds[r].begin(), golds[r].end());
    std::set<std::pair<int64_t, int64_t>> pred_spans;
    for (const auto& p : preds[r]) pred_spans.insert({p.start, p.end});
    for (const auto& p : preds[r]) {
      if (g.count(p)) {
        ++rep.matrix[static_cast<size_t>(p.type)][static_cast<size_t>(p.type)];
        continue;
      }
      // exact-boundary match against some gold of a different type; pick the
      // lowest gold type id for determinism
      int gold_type = -1;
      for (const auto& gt : g) {
        if (gt.start == p.start && gt.end == p.end) {
          gold_type = gt.type;
          break;  // set order sorts by (start,end,type)
        }
      }
      if (gold_type >= 0) {
        ++rep.matrix[static_cast<size_t>(p.type)][static_cast<size_t>(gold_type)];
      } else {
        ++rep.unmatched_predictions;
      }
    }
    for (const auto& gt : g) {
      if (!pred_spans.count({gt.start, gt.end})) ++rep.unmatched_golds;
    }
  }
  return rep;
}

namespace {

bool contains_strictly(const Triple& outer, const Triple& inner) {
  return outer.start <= inner.start && inner.end <= outer.end &&
         (outer.end - outer.start) > (inner.end - inner.start);
}

}  // namespace

NestedFlatReport nested_flat_report(
    const std::vector<std::vector<Triple>>& preds,
    const std::vector<std::vector<Triple>>& golds) {
  check_aligned(preds, golds);
  NestedFlatReport rep;
  for (size_t r = 0; r < preds.size(); ++r) {
    const std::set<Triple> p(preds[r].begin(), preds[r].end());
    const std::set<Triple> g(golds[r].begin(), golds[r].end());
    for (const auto& e : g) {
      bool inner = false, outer = false;
      for (const auto& o : g) {
        if (o == e) continue;
        inner = inner || contains_strictly(o, e);
        outer = outer || contains_strictly(e, o);
      }
      const bool hit = p.count(e) > 0;
      const auto tally = [hit](SubsetRecall& s) {
        ++s.total;
        if (hit) ++s.recognized;
      };
      tally(rep.all);
      if (inner) tally(rep.inner);
      if (outer) tally(rep.outer);
      if (inner || outer) {
        tally(rep.nested);
      } else {
        tally(rep.flat);
      }
    }
  }
  return rep;
}

MetricsReport evaluate(const std::vector<std::vector<Triple>>& preds,
                       const std::vector<std::vector<Triple>>& golds) {
  MetricsReport rep;
  rep.micro = micro_metrics(preds, golds);
  rep.per_type = per_type_report(preds, golds);
  rep.confusion = confusion_matrix(preds, golds);
  rep.nested_flat = nested_flat_report(preds, golds);
  return rep;
}

namespace {

std::string pct2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

json metrics_json(const MicroMetrics& m) {
  return json{{"tp", m.tp},         {"fp", m.fp},
              {"fn", m.fn},         {"precision", m.precision},
              {"recall", m.recall}, {"f1", m.f1}};
}

json subset_json(const SubsetRecall& s) {
  json j{{"recognized", s.recognized}, {"total", s.total}};
  if (s.defined()) {
    j["recall"] = s.recall();
  } else {
    j["recall"] = nullptr;
  }
  return j;
}

}  // namespace

std::string report_to_json(const MetricsReport& rep,
                           const std::string& config_echo_json) {
  json per_type = json::object();
  for (int t = 0; t < kNumEntityTypes; ++t) {
    per_type[std::string(kEntityTypeNames[static_cast<size_t>(t)])] =
        metrics_json(rep.per_type.rows[static_cast<size_t>(t)]);
  }
  json absent = json::array();
  for (int t : rep.per_type.absent_types) {
    absent.push_back(std::string(kEntityTypeNames[static_cast<size_t>(t)]));
  }
  json confusion = json::object();
  confusion["labels"] = json::array();
  for (const auto name : kEntityTypeNames)
    confusion["labels"].push_back(std::string(name));
  confusion["matrix"] = json::array();
  for (const auto& row : rep.confusion.matrix) {
    json r = json::array();
    for (int64_t v : row) r.push_back(v);
    confusion["matrix"].push_back(r);
  }
  json doc{
      {"micro", metrics_json(rep.micro)},
      {"macro",
       {{"precision", rep.per_type.macro_precision},
        {"recall", rep.per_type.macro_recall},
        {"f1", rep.per_type.macro_f1},
        {"absent_types", absent}}},
      {"per_type", per_type},
      {"confusion", confusion},
      {"nested_flat",
       {{"all", subset_json(rep.nested_flat.all)},
        {"flat", subset_json(rep.nested_flat.flat)},
        {"nested", subset_json(rep.nested_flat.nested)},
        {"inner", subset_json(rep.nested_flat.inner)},
        {"outer", subset_json(rep.nested_flat.outer)}}},
      {"boundary_errors",
       {{"unmatched_predictions", rep.confusion.unmatched_predictions},
        {"unmatched_golds", rep.confusion.unmatched_golds}}},
      {"truncation",
       {{"truncated_records", rep.truncation.truncated_records},
        {"dropped_entities", rep.truncation.dropped_entities}}},
      {"diagnostics", {{"off_query_cells", rep.off_query_cells}}},
  };
  if (!config_echo_json.empty()) {
    doc["config"] = json::parse(config_echo_json);
  }
  return doc.dump(2);
}

std::string report_to_markdown(const MetricsReport& rep) {
  std::ostringstream os;
  os << "## Micro metrics\n\n";
  os << "| Pre. | Rec. | F1 |\n|---|---|---|\n";
  os << "| " << pct2(rep.micro.precision) << " | " << pct2(rep.micro.recall)
     << " | " << pct2(rep.micro.f1) << " |\n\n";
  os << "## Results by entity type\n\n";
  os << "| Entity | Pre. | Rec. | F1 |\n|---|---|---|---|\n";
  for (int t = 0; t < kNumEntityTypes; ++t) {
    const auto& m = rep.per_type.rows[static_cast<size_t>(t)];
    os << "| " << kEntityTypeNames[static_cast<size_t>(t)] << " | "
       << pct2(m.precision) << " | " << pct2(m.recall) << " | " << pct2(m.f1)
       << " |\n";
  }
  os << "| Mac-Avg | " << pct2(rep.per_type.macro_precision) << " | "
     << pct2(rep.per_type.macro_recall) << " | "
     << pct2(rep.per_type.macro_f1) << " |\n";
  if (!rep.per_type.absent_types.empty()) {
    os << "\n_Absent from gold and predictions (excluded from Mac-Avg):";
    for (int t : rep.per_type.absent_types)
      os << " " << kEntityTypeNames[static_cast<size_t>(t)];
    os << "_\n";
  }
  os << "\n## Nested and flat recall (%)\n\n";
  os << "| Named Entity | Recall |\n|---|---|\n";
  const auto row = [&](const char* name, const SubsetRecall& s) {
    os << "| " << name << " | "
       << (s.defined() ? pct2(s.recall()) : std::string("-")) << " |\n";
  };
  row("All", rep.nested_flat.all);
  row("Flat", rep.nested_flat.flat);
  row("Nested", rep.nested_flat.nested);
  row("Inner", rep.nested_flat.inner);
  row("Outer", rep.nested_flat.outer);
  os << "\n## Confusion matrix (rows = predicted, columns = gold)\n\n";
  os << "| |";
  for (const auto name : kEntityTypeNames) os << " " << name << " |";
  os << "\n|---|";
  for (int t = 0; t < kNumEntityTypes; ++t) os << "---|";
  os << "\n";
  for (int pt = 0; pt < kNumEntityTypes; ++pt) {
    os << "| " << kEntityTypeNames[static_cast<size_t>(pt)] << " |";
    for (int gt = 0; gt < kNumEntityTypes; ++gt) {
      os << " "
         << rep.confusion.matrix[static_cast<size_t>(pt)][static_cast<size_t>(gt)]
         << " |";
    }
    os << "\n";
  }
  os << "\nBoundary errors: " << rep.confusion.unmatched_predictions
     << " unmatched prediction(s), " << rep.confusion.unmatched_golds
     << " unmatched gold(s).\n";
  os << "Truncation: " << rep.truncation.truncated_records << " record(s), "
     << rep.truncation.dropped_entities << " dropped entit(ies).\n";
  return os.str();
}

}  // namespace gridner::eval
