#include "gridner/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gridner/error.hpp"
#include "gridner/utf8.hpp"

namespace gridner::data {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

uint64_t Vocab::hash() const {
  uint64_t h = 1469598103934665603ull;
  for (char32_t c : chars_) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (static_cast<uint64_t>(c) >> shift) & 0xFF;
      h *= 1099511628211ull;
    }
  }
  return h;
}

Vocab Vocab::from_chars(const std::vector<char32_t>& chars) {
  Vocab v;
  v.chars_ = chars;
  for (size_t i = 0; i < chars.size(); ++i) {
    v.ids_[chars[i]] = static_cast<int32_t>(i) + kNumSpecials;
  }
  return v;
}

Vocab build_vocab(const std::vector<SentenceRecord>& records, int min_freq) {
  if (records.empty()) throw DataError("build_vocab: empty corpus");
  std::unordered_map<char32_t, int64_t> freq;
  for (const auto& r : records) {
    for (char32_t c : r.text) ++freq[c];
  }
  std::vector<std::pair<char32_t, int64_t>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<char32_t> chars;
  chars.reserve(items.size());
  for (const auto& [c, f] : items) {
    if (f >= min_freq) chars.push_back(c);
  }
  return Vocab::from_chars(chars);
}

// ---------------------------------------------------------------------------
// Queries (one fixed Chinese query per entity type)
// ---------------------------------------------------------------------------

namespace {
const std::array<const char*, kNumEntityTypes> kQueryUtf8 = {
    "在文本中找出身体部位，例如细胞、皮肤、抗体",        // bod
    "在文本中找出疾病，例如癌症、病变、炎症、增生、肿瘤",  // dis
    "在文本中找出临床表现，例如疼痛、痉挛、异常",        // sym
    "在文本中找出医疗程序，例如心电图、病理切片、检测",    // pro
    "在文本中找出医疗设备，例如装置、器、导管",          // equ
    "在文本中找出药物，例如胶囊、疫苗、剂",              // dru
    "在文本中找出医学检验项目，例如尿常规、血常规",      // ite
    "在文本中找出科室，例如科、室",                      // dep
    "在文本中找出微生物，例如病毒、病原体、抗原、核糖",    // mic
};
}  // namespace

const std::u32string& query_for(EntityType type) {
  static const std::array<std::u32string, kNumEntityTypes> queries = [] {
    std::array<std::u32string, kNumEntityTypes> qs;
    for (int i = 0; i < kNumEntityTypes; ++i)
      qs[static_cast<size_t>(i)] = utf8_decode(kQueryUtf8[static_cast<size_t>(i)]);
    return qs;
  }();
  const int idx = static_cast<int>(type);
  if (idx < 0 || idx >= kNumEntityTypes) {
    throw ConfigError("query_for: unknown entity type id " + std::to_string(idx));
  }
  return queries[static_cast<size_t>(idx)];
}

// ---------------------------------------------------------------------------
// Loading / validation
// ---------------------------------------------------------------------------

std::vector<Violation> validate(const SentenceRecord& record,
                                int64_t record_index) {
  std::vector<Violation> out;
  const int64_t len = static_cast<int64_t>(record.text.size());
  for (size_t ei = 0; ei < record.entities.size(); ++ei) {
    const auto& e = record.entities[ei];
    const auto at = [&](std::string msg) {
      out.push_back({record_index, static_cast<int64_t>(ei), std::move(msg)});
    };
    if (static_cast<int>(e.type) < 0 ||
        static_cast<int>(e.type) >= kNumEntityTypes) {
      at("unknown entity type id " + std::to_string(static_cast<int>(e.type)));
      continue;
    }
    if (e.start_idx < 0 || e.end_idx < e.start_idx || e.end_idx >= len) {
      at("span [" + std::to_string(e.start_idx) + "," +
         std::to_string(e.end_idx) + "] out of bounds for text of length " +
         std::to_string(len));
      continue;
    }
    const std::u32string slice =
        record.text.substr(static_cast<size_t>(e.start_idx),
                           static_cast<size_t>(e.length()));
    if (slice != e.surface) {
      at("surface \"" + utf8_encode(e.surface) + "\" does not match text slice \"" +
         utf8_encode(slice) + "\"");
    }
  }
  return out;
}

namespace {

int line_of_byte_offset(const std::string& text, size_t offset) {
  int line = 1;
  for (size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') ++line;
  }
  return line;
}

std::vector<SentenceRecord> parse_corpus_impl(const std::string& text,
                                              const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(origin + ": JSON parse error at line " +
                    std::to_string(line_of_byte_offset(text, e.byte)) + ": " +
                    e.what());
  }
  if (!doc.is_array()) {
    throw DataError(origin + ": top-level JSON value must be an array");
  }
  std::vector<SentenceRecord> records;
  records.reserve(doc.size());
  int64_t dedup_dropped = 0;
  for (size_t ri = 0; ri < doc.size(); ++ri) {
    const auto& obj = doc[ri];
    const auto fail = [&](const std::string& msg) {
      throw DataError(origin + ": record " + std::to_string(ri) + ": " + msg);
    };
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("entities")) {
      fail("expected an object with \"text\" and \"entities\"");
    }
    if (!obj["text"].is_string() || !obj["entities"].is_array()) {
      fail("\"text\" must be a string and \"entities\" an array");
    }
    SentenceRecord rec;
    rec.text = utf8_decode(obj["text"].get<std::string>());
    std::set<std::tuple<int64_t, int64_t, int>> seen;
    for (size_t ei = 0; ei < obj["entities"].size(); ++ei) {
      const auto& eo = obj["entities"][ei];
      if (!eo.is_object() || !eo.contains("start_idx") ||
          !eo.contains("end_idx") || !eo.contains("type") ||
          !eo.contains("entity")) {
        fail("entity " + std::to_string(ei) +
             " must carry start_idx/end_idx/type/entity");
      }
      if (!eo["start_idx"].is_number_integer() ||
          !eo["end_idx"].is_number_integer() || !eo["type"].is_string() ||
          !eo["entity"].is_string()) {
        fail("entity " + std::to_string(ei) + " has wrongly typed fields");
      }
      EntityAnnotation e;
      e.start_idx = eo["start_idx"].get<int64_t>();
      e.end_idx = eo["end_idx"].get<int64_t>();
      const std::string tname = eo["type"].get<std::string>();
      const auto t = type_from_name(tname);
      if (!t) {
        fail("entity " + std::to_string(ei) + " has unknown type \"" + tname +
             "\"");
      }
      e.type = *t;
      e.surface = utf8_decode(eo["entity"].get<std::string>());
      const auto key = std::make_tuple(e.start_idx, e.end_idx,
                                       static_cast<int>(e.type));
      if (!seen.insert(key).second) {
        ++dedup_dropped;
        continue;
      }
      rec.entities.push_back(std::move(e));
    }
    records.push_back(std::move(rec));
  }
  if (dedup_dropped > 0) {
    std::cerr << "warning: " << origin << ": dropped " << dedup_dropped
              << " duplicate entity triple(s)\n";
  }
  for (size_t ri = 0; ri < records.size(); ++ri) {
    const auto violations = validate(records[ri], static_cast<int64_t>(ri));
    if (!violations.empty()) {
      std::ostringstream os;
      os << origin << ": record " << violations[0].record_index << " entity "
         << violations[0].entity_index << ": " << violations[0].message;
      if (violations.size() > 1) {
        os << " (+" << violations.size() - 1 << " more violation(s))";
      }
      throw DataError(os.str());
    }
  }
  return records;
}

}  // namespace

std::vector<SentenceRecord> parse_corpus(const std::string& json_text,
                                         const std::string& origin) {
  return parse_corpus_impl(json_text, origin);
}

std::vector<SentenceRecord> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_corpus: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_corpus_impl(buf.str(), path);
}

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

MrcInstance build_instance(const SentenceRecord& record, EntityType type,
                           const Vocab& vocab, int64_t max_len, int64_t pad_to,
                           TruncationReport* trunc, bool binary_labels) {
  const std::u32string& query = query_for(type);
  const int64_t q = static_cast<int64_t>(query.size());
  const int64_t budget = max_len - q - 3;
  if (budget < 1) {
    throw ConfigError("build_instance: query of length " + std::to_string(q) +
                      " leaves no context budget at max_len " +
                      std::to_string(max_len));
  }
  const int64_t text_len = static_cast<int64_t>(record.text.size());
  const int64_t ctx_len = std::min(text_len, budget);

  MrcInstance inst;
  inst.type_id = static_cast<int>(type);
  inst.context_offset = 1 + q + 1;
  inst.context_len = ctx_len;
  inst.token_ids.reserve(static_cast<size_t>(inst.context_offset + ctx_len + 1));
  inst.token_ids.push_back(Vocab::kCls);
  for (char32_t c : query) inst.token_ids.push_back(vocab.id(c));
  inst.token_ids.push_back(Vocab::kSep);
  for (int64_t i = 0; i < ctx_len; ++i)
    inst.token_ids.push_back(vocab.id(record.text[static_cast<size_t>(i)]));
  inst.token_ids.push_back(Vocab::kSep);
  while (pad_to > static_cast<int64_t>(inst.token_ids.size()))
    inst.token_ids.push_back(Vocab::kPad);

  const int64_t n = inst.n();
  inst.label_grid.assign(static_cast<size_t>(n * n), 0);
  inst.loss_mask.assign(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < ctx_len; ++i) {
    for (int64_t j = i; j < ctx_len; ++j) {
      inst.loss_mask[static_cast<size_t>((inst.context_offset + i) * n +
                                         inst.context_offset + j)] = 1;
    }
  }
  bool dropped_any = false;
  for (const auto& e : record.entities) {
    if (e.type != type) continue;
    if (e.end_idx >= ctx_len) {
      if (trunc) ++trunc->dropped_entities;
      dropped_any = true;
      continue;
    }
    const int64_t gi = inst.context_offset + e.start_idx;
    const int64_t gj = inst.context_offset + e.end_idx;
    inst.label_grid[static_cast<size_t>(gi * n + gj)] =
        binary_labels ? 1 : static_cast<uint8_t>(1 + inst.type_id);
  }
  if (trunc && (dropped_any || ctx_len < text_len)) ++trunc->truncated_records;
  return inst;
}

std::vector<std::vector<int32_t>> mlm_corpus(
    const std::vector<SentenceRecord>& records, const Vocab& vocab,
    int64_t max_len) {
  const int64_t payload = max_len - 2;
  if (payload < 1) throw ConfigError("mlm_corpus: max_len too small");
  std::vector<std::vector<int32_t>> out;
  for (const auto& r : records) {
    const int64_t len = static_cast<int64_t>(r.text.size());
    for (int64_t start = 0; start < len; start += payload) {
      const int64_t chunk = std::min(payload, len - start);
      std::vector<int32_t> seq;
      seq.reserve(static_cast<size_t>(chunk + 2));
      seq.push_back(Vocab::kCls);
      for (int64_t i = 0; i < chunk; ++i)
        seq.push_back(vocab.id(r.text[static_cast<size_t>(start + i)]));
      seq.push_back(Vocab::kSep);
      out.push_back(std::move(seq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

bool is_nested_inside(const EntityAnnotation& inner,
                      const EntityAnnotation& outer) {
  return outer.start_idx <= inner.start_idx && inner.end_idx <= outer.end_idx &&
         outer.length() > inner.length();
}

DatasetStats compute_stats(const std::vector<SentenceRecord>& records) {
  DatasetStats st;
  std::array<int64_t, kNumEntityTypes> counts{};
  std::array<int64_t, kNumEntityTypes> len_sums{};
  std::array<int64_t, kNumEntityTypes> inside_sym{};
  int64_t total_len = 0;

  for (const auto& r : records) {
    const auto& es = r.entities;
    for (size_t i = 0; i < es.size(); ++i) {
      const int t = static_cast<int>(es[i].type);
      ++counts[static_cast<size_t>(t)];
      len_sums[static_cast<size_t>(t)] += es[i].length();
      total_len += es[i].length();

      bool nested = false;
      bool in_sym = false;
      for (size_t j = 0; j < es.size(); ++j) {
        if (i == j) continue;
        if (is_nested_inside(es[i], es[j])) {
          nested = true;
          if (es[j].type == EntityType::kSym) in_sym = true;
        }
      }
      if (nested) ++st.nested;
      if (in_sym) ++inside_sym[static_cast<size_t>(t)];
      if (es[i].type == EntityType::kSym) {
        bool contains_any = false;
        for (size_t j = 0; j < es.size() && !contains_any; ++j) {
          if (i != j && is_nested_inside(es[j], es[i])) contains_any = true;
        }
        if (contains_any) ++st.sym_containers;
      }
    }
  }

  for (int t = 0; t < kNumEntityTypes; ++t) st.total += counts[static_cast<size_t>(t)];
  st.flat = st.total - st.nested;
  st.nested_pct = st.total > 0 ? 100.0 * static_cast<double>(st.nested) /
                                     static_cast<double>(st.total)
                               : 0.0;
  st.total_avg_len = st.total > 0 ? static_cast<double>(total_len) /
                                        static_cast<double>(st.total)
                                  : 0.0;
  const int64_t sym_count = counts[static_cast<size_t>(EntityType::kSym)];
  st.sym_containers_pct =
      sym_count > 0
          ? 100.0 * static_cast<double>(st.sym_containers) /
                static_cast<double>(sym_count)
          : 0.0;
  for (int t = 0; t < kNumEntityTypes; ++t) {
    TypeStat ts;
    ts.count = counts[static_cast<size_t>(t)];
    ts.percent = st.total > 0 ? 100.0 * static_cast<double>(ts.count) /
                                    static_cast<double>(st.total)
                              : 0.0;
    ts.avg_len = ts.count > 0 ? static_cast<double>(len_sums[static_cast<size_t>(t)]) /
                                    static_cast<double>(ts.count)
                              : 0.0;
    st.per_type[std::string(kEntityTypeNames[static_cast<size_t>(t)])] = ts;
    st.nested_inside_sym[std::string(kEntityTypeNames[static_cast<size_t>(t)])] =
        inside_sym[static_cast<size_t>(t)];
    st.nested_inside_sym_total += inside_sym[static_cast<size_t>(t)];
  }
  return st;
}

std::string stats_to_json(const DatasetStats& st) {
  json per_type = json::object();
  for (const auto& [name, ts] : st.per_type) {
    per_type[name] = {{"count", ts.count},
                      {"percent", ts.percent},
                      {"avg_len", ts.avg_len}};
  }
  json inside = json::object();
  for (const auto& [name, c] : st.nested_inside_sym) {
    const double pct = st.nested_inside_sym_total > 0
                           ? 100.0 * static_cast<double>(c) /
                                 static_cast<double>(st.nested_inside_sym_total)
                           : 0.0;
    inside[name] = {{"count", c}, {"percent", pct}};
  }
  json doc = {
      {"entities",
       {{"per_type", per_type},
        {"total", st.total},
        {"total_avg_len", st.total_avg_len}}},
      {"nesting",
       {{"flat", st.flat},
        {"nested", st.nested},
        {"nested_pct", st.nested_pct},
        {"sym_containers", st.sym_containers},
        {"sym_containers_pct", st.sym_containers_pct}}},
      {"nested_inside_sym",
       {{"per_type", inside}, {"total", st.nested_inside_sym_total}}},
  };
  return doc.dump(2);
}

namespace {
std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}
}  // namespace

std::string stats_to_markdown(const DatasetStats& st) {
  std::ostringstream os;
  os << "## Entity statistics\n\n";
  os << "| Entity | #Entity | Per/% | Avg.len |\n";
  os << "|---|---|---|---|\n";
  for (const auto name : kEntityTypeNames) {
    const auto& ts = st.per_type.at(std::string(name));
    os << "| " << name << " | " << ts.count << " | " << fixed2(ts.percent)
       << " | " << fixed2(ts.avg_len) << " |\n";
  }
  os << "| Total | " << st.total << " | 100 | " << fixed2(st.total_avg_len)
     << " |\n\n";
  os << "## Nesting\n\n";
  os << "| | Count | % |\n|---|---|---|\n";
  os << "| Flat | " << st.flat << " | "
     << fixed2(st.total > 0 ? 100.0 - st.nested_pct : 0.0) << " |\n";
  os << "| Nested | " << st.nested << " | " << fixed2(st.nested_pct) << " |\n";
  os << "| Nested in sym | " << st.sym_containers << " | "
     << fixed2(st.sym_containers_pct) << " |\n\n";
  os << "## Entities nested inside sym\n\n";
  os << "| Entity | #Nested | Per/% |\n|---|---|---|\n";
  for (const auto name : kEntityTypeNames) {
    const int64_t c = st.nested_inside_sym.at(std::string(name));
    const double pct = st.nested_inside_sym_total > 0
                           ? 100.0 * static_cast<double>(c) /
                                 static_cast<double>(st.nested_inside_sym_total)
                           : 0.0;
    os << "| " << name << " | " << c << " | " << fixed2(pct) << " |\n";
  }
  os << "| Total | " << st.nested_inside_sym_total << " | 100 |\n";
  return os.str();
}

}  // namespace gridner::data
