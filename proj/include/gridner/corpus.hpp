#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gridner/types.hpp"

namespace gridner::data {

// One annotated span; character indices are 0-based inclusive over Unicode
// code points.
struct EntityAnnotation {
  int64_t start_idx = 0;
  int64_t end_idx = 0;
  EntityType type = EntityType::kBod;
  std::u32string surface;

  int64_t length() const { return end_idx - start_idx + 1; }
  bool same_triple(const EntityAnnotation& o) const {
    return start_idx == o.start_idx && end_idx == o.end_idx && type == o.type;
  }
};

struct SentenceRecord {
  std::u32string text;
  std::vector<EntityAnnotation> entities;
};

// Character vocabulary: one token per Unicode code point.
class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr int32_t kCls = 2;
  static constexpr int32_t kSep = 3;
  static constexpr int32_t kMask = 4;
  static constexpr int32_t kNumSpecials = 5;

  int32_t id(char32_t c) const {
    auto it = ids_.find(c);
    return it == ids_.end() ? kUnk : it->second;
  }
  int64_t size() const { return kNumSpecials + static_cast<int64_t>(chars_.size()); }
  const std::vector<char32_t>& chars() const { return chars_; }

  // FNV-1a over the character list in id order.
  uint64_t hash() const;

  static Vocab from_chars(const std::vector<char32_t>& chars);

 private:
  std::vector<char32_t> chars_;  // index i holds the char with id i+5
  std::unordered_map<char32_t, int32_t> ids_;
};

// Specials first, then characters ordered by (frequency desc, code point
// asc). Characters below min_freq are dropped (they map to <unk>).
Vocab build_vocab(const std::vector<SentenceRecord>& records, int min_freq = 1);

// One (query, context) sample for a single entity type.
struct MrcInstance {
  int type_id = 0;  // 0..8
  std::vector<int32_t> token_ids;
  int64_t context_offset = 0;  // index of the first context token
  int64_t context_len = 0;
  std::vector<uint8_t> label_grid;  // n*n, 0 = non-entity
  std::vector<uint8_t> loss_mask;   // n*n
  int32_t record_index = -1;        // provenance for evaluation alignment

  int64_t n() const { return static_cast<int64_t>(token_ids.size()); }
};

struct TruncationReport {
  int64_t truncated_records = 0;
  int64_t dropped_entities = 0;
};

// Exact Table-6 query text for each entity type.
const std::u32string& query_for(EntityType type);

// Builds the token layout [<cls>, query, <sep>, context, <sep>, <pad>...]
// with the upper-triangle context loss mask and the per-type label grid.
// pad_to > layout length appends padding; binary_labels stores 1 instead of
// 1+type_id in the grid (two-class variant).
MrcInstance build_instance(const SentenceRecord& record, EntityType type,
                           const Vocab& vocab, int64_t max_len = 200,
                           int64_t pad_to = 0,
                           TruncationReport* trunc = nullptr,
                           bool binary_labels = false);

// Character sequences for masked-LM pre-training: per-character tokens
// wrapped in <cls>/<sep>, chunked so each sequence fits max_len.
std::vector<std::vector<int32_t>> mlm_corpus(
    const std::vector<SentenceRecord>& records, const Vocab& vocab,
    int64_t max_len = 200);

struct Violation {
  int64_t record_index = -1;
  int64_t entity_index = -1;
  std::string message;
};

// Structural checks (index bounds, surface match, known type). Violations
// are data, not exceptions.
std::vector<Violation> validate(const SentenceRecord& record,
                                int64_t record_index = -1);

// Parses the CMeEE/CBLUE JSON convention. Throws DataError on malformed
// JSON (with line), unknown entity types, or surface/index mismatches;
// duplicate (start, end, type) triples are dropped with a stderr warning.
std::vector<SentenceRecord> load_corpus(const std::string& path);

// Same parse applied to an in-memory JSON document (used by tests).
std::vector<SentenceRecord> parse_corpus(const std::string& json_text,
                                         const std::string& origin = "<memory>");

struct TypeStat {
  int64_t count = 0;
  double percent = 0.0;
  double avg_len = 0.0;
};

struct DatasetStats {
  std::map<std::string, TypeStat> per_type;  // keyed by type name
  int64_t total = 0;
  double total_avg_len = 0.0;
  int64_t flat = 0;
  int64_t nested = 0;
  double nested_pct = 0.0;
  // sym entities containing at least one other (strictly smaller) entity.
  int64_t sym_containers = 0;
  double sym_containers_pct = 0.0;
  // entities strictly inside some sym entity, by their own type.
  std::map<std::string, int64_t> nested_inside_sym;
  int64_t nested_inside_sym_total = 0;
};

// An entity is nested iff some other entity with a strictly larger span
// contains it. Identical spans never nest each other.
bool is_nested_inside(const EntityAnnotation& inner,
                      const EntityAnnotation& outer);

DatasetStats compute_stats(const std::vector<SentenceRecord>& records);

std::string stats_to_json(const DatasetStats& stats);
std::string stats_to_markdown(const DatasetStats& stats);

}  // namespace gridner::data
