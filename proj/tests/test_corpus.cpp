#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "gridner/corpus.hpp"
#include "gridner/error.hpp"
#include "gridner/eval.hpp"
#include "gridner/utf8.hpp"
#include "test_helpers.hpp"

using namespace gridner;
using namespace gridner::data;

TEST_CASE("load_corpus: empty array, hand fixture, malformed input") {
  CHECK(parse_corpus("[]").empty());

  const auto records = parse_corpus(
      R"([{"text":"细胞增生","entities":[
            {"start_idx":0,"end_idx":1,"type":"bod","entity":"细胞"}]}])");
  REQUIRE(records.size() == 1);
  REQUIRE(records[0].entities.size() == 1);
  CHECK(records[0].text == utf8_decode("细胞增生"));
  CHECK(records[0].entities[0].type == EntityType::kBod);
  CHECK(records[0].entities[0].surface == utf8_decode("细胞"));

  CHECK_THROWS_WITH_AS(parse_corpus("[{\"text\": }]"),
                       doctest::Contains("line"), DataError);
  CHECK_THROWS_AS(parse_corpus("{\"text\":\"x\"}"), DataError);
  CHECK_THROWS_AS(load_corpus("/nonexistent/path.json"), IoError);
}

TEST_CASE("load_corpus: surface mismatch reports the record index") {
  const std::string doc =
      R"([{"text":"细胞增生","entities":[
            {"start_idx":0,"end_idx":1,"type":"bod","entity":"增生"}]}])";
  CHECK_THROWS_WITH_AS(parse_corpus(doc), doctest::Contains("record 0"),
                       DataError);
}

TEST_CASE("load_corpus: unknown type names the record") {
  const std::string doc =
      R"([{"text":"abc","entities":[
            {"start_idx":0,"end_idx":0,"type":"xyz","entity":"a"}]}])";
  CHECK_THROWS_WITH_AS(parse_corpus(doc), doctest::Contains("xyz"), DataError);
}

TEST_CASE("load_corpus: duplicate triples are dropped") {
  const auto records = parse_corpus(
      R"([{"text":"细胞增生","entities":[
            {"start_idx":0,"end_idx":1,"type":"bod","entity":"细胞"},
            {"start_idx":0,"end_idx":1,"type":"bod","entity":"细胞"},
            {"start_idx":0,"end_idx":1,"type":"dis","entity":"细胞"}]}])");
  CHECK(records[0].entities.size() == 2);  // same span, different type kept
}

TEST_CASE("validate: bounds, surface, type") {
  SentenceRecord rec;
  rec.text = utf8_decode("细胞增生");
  EntityAnnotation e;
  e.start_idx = 0;
  e.end_idx = 1;
  e.type = EntityType::kBod;
  e.surface = utf8_decode("细胞");
  rec.entities.push_back(e);
  CHECK(validate(rec).empty());

  rec.entities[0].end_idx = 4;  // == len(text), one past the last index
  auto v = validate(rec, 3);
  REQUIRE(v.size() == 1);
  CHECK(v[0].record_index == 3);
  CHECK(v[0].message.find("out of bounds") != std::string::npos);

  rec.entities[0].end_idx = 1;
  rec.entities[0].type = static_cast<EntityType>(99);
  v = validate(rec);
  REQUIRE(v.size() == 1);
  CHECK(v[0].message.find("unknown entity type") != std::string::npos);
}

TEST_CASE("build_vocab: ordering rule, determinism, min_freq") {
  SentenceRecord rec;
  rec.text = utf8_decode("aa b");
  const std::vector<SentenceRecord> corpus = {rec};

  auto vocab = build_vocab(corpus);
  CHECK(vocab.id(U'a') == 5);  // freq 2 first
  CHECK(vocab.id(U' ') == 6);  // freq tie broken by code point
  CHECK(vocab.id(U'b') == 7);
  CHECK(vocab.size() == 8);

  auto again = build_vocab(corpus);
  CHECK(again.chars() == vocab.chars());
  CHECK(again.hash() == vocab.hash());

  auto filtered = build_vocab(corpus, 2);
  CHECK(filtered.id(U'a') == 5);
  CHECK(filtered.id(U'b') == Vocab::kUnk);
  CHECK(filtered.size() == 6);

  CHECK_THROWS_AS(build_vocab({}), DataError);
}

TEST_CASE("query_for: exact query strings") {
  CHECK(utf8_encode(query_for(EntityType::kBod)) ==
        "在文本中找出身体部位，例如细胞、皮肤、抗体");
  CHECK(utf8_encode(query_for(EntityType::kDep)) ==
        "在文本中找出科室，例如科、室");
  CHECK(utf8_encode(query_for(EntityType::kSym)) ==
        "在文本中找出临床表现，例如疼痛、痉挛、异常");
  CHECK_THROWS_AS(query_for(static_cast<EntityType>(42)), ConfigError);
}

TEST_CASE("build_instance: layout, labels, mask triangle") {
  SentenceRecord rec;
  rec.text = utf8_decode("细胞增生");
  EntityAnnotation e;
  e.start_idx = 0;
  e.end_idx = 1;
  e.type = EntityType::kBod;
  e.surface = utf8_decode("细胞");
  rec.entities.push_back(e);
  auto vocab = build_vocab({rec});

  auto inst = build_instance(rec, EntityType::kBod, vocab);
  const int64_t q = static_cast<int64_t>(query_for(EntityType::kBod).size());
  CHECK(inst.context_offset == 1 + q + 1);
  CHECK(inst.context_len == 4);
  CHECK(inst.n() == 1 + q + 1 + 4 + 1);
  CHECK(inst.token_ids.front() == Vocab::kCls);
  CHECK(inst.token_ids.back() == Vocab::kSep);

  const int64_t n = inst.n();
  const int64_t cell = (inst.context_offset + 0) * n + inst.context_offset + 1;
  CHECK(inst.label_grid[static_cast<size_t>(cell)] == 1);  // 1 + type_id(bod)

  int64_t nonzero = 0;
  for (auto v : inst.label_grid) nonzero += v != 0;
  CHECK(nonzero == 1);

  // mask true iff both context and i <= j
  int64_t mask_count = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const bool m = inst.loss_mask[static_cast<size_t>(i * n + j)];
      const bool in_ctx = i >= inst.context_offset &&
                          i < inst.context_offset + inst.context_len &&
                          j >= inst.context_offset &&
                          j < inst.context_offset + inst.context_len;
      CHECK(m == (in_ctx && i <= j));
      mask_count += m;
      if (inst.label_grid[static_cast<size_t>(i * n + j)] != 0) CHECK(m);
    }
  }
  CHECK(mask_count == inst.context_len * (inst.context_len + 1) / 2);

  // no entities of the queried type -> all-zero grid, mask unchanged
  auto neg = build_instance(rec, EntityType::kDis, vocab);
  for (auto v : neg.label_grid) CHECK(v == 0);
  int64_t neg_mask = 0;
  for (auto v : neg.loss_mask) neg_mask += v;
  CHECK(neg_mask == neg.context_len * (neg.context_len + 1) / 2);
}

TEST_CASE("build_instance: truncation drops boundary-crossing entities") {
  SentenceRecord rec;
  rec.text = utf8_decode("细胞增生异常显著扩大蔓延");
  EntityAnnotation inside{0, 1, EntityType::kBod, utf8_decode("细胞")};
  EntityAnnotation crossing{8, 11, EntityType::kBod, utf8_decode("扩大蔓延")};
  rec.entities = {inside, crossing};
  auto vocab = build_vocab({rec});

  const int64_t q = static_cast<int64_t>(query_for(EntityType::kBod).size());
  const int64_t max_len = q + 3 + 9;  // context budget of 9 of the 12 chars
  TruncationReport trunc;
  auto inst = build_instance(rec, EntityType::kBod, vocab, max_len, 0, &trunc);
  CHECK(inst.context_len == 9);
  CHECK(trunc.dropped_entities == 1);
  CHECK(trunc.truncated_records == 1);
  int64_t nonzero = 0;
  for (auto v : inst.label_grid) nonzero += v != 0;
  CHECK(nonzero == 1);

  CHECK_THROWS_AS(build_instance(rec, EntityType::kBod, vocab, q + 3),
                  ConfigError);
}

TEST_CASE("build_instance: pad_to appends padding and keeps the mask") {
  SentenceRecord rec;
  rec.text = utf8_decode("细胞");
  auto vocab = build_vocab({rec});
  auto natural = build_instance(rec, EntityType::kBod, vocab);
  auto padded = build_instance(rec, EntityType::kBod, vocab, 200,
                               natural.n() + 5);
  CHECK(padded.n() == natural.n() + 5);
  for (int64_t i = natural.n(); i < padded.n(); ++i) {
    CHECK(padded.token_ids[static_cast<size_t>(i)] == Vocab::kPad);
  }
  int64_t m1 = 0, m2 = 0;
  for (auto v : natural.loss_mask) m1 += v;
  for (auto v : padded.loss_mask) m2 += v;
  CHECK(m1 == m2);
}

TEST_CASE("compute_stats: containment fixture and partition identity") {
  // B strictly inside A -> 1 nested of 2, ratio 50%
  SentenceRecord rec;
  rec.text = utf8_decode("腹部剧烈疼痛难忍");
  EntityAnnotation outer{0, 5, EntityType::kSym, utf8_decode("腹部剧烈疼痛")};
  EntityAnnotation inner{0, 1, EntityType::kBod, utf8_decode("腹部")};
  rec.entities = {outer, inner};
  auto st = compute_stats({rec});
  CHECK(st.total == 2);
  CHECK(st.nested == 1);
  CHECK(st.flat == 1);
  CHECK(st.nested_pct == doctest::Approx(50.0));
  CHECK(st.flat + st.nested == st.total);
  CHECK(st.sym_containers == 1);
  CHECK(st.sym_containers_pct == doctest::Approx(100.0));
  CHECK(st.nested_inside_sym.at("bod") == 1);
  CHECK(st.nested_inside_sym_total == 1);
  CHECK(st.per_type.at("sym").avg_len == doctest::Approx(6.0));
  CHECK(st.per_type.at("bod").avg_len == doctest::Approx(2.0));
  CHECK(st.total_avg_len == doctest::Approx(4.0));

  // identical spans with different types nest neither way
  SentenceRecord same;
  same.text = utf8_decode("高血压病");
  same.entities = {{0, 2, EntityType::kDis, utf8_decode("高血压")},
                   {0, 2, EntityType::kSym, utf8_decode("高血压")}};
  auto st2 = compute_stats({same});
  CHECK(st2.nested == 0);
  CHECK(st2.flat == 2);

  double pct_sum = 0;
  for (const auto& [name, ts] : st.per_type) pct_sum += ts.percent;
  CHECK(pct_sum == doctest::Approx(100.0).epsilon(0.001));
}

TEST_CASE("compute_stats: json and markdown render") {
  Rng rng(5);
  std::vector<SentenceRecord> records;
  for (int i = 0; i < 20; ++i)
    records.push_back(testutil::make_random_record(rng));
  auto st = compute_stats(records);
  const auto j = stats_to_json(st);
  CHECK(j.find("\"nesting\"") != std::string::npos);
  CHECK(stats_to_json(st) == j);  // deterministic bytes
  const auto md = stats_to_markdown(st);
  CHECK(md.find("| Total |") != std::string::npos);
}

TEST_CASE("mlm_corpus: empty, wrapping, chunking") {
  SentenceRecord rec;
  rec.text = utf8_decode("细胞增生异");
  auto vocab = build_vocab({rec});
  CHECK(mlm_corpus({}, vocab).empty());

  auto seqs = mlm_corpus({rec}, vocab);
  REQUIRE(seqs.size() == 1);
  CHECK(seqs[0].size() == 7);  // 5 chars + cls + sep
  CHECK(seqs[0].front() == Vocab::kCls);
  CHECK(seqs[0].back() == Vocab::kSep);

  SentenceRecord longrec;
  for (int i = 0; i < 400; ++i) longrec.text.push_back(U'你');
  auto chunks = mlm_corpus({longrec}, build_vocab({longrec}), 200);
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[0].size() == 200);  // 198-char payload + specials
  CHECK(chunks[1].size() == 200);
  CHECK(chunks[2].size() == 6);    // 400 - 2*198 = 4 chars + specials
}

TEST_CASE("roundtrip: gold grids decode back to the gold entities") {
  Rng rng(77);
  int64_t checked = 0;
  for (int rep = 0; rep < 200; ++rep) {
    auto rec = testutil::make_random_record(rng);
    auto vocab = build_vocab({rec});
    for (int t = 0; t < kNumEntityTypes; ++t) {
      auto inst = build_instance(rec, static_cast<EntityType>(t), vocab);
      auto probs = testutil::gold_probs(inst, 10);
      auto decoded = eval::decode_grid(probs, inst.n(), 10, inst);
      std::set<eval::Triple> got;
      for (const auto& e : decoded) got.insert(eval::to_triple(e));
      std::set<eval::Triple> want;
      for (const auto& e : rec.entities) {
        if (static_cast<int>(e.type) == t &&
            e.end_idx < inst.context_len) {
          want.insert(eval::to_triple(e));
        }
      }
      REQUIRE(got == want);
      ++checked;
    }
  }
  CHECK(checked == 200 * kNumEntityTypes);
}

TEST_CASE("vocab: roundtrip through the character list") {
  Rng rng(9);
  auto rec = testutil::make_random_record(rng, 30, 0);
  auto vocab = build_vocab({rec});
  auto restored = data::Vocab::from_chars(vocab.chars());
  CHECK(restored.hash() == vocab.hash());
  for (char32_t c : rec.text) CHECK(restored.id(c) == vocab.id(c));
}
