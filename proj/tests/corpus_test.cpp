#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "thyme/corpus.hpp"

using namespace thyme::corpus;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("thyme_corpus_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

std::string detokenize(const SerializedInput& s, const Span& span, const Vocabulary& v) {
  std::string out;
  for (std::size_t p = span.begin; p < span.end; ++p) out += (out.empty() ? "" : " ") + v.token(s.tokens[p]);
  return out;
}

Corpus sample_corpus() {
  Corpus c;
  c.tables = {{"t1", "Olympic Medal Table", {"Nation", "Gold"}, {{"Norway", "16"}, {"Germany", "12"}}},
              {"t2", "Rivers", {"Name", "Length km"}, {}}};
  c.queries = {{"q1", "how many gold medals did norway win"}, {"q2", "longest river"}};
  c.judgments = {{"q1", {"t1"}}};
  return c;
}

}  // namespace

TEST_CASE("split_words lowercases and splits on punctuation") {
  CHECK(split_words("Hello, world") == std::vector<std::string>{"hello", "world"});
  CHECK(split_words("zzz-unseen") == std::vector<std::string>{"zzz", "unseen"});
  CHECK(split_words("").empty());
  CHECK(split_words("  a\tb\n") == std::vector<std::string>{"a", "b"});
  CHECK(split_words("caf\xc3\xa9 au lait") == std::vector<std::string>{"caf\xc3\xa9", "au", "lait"});
}

TEST_CASE("build_vocabulary orders by frequency then text") {
  const std::vector<Query> queries{{"1", "a b"}, {"2", "a"}};
  const auto v = build_vocabulary({}, queries, 1);
  CHECK(v.size() == Vocabulary::kReservedCount + 2);
  CHECK(v.index_of("a") < v.index_of("b"));
  CHECK(v.index_of("a") == Vocabulary::kReservedCount);

  SUBCASE("threshold excluding everything leaves the reserved tokens") {
    const auto r = build_vocabulary({}, {{"1", "a b"}}, 2);
    CHECK(r.size() == Vocabulary::kReservedCount);
    CHECK(r.size() == 7);
  }
  SUBCASE("deterministic") {
    CHECK(build_vocabulary({}, queries, 1).tokens() == v.tokens());
    CHECK(build_vocabulary({}, queries, 1).hash() == v.hash());
  }
  SUBCASE("ties break lexicographically") {
    const auto t = build_vocabulary({}, {{"1", "zeta alpha mid"}}, 1);
    CHECK(t.index_of("alpha") < t.index_of("mid"));
    CHECK(t.index_of("mid") < t.index_of("zeta"));
  }
  SUBCASE("tables count too") {
    const auto t = build_vocabulary(sample_corpus().tables, {}, 1);
    CHECK(t.contains("norway"));
    CHECK(t.contains("olympic"));
  }
  CHECK_THROWS_AS(build_vocabulary({}, {}, 1), CorpusError);
}

TEST_CASE("reserved tokens occupy the lowest indices") {
  const Vocabulary v({"x"});
  CHECK(v.token(Vocabulary::kPad) == "[PAD]");
  CHECK(v.token(Vocabulary::kUnk) == "[UNK]");
  CHECK(v.token(Vocabulary::kCls) == "[CLS]");
  CHECK(v.token(Vocabulary::kSep) == "[SEP]");
  CHECK(v.token(Vocabulary::kTtl) == "[TTL]");
  CHECK(v.token(Vocabulary::kHead) == "[HEAD]");
  CHECK(v.token(Vocabulary::kCell) == "[CELL]");
  CHECK(v.index_of("x") == Vocabulary::kReservedCount);
  CHECK_THROWS(Vocabulary({"x", "x"}));
  CHECK_THROWS(Vocabulary({"[CLS]"}));
}

TEST_CASE("tokenize maps unknown words to UNK") {
  const Vocabulary v({"hello", "world"});
  CHECK(tokenize("Hello, world", v) == std::vector<TokenId>{v.index_of("hello"), v.index_of("world")});
  CHECK(tokenize("zzz-unseen", v) == std::vector<TokenId>{Vocabulary::kUnk, Vocabulary::kUnk});
  CHECK(tokenize("", v).empty());
}

TEST_CASE("vocabulary file round trip") {
  const auto dir = scratch_dir("vocab");
  const auto v = build_vocabulary(sample_corpus().tables, sample_corpus().queries);
  v.save(dir / "vocab.txt");
  const auto back = Vocabulary::load(dir / "vocab.txt");
  CHECK(back == v);
  CHECK(back.hash() == v.hash());
  CHECK(Vocabulary({"a"}).hash() != Vocabulary({"b"}).hash());
}

TEST_CASE("serialize_table lays out fields with indicators") {
  const Vocabulary v({"a", "b", "c", "d", "e"});
  const Table t{"t", "a", {"b", "c"}, {{"d", "e"}}};
  const auto s = serialize_table(t, v, 256);
  const auto id = [&](const char* w) { return v.index_of(w); };
  CHECK(s.tokens == std::vector<TokenId>{Vocabulary::kCls, Vocabulary::kTtl, id("a"), Vocabulary::kHead, id("b"),
                                         id("c"), Vocabulary::kCell, id("d"), id("e"), Vocabulary::kSep});
  CHECK(s.title_span == Span{2, 3});
  CHECK(s.header_spans == std::vector<Span>{{4, 5}, {5, 6}});
  CHECK(s.cell_spans == std::vector<CellSpan>{{0, 0, {7, 8}}, {0, 1, {8, 9}}});
  CHECK(s.indicator_positions[0] == 1);
  CHECK(s.indicator_positions[1] == 3);
  CHECK(s.indicator_positions[2] == 6);
  CHECK_FALSE(s.truncated());
  CHECK(s.table_id == "t");
}

TEST_CASE("header-only table keeps an empty body") {
  const Vocabulary v({"a", "b"});
  const auto s = serialize_table({"t", "a", {"b"}, {}}, v);
  CHECK(s.tokens == std::vector<TokenId>{Vocabulary::kCls, Vocabulary::kTtl, v.index_of("a"), Vocabulary::kHead,
                                         v.index_of("b"), Vocabulary::kCell, Vocabulary::kSep});
  CHECK(s.cell_spans.empty());
  CHECK(s.rows_kept == 0);
}

TEST_CASE("overflow drops whole trailing rows first") {
  const Vocabulary v({"t", "h1", "h2", "x", "y"});
  const Table table{"big", "t", {"h1", "h2"}, {{"x", "y"}, {"x y", "y"}, {"x", "y"}}};
  // [CLS][TTL] t [HEAD] h1 h2 [CELL] = 7, row0 = 2, row1 = 3, row2 = 2, [SEP] = 1.
  const auto s = serialize_table(table, v, 13);
  CHECK(s.tokens.size() == 13);
  CHECK(s.rows_kept == 2);
  CHECK(s.rows_total == 3);
  CHECK(s.rows_truncated);
  CHECK_FALSE(s.title_truncated);
  CHECK(s.cell_spans.back().row == 1);
  CHECK(s.tokens.back() == Vocabulary::kSep);

  SUBCASE("title is trimmed only once the body is gone") {
    const Table long_title{"lt", "t t t t", {"h1"}, {{"x"}}};
    const auto trimmed = serialize_table(long_title, v, 7);
    CHECK(trimmed.rows_kept == 0);
    CHECK(trimmed.title_truncated);
    CHECK(trimmed.tokens.size() == 7);
    CHECK(trimmed.title_span.size() == 1);
  }
  SUBCASE("headers that cannot fit name the table") {
    const Table wide{"wide-table", "t", {"h1", "h2", "h1 h2"}, {}};
    try {
      serialize_table(wide, v, 8);
      FAIL("expected an error");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find("wide-table") != std::string::npos);
    }
  }
}

TEST_CASE("spans reconstruct field text and follow token order") {
  const auto c = sample_corpus();
  const auto v = build_vocabulary(c.tables, c.queries);
  const auto s = serialize_table(c.tables[0], v);
  CHECK(detokenize(s, s.title_span, v) == "olympic medal table");
  CHECK(detokenize(s, s.header_spans[0], v) == "nation");
  CHECK(detokenize(s, s.cell_spans[2].span, v) == "germany");
  for (std::size_t i = 1; i < s.cell_spans.size(); ++i) {
    const auto& a = s.cell_spans[i - 1];
    const auto& b = s.cell_spans[i];
    CHECK(std::tie(a.row, a.col) < std::tie(b.row, b.col));
    CHECK(a.span.end <= b.span.begin);
  }
  for (const auto& cs : s.cell_spans) {
    CHECK(cs.row < c.tables[0].rows());
    CHECK(cs.col < c.tables[0].cols());
  }
}

TEST_CASE("distinct tables serialize differently") {
  const Vocabulary v({"a", "b", "c"});
  const auto one = serialize_table({"1", "a", {"b"}, {{"c"}}}, v);
  const auto two = serialize_table({"2", "a", {"b c"}, {}}, v);
  CHECK(one.tokens != two.tokens);
}

TEST_CASE("serialize_query wraps in CLS and SEP") {
  const Vocabulary v({"gold"});
  const auto q = serialize_query({"q", "Gold medals"}, v);
  CHECK(q == std::vector<TokenId>{Vocabulary::kCls, v.index_of("gold"), Vocabulary::kUnk, Vocabulary::kSep});
  CHECK(serialize_query({"q", "gold gold gold gold"}, v, 4).size() == 4);
}

TEST_CASE("table validation") {
  CHECK_THROWS_AS(Table({"t", "x", {"a", "b"}, {{"1"}}}).validate(), CorpusError);
  CHECK_THROWS_AS(Table({"t", "x", {}, {}}).validate(), CorpusError);
  CHECK_NOTHROW(Table({"t", "x", {"a"}, {}}).validate());
}

TEST_CASE("corpus save and load round trip") {
  const auto dir = scratch_dir("roundtrip");
  const auto c = sample_corpus();
  save_corpus(dir, c);
  CHECK(load_corpus(dir) == c);
}

TEST_CASE("corpus loading errors") {
  const auto dir = scratch_dir("errors");
  save_corpus(dir, sample_corpus());

  SUBCASE("dangling judgment") {
    write_file(dir / "judgments.jsonl", "{\"query_id\": \"q1\", \"table_ids\": [\"missing\"]}\n");
    CHECK_THROWS_AS(load_corpus(dir), CorpusError);
  }
  SUBCASE("empty judgments file") {
    write_file(dir / "judgments.jsonl", "");
    CHECK(load_corpus(dir).judgments.empty());
  }
  SUBCASE("malformed line reports its number") {
    write_file(dir / "queries.jsonl", "{\"id\": \"q1\", \"text\": \"x\"}\n{oops\n");
    try {
      load_queries(dir / "queries.jsonl");
      FAIL("expected an error");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
  }
  SUBCASE("empty query text") {
    write_file(dir / "queries.jsonl", "{\"id\": \"q1\", \"text\": \"\"}\n");
    CHECK_THROWS_AS(load_corpus(dir), CorpusError);
  }
  SUBCASE("duplicate table ids") {
    auto c = sample_corpus();
    c.tables.push_back(c.tables.front());
    CHECK_THROWS_AS(c.validate(), CorpusError);
  }
}
