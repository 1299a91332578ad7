#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "thyme/representation.hpp"
#include "thyme/rng.hpp"

using namespace thyme;
using namespace thyme::representation;
using corpus::Vocabulary;

namespace {

Matrix random_logits(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-2.0, 2.0);
  return m;
}

void check_matches(const SparseVector& got, const oracle::Vec& want) {
  REQUIRE(got.dim() == want.size());
  for (std::size_t v = 0; v < want.size(); ++v) CHECK(got.get(static_cast<TokenId>(v)) == doctest::Approx(want[v]).epsilon(1e-12));
}

oracle::Vec as_vec(const SparseVector& v) {
  oracle::Vec out(v.dim(), 0.0);
  for (const auto& e : v.entries()) out[e.index] = e.weight;
  return out;
}

struct SmallModel {
  Vocabulary vocab;
  EncoderConfig config;
  ParameterSet params;
};

SmallModel small_model() {
  SmallModel m;
  std::vector<std::string> words;
  for (int i = 0; i < 16; ++i) words.push_back("w" + std::to_string(i));
  m.vocab = Vocabulary(words);
  m.config.hidden_dim = 8;
  m.config.layers = 2;
  m.config.heads = 2;
  m.config.ffn_dim = 16;
  m.config.max_positions = 32;
  m.config.vocab_size = m.vocab.size();
  m.config.seed = 5;
  m.params = encoder::init_params(m.config);
  return m;
}

const corpus::Table kTable{"t", "w0 w1", {"w2", "w3 w4"}, {{"w5", "w6 w7"}, {"w8", "w9"}}};

}  // namespace

TEST_CASE("saturate") {
  CHECK(saturate(-3.0) == 0.0);
  CHECK(saturate(0.0) == 0.0);
  CHECK(saturate(std::exp(1.0) - 1.0) == doctest::Approx(1.0));
  CHECK(saturate(1.0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("sparse vectors keep positive entries only") {
  const std::vector<double> dense{0.0, 1.5, -1.0, 2.0};
  const auto v = SparseVector::from_dense(dense);
  CHECK(v.dim() == 4);
  CHECK(v.nnz() == 2);
  CHECK(v.get(1) == 1.5);
  CHECK(v.get(2) == 0.0);
  CHECK(SparseVector::from_entries(4, {{3, 2.0}, {1, 1.5}}) == v);
  CHECK_THROWS(SparseVector::from_entries(4, {{1, 1.0}, {1, 2.0}}));
  CHECK_THROWS(SparseVector::from_entries(4, {{4, 1.0}}));
  CHECK_THROWS(SparseVector::from_entries(4, {{0, 0.0}}));
  CHECK(v.to_dense()(3) == 2.0);
}

TEST_CASE("query sparse vector is the max over positions") {
  Matrix w(2, 2);
  w << 0, 2, 4, 0;
  ad::Tape tape;
  const auto pooled = ad::max_rows(ad::saturate(tape.constant(w))).value();
  CHECK(pooled(0, 0) == doctest::Approx(std::log(5.0)));
  CHECK(pooled(0, 1) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("field pooling matches straight loops") {
  Rng rng(3);
  const Vocabulary vocab({"a", "b", "c", "d", "e", "f"});
  const corpus::Table table{"t", "a b c", {"a b", "c", "d e f"}, {{"a b", "c", "d"}, {"e", "f f", "a"}}};
  const auto s = corpus::serialize_table(table, vocab);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_logits(rng, static_cast<Eigen::Index>(s.tokens.size()), 9);
    check_matches(pool_title(w, s.title_span), oracle::title(w, s.title_span));
    check_matches(pool_headers(w, s.header_spans), oracle::headers(w, s.header_spans));
    check_matches(pool_cells(w, s.cell_spans, s.rows_kept, s.cols), oracle::cells(w, s.cell_spans, s.cols));
  }
}

TEST_CASE("pooling worked examples") {
  Matrix w(4, 2);
  w << 1, 0, 3, 0, 0, 7, 0, 0;
  const double l2 = std::log(2.0), l4 = std::log(4.0), l8 = std::log(8.0);
  // Title over rows 0..1: max.
  CHECK(pool_title(w, {0, 2}).get(0) == doctest::Approx(l4));
  // Two headers {0,1} and {2,3}: means then max.
  const auto h = pool_headers(w, {{0, 2}, {2, 4}});
  CHECK(h.get(0) == doctest::Approx((l2 + l4) / 2));
  CHECK(h.get(1) == doctest::Approx(l8 / 2));
  // Column 0 covers positions 0 and 2, column 1 positions 1 and 3.
  const auto c = pool_cells(w, {{0, 0, {0, 1}}, {0, 1, {1, 2}}, {1, 0, {2, 3}}, {1, 1, {3, 4}}}, 2, 2);
  CHECK(c.get(0) == doctest::Approx(l4 / 2));
  CHECK(c.get(1) == doctest::Approx(l8 / 2));
  CHECK(pool_cells(w, {}, 0, 2).empty());
}

TEST_CASE("mofe gating") {
  FieldBundle b;
  b.fields[0] = SparseVector::from_dense(std::vector<double>{1.0, 0.0});
  b.fields[1] = SparseVector::from_dense(std::vector<double>{0.0, 2.0});
  b.fields[2] = SparseVector::from_dense(std::vector<double>{3.0, 0.0});
  b.gate_states = Matrix(3, 1);
  b.gate_states << std::log(2.0), 0.0, -5.0;
  const Matrix gate_w = Matrix::Ones(1, 1);

  SUBCASE("k = 2 keeps the two largest logits") {
    const auto [v, g] = mofe_aggregate(b, gate_w, 0.0, 2);
    CHECK(g.values[0] == doctest::Approx(2.0 / 3.0));
    CHECK(g.values[1] == doctest::Approx(1.0 / 3.0));
    CHECK(g.values[2] == 0.0);
    CHECK(g.nonzero() == 2);
    CHECK(v.get(0) == doctest::Approx(2.0 / 3.0));
    CHECK(v.get(1) == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("k = 1 is a hard pick") {
    const auto [v, g] = mofe_aggregate(b, gate_w, 0.0, 1);
    CHECK(g.values[0] == 1.0);
    CHECK(v == b.fields[0]);
  }
  SUBCASE("k = 3 over equal logits averages") {
    b.gate_states.setZero();
    const auto [v, g] = mofe_aggregate(b, gate_w, 0.0, 3);
    for (double x : g.values) CHECK(x == doctest::Approx(1.0 / 3.0));
    CHECK(v.get(0) == doctest::Approx(4.0 / 3.0));
  }
  SUBCASE("ties go to the lower field") {
    const std::vector<double> logits{1.0, 1.0, 1.0};
    const auto sel = select_top_k(logits, 2, {true, true, true});
    CHECK(sel == std::vector<bool>{true, true, false});
    const auto skip = select_top_k(logits, 2, {false, true, true});
    CHECK(skip == std::vector<bool>{false, true, true});
  }
  SUBCASE("combined weight") {
    // Gates {2/3, 1/3} on fields {1.0, 0.0} and {0.0, 2.0} plus an extra 0.75 in field 1.
    b.fields[1] = SparseVector::from_dense(std::vector<double>{2.25, 2.0});
    const auto [v, g] = mofe_aggregate(b, gate_w, 0.0, 2);
    CHECK(v.get(0) == doctest::Approx(2.0 / 3.0 + 0.75));
  }
  CHECK_THROWS(mofe_aggregate(b, gate_w, 0.0, 0));
  CHECK_THROWS(mofe_aggregate(b, gate_w, 0.0, 4));
}

TEST_CASE("table representation composes fields and gate") {
  const auto m = small_model();
  const auto s = corpus::serialize_table(kTable, m.vocab);
  const PoolingConfig pooling;
  const auto r = table_repr(s, m.params, m.config, pooling);
  CHECK(r.dense.size() == 8);
  REQUIRE(r.gates.has_value());
  CHECK(r.gates->sum() == doctest::Approx(1.0).epsilon(1e-12));

  const auto h = encoder::encode(s.tokens, m.params, m.config);
  const auto w = encoder::project_to_vocab(h, m.params);
  check_matches(r.bundle.fields[0], oracle::title(w, s.title_span));
  check_matches(r.bundle.fields[1], oracle::headers(w, s.header_spans));
  check_matches(r.bundle.fields[2], oracle::cells(w, s.cell_spans, s.cols));
  for (std::size_t d = 0; d < r.dense.size(); ++d) CHECK(r.dense[d] == h(0, static_cast<Eigen::Index>(d)));

  const auto [v, g] = mofe_aggregate(r.bundle, m.params["gate.w"], m.params["gate.b"](0, 0), pooling.k);
  for (std::size_t f = 0; f < kFieldCount; ++f) CHECK(g.values[f] == doctest::Approx(r.gates->values[f]));
  for (const auto& e : v.entries()) CHECK(r.sparse.get(e.index) == doctest::Approx(e.weight));
  CHECK(v.nnz() == r.sparse.nnz());
}

TEST_CASE("max within and across equals one max over the fields") {
  const auto m = small_model();
  const auto s = corpus::serialize_table(kTable, m.vocab);
  PoolingConfig pooling;
  pooling.within = WithinField::kMax;
  pooling.across = AcrossField::kMax;
  const auto r = table_repr(s, m.params, m.config, pooling);
  CHECK_FALSE(r.gates.has_value());
  const auto w = encoder::project_to_vocab(encoder::encode(s.tokens, m.params, m.config), m.params);
  std::vector<oracle::Vec> rows;
  for (std::size_t p = s.title_span.begin; p < s.title_span.end; ++p) rows.push_back(oracle::phi_row(w, p));
  for (const auto& h : s.header_spans) {
    for (std::size_t p = h.begin; p < h.end; ++p) rows.push_back(oracle::phi_row(w, p));
  }
  for (const auto& c : s.cell_spans) {
    for (std::size_t p = c.span.begin; p < c.span.end; ++p) rows.push_back(oracle::phi_row(w, p));
  }
  check_matches(r.sparse, oracle::elementwise_max(rows, m.vocab.size()));
}

TEST_CASE("field masks") {
  const auto m = small_model();
  auto retitled = kTable;
  retitled.title = "w10 w11";
  const auto a = corpus::serialize_table(kTable, m.vocab);
  const auto b = corpus::serialize_table(retitled, m.vocab);

  SUBCASE("sparse mask drops the title from aggregation") {
    PoolingConfig pooling;
    pooling.within = WithinField::kMax;
    pooling.across = AcrossField::kMean;
    pooling.mask.sparse[0] = false;
    const auto ra = table_repr(a, m.params, m.config, pooling);
    const auto oa = oracle::mean_of({as_vec(ra.bundle.fields[1]), as_vec(ra.bundle.fields[2])}, m.vocab.size());
    check_matches(ra.sparse, oa);
  }
  SUBCASE("dense mask makes the dense vector independent of the title") {
    PoolingConfig pooling;
    pooling.mask.dense[0] = false;
    const auto ra = table_repr(a, m.params, m.config, pooling);
    const auto rb = table_repr(b, m.params, m.config, pooling);
    CHECK(ra.dense == rb.dense);
    CHECK_FALSE(ra.sparse == rb.sparse);
    const auto unmasked = table_repr(a, m.params, m.config, PoolingConfig{});
    CHECK(unmasked.dense != ra.dense);
  }
  SUBCASE("mofe respects the sparse mask") {
    PoolingConfig pooling;
    pooling.k = 2;
    pooling.mask.sparse[2] = false;
    const auto r = table_repr(a, m.params, m.config, pooling);
    REQUIRE(r.gates.has_value());
    CHECK(r.gates->values[2] == 0.0);
    CHECK(r.gates->sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("pooling config labels and parsing") {
  CHECK(parse_within_field("table_specific") == WithinField::kTableSpecific);
  CHECK(parse_across_field("mofe") == AcrossField::kMofe);
  CHECK(to_string(WithinField::kMean) == "mean");
  CHECK_THROWS(parse_within_field("median"));
  PoolingConfig p;
  p.k = 4;
  CHECK_THROWS(p.validate());
  p.k = 2;
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("query representation") {
  const auto m = small_model();
  const auto q = query_repr(corpus::Query{"q", "w1 w3"}, m.vocab, m.params, m.config);
  const auto tokens = corpus::serialize_query({"q", "w1 w3"}, m.vocab);
  const auto w = encoder::project_to_vocab(encoder::encode(tokens, m.params, m.config), m.params);
  std::vector<oracle::Vec> rows;
  for (std::size_t p = 0; p < tokens.size(); ++p) rows.push_back(oracle::phi_row(w, p));
  check_matches(q.sparse, oracle::elementwise_max(rows, m.vocab.size()));
  CHECK(q.dense.size() == 8);
}

TEST_CASE("dump_sparse lists weights descending") {
  const Vocabulary v({"alpha", "beta"});
  auto s = SparseVector::from_entries(v.size(), {{v.index_of("alpha"), 0.5}, {v.index_of("beta"), 1.25}});
  CHECK(dump_sparse(s, v) == "beta\t1.25\nalpha\t0.5\n");
  CHECK(dump_sparse(SparseVector(v.size()), v).empty());
}
