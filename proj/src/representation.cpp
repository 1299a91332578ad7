#include "thyme/representation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace thyme::representation {

double saturate(double x) { return x > 0.0 ? std::log1p(x) : 0.0; }

SparseVector SparseVector::from_dense(std::span<const double> values) {
  SparseVector v(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] > 0.0) v.entries_.push_back({static_cast<TokenId>(i), values[i]});
  }
  return v;
}

SparseVector SparseVector::from_dense(const Matrix& row) {
  if (row.rows() != 1) throw std::invalid_argument("SparseVector::from_dense expects a single row");
  return from_dense(std::span<const double>(row.data(), static_cast<std::size_t>(row.cols())));
}

SparseVector SparseVector::from_entries(std::size_t dim, std::vector<Entry> entries) {
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.index < b.index; });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    if (e.index >= dim) throw std::invalid_argument("sparse entry index out of range");
    if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
      throw std::invalid_argument("sparse weights must be positive and finite");
    }
    if (i > 0 && entries[i - 1].index == e.index) throw std::invalid_argument("duplicate sparse index");
  }
  SparseVector v(dim);
  v.entries_ = std::move(entries);
  return v;
}

double SparseVector::get(TokenId index) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), index,
                             [](const Entry& e, TokenId i) { return e.index < i; });
  return it != entries_.end() && it->index == index ? it->weight : 0.0;
}

Eigen::RowVectorXd SparseVector::to_dense() const {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(dim_));
  for (const Entry& e : entries_) out(e.index) = e.weight;
  return out;
}

std::string to_string(WithinField v) {
  switch (v) {
    case WithinField::kTableSpecific: return "table_specific";
    case WithinField::kMax: return "max";
    case WithinField::kMean: return "mean";
  }
  return "?";
}

std::string to_string(AcrossField v) {
  switch (v) {
    case AcrossField::kMofe: return "mofe";
    case AcrossField::kMax: return "max";
    case AcrossField::kMean: return "mean";
  }
  return "?";
}

WithinField parse_within_field(const std::string& s) {
  if (s == "table_specific") return WithinField::kTableSpecific;
  if (s == "max") return WithinField::kMax;
  if (s == "mean") return WithinField::kMean;
  throw std::invalid_argument("unknown within-field pooling '" + s + "'");
}

AcrossField parse_across_field(const std::string& s) {
  if (s == "mofe") return AcrossField::kMofe;
  if (s == "max") return AcrossField::kMax;
  if (s == "mean") return AcrossField::kMean;
  throw std::invalid_argument("unknown across-field aggregation '" + s + "'");
}

void PoolingConfig::validate() const {
  if (k < 1 || k > kFieldCount) throw std::invalid_argument("pooling k must be in [1, 3]");
  const std::size_t active = mask.sparse_active();
  if (across == AcrossField::kMofe && active > 0 && k > active) {
    throw std::invalid_argument("pooling k=" + std::to_string(k) + " exceeds the " + std::to_string(active) +
                                " unmasked sparse fields");
  }
}

std::string PoolingConfig::label() const {
  std::string s = to_string(within) + "/" + to_string(across);
  if (across == AcrossField::kMofe) s += "/k" + std::to_string(k);
  static const char* names[] = {"title", "headers", "cells"};
  for (std::size_t f = 0; f < kFieldCount; ++f) {
    if (!mask.dense[f]) s += std::string("/-dense:") + names[f];
    if (!mask.sparse[f]) s += std::string("/-sparse:") + names[f];
  }
  return s;
}

std::size_t GateWeights::nonzero() const {
  return std::size_t(values[0] != 0.0) + (values[1] != 0.0) + (values[2] != 0.0);
}

namespace {

ad::Var zero_row(ad::Tape& tape, Eigen::Index cols) { return tape.constant(Matrix::Zero(1, cols)); }

std::vector<Eigen::Index> span_positions(const Span& s) {
  std::vector<Eigen::Index> out(s.size());
  std::iota(out.begin(), out.end(), static_cast<Eigen::Index>(s.begin));
  return out;
}

ad::Var pooled_or_zero(ad::Var phi, const std::vector<Eigen::Index>& positions, bool use_max) {
  if (positions.empty()) return zero_row(*phi.tape(), phi.cols());
  ad::Var rows = ad::gather_rows(phi, positions);
  return use_max ? ad::max_rows(rows) : ad::mean_rows(rows);
}

SparseVector row_to_sparse(const Matrix& row) { return SparseVector::from_dense(row); }

}  // namespace

namespace diff {

ad::Var pool_title(ad::Var phi, const Span& title) {
  if (title.empty()) return zero_row(*phi.tape(), phi.cols());
  return ad::max_rows(ad::slice_rows(phi, static_cast<Eigen::Index>(title.begin),
                                     static_cast<Eigen::Index>(title.size())));
}

ad::Var pool_headers(ad::Var phi, const std::vector<Span>& headers) {
  if (headers.empty()) return zero_row(*phi.tape(), phi.cols());
  std::vector<ad::Var> per_header;
  per_header.reserve(headers.size());
  for (const Span& h : headers) {
    if (h.empty()) {
      per_header.push_back(zero_row(*phi.tape(), phi.cols()));
    } else {
      per_header.push_back(ad::mean_rows(
          ad::slice_rows(phi, static_cast<Eigen::Index>(h.begin), static_cast<Eigen::Index>(h.size()))));
    }
  }
  return per_header.size() == 1 ? per_header.front() : ad::max_rows(ad::vconcat(per_header));
}

ad::Var pool_cells(ad::Var phi, const std::vector<CellSpan>& cells, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0 || cells.empty()) return zero_row(*phi.tape(), phi.cols());
  std::vector<std::vector<Eigen::Index>> column_positions(cols);
  for (const CellSpan& c : cells) {
    if (c.col >= cols || c.row >= rows) throw std::out_of_range("cell span outside the table grid");
    for (std::size_t p = c.span.begin; p < c.span.end; ++p) {
      column_positions[c.col].push_back(static_cast<Eigen::Index>(p));
    }
  }
  std::vector<ad::Var> per_column;
  per_column.reserve(cols);
  for (const auto& positions : column_positions) per_column.push_back(pooled_or_zero(phi, positions, false));
  return per_column.size() == 1 ? per_column.front() : ad::max_rows(ad::vconcat(per_column));
}

MofeOutput mofe(ad::Var fields, ad::Var gate_states, ad::Var gate_w, ad::Var gate_b, std::size_t k,
                std::array<bool, kFieldCount> active) {
  if (fields.rows() != static_cast<Eigen::Index>(kFieldCount) ||
      gate_states.rows() != static_cast<Eigen::Index>(kFieldCount)) {
    throw std::invalid_argument("mofe expects three fields and three gate states");
  }
  ad::Var logits = ad::add_row(ad::matmul(gate_states, gate_w), gate_b);  // 3 x 1
  std::vector<double> lv(kFieldCount);
  for (std::size_t i = 0; i < kFieldCount; ++i) lv[i] = logits.value()(static_cast<Eigen::Index>(i), 0);
  std::vector<bool> selected = select_top_k(lv, k, active);
  ad::Var gates = ad::masked_softmax(logits, selected);
  return {ad::matmul(gates, fields), gates};
}

}  // namespace diff

std::vector<bool> select_top_k(std::span<const double> logits, std::size_t k, std::array<bool, kFieldCount> active) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < kFieldCount; ++i) {
    if (active[i]) order.push_back(i);
  }
  // Stable sort keeps the lower field first on equal logits.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  std::vector<bool> selected(kFieldCount, false);
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) selected[order[i]] = true;
  return selected;
}

SparseVector pool_title(const VocabLogits& logits, const Span& title) {
  ad::Tape tape;
  ad::Var phi = ad::saturate(tape.constant(logits));
  return row_to_sparse(diff::pool_title(phi, title).value());
}

SparseVector pool_headers(const VocabLogits& logits, const std::vector<Span>& headers) {
  ad::Tape tape;
  ad::Var phi = ad::saturate(tape.constant(logits));
  return row_to_sparse(diff::pool_headers(phi, headers).value());
}

SparseVector pool_cells(const VocabLogits& logits, const std::vector<CellSpan>& cells, std::size_t rows,
                        std::size_t cols) {
  ad::Tape tape;
  ad::Var phi = ad::saturate(tape.constant(logits));
  return row_to_sparse(diff::pool_cells(phi, cells, rows, cols).value());
}

std::pair<SparseVector, GateWeights> mofe_aggregate(const FieldBundle& bundle, const Matrix& gate_w, double gate_b,
                                                    std::size_t k, std::array<bool, kFieldCount> active) {
  if (k < 1 || k > kFieldCount) throw std::invalid_argument("mofe k must be in [1, 3]");
  const std::size_t dim = bundle.fields[0].dim();
  Matrix fields(kFieldCount, static_cast<Eigen::Index>(dim));
  for (std::size_t f = 0; f < kFieldCount; ++f) {
    if (bundle.fields[f].dim() != dim) throw std::invalid_argument("mofe fields differ in dimension");
    fields.row(static_cast<Eigen::Index>(f)) = bundle.fields[f].to_dense();
  }
  ad::Tape tape;
  Matrix b(1, 1);
  b(0, 0) = gate_b;
  auto out = diff::mofe(tape.constant(std::move(fields)), tape.constant(bundle.gate_states), tape.constant(gate_w),
                        tape.constant(std::move(b)), k, active);
  GateWeights g;
  for (std::size_t f = 0; f < kFieldCount; ++f) g.values[f] = out.gates.value()(0, static_cast<Eigen::Index>(f));
  return {row_to_sparse(out.sparse.value()), g};
}

QueryVars query_repr(const encoder::BoundParams& params, const EncoderConfig& config,
                     std::span<const TokenId> tokens) {
  if (tokens.size() < 3) throw std::invalid_argument("query_repr: query has no tokens");
  ad::Var hidden = encoder::encode(params, config, tokens);
  ad::Var phi = ad::saturate(encoder::project_to_vocab(params, hidden));
  return {ad::slice_rows(hidden, 0, 1), ad::max_rows(phi)};
}

namespace {

std::array<std::vector<Eigen::Index>, kFieldCount> field_positions(const SerializedInput& input) {
  std::array<std::vector<Eigen::Index>, kFieldCount> out;
  out[0] = span_positions(input.title_span);
  for (const Span& h : input.header_spans) {
    auto p = span_positions(h);
    out[1].insert(out[1].end(), p.begin(), p.end());
  }
  for (const CellSpan& c : input.cell_spans) {
    auto p = span_positions(c.span);
    out[2].insert(out[2].end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace

TableVars table_repr(const encoder::BoundParams& params, const EncoderConfig& config, const SerializedInput& input,
                     const PoolingConfig& pooling) {
  pooling.validate();
  ad::Tape& tape = params.tape();
  TableVars out;
  out.hidden = encoder::encode(params, config, input.tokens);
  ad::Var phi = ad::saturate(encoder::project_to_vocab(params, out.hidden));
  const auto positions = field_positions(input);

  std::array<ad::Var, kFieldCount> fields;
  switch (pooling.within) {
    case WithinField::kTableSpecific:
      fields[0] = diff::pool_title(phi, input.title_span);
      fields[1] = diff::pool_headers(phi, input.header_spans);
      fields[2] = diff::pool_cells(phi, input.cell_spans, input.rows_kept, input.cols);
      break;
    case WithinField::kMax:
    case WithinField::kMean:
      for (std::size_t f = 0; f < kFieldCount; ++f) {
        fields[f] = pooled_or_zero(phi, positions[f], pooling.within == WithinField::kMax);
      }
      break;
  }
  out.fields = ad::vconcat(fields);

  const auto& active = pooling.mask.sparse;
  std::vector<Eigen::Index> active_rows;
  for (std::size_t f = 0; f < kFieldCount; ++f) {
    if (active[f]) active_rows.push_back(static_cast<Eigen::Index>(f));
  }
  if (active_rows.empty()) {
    out.sparse = zero_row(tape, phi.cols());
  } else {
    switch (pooling.across) {
      case AcrossField::kMofe: {
        std::vector<Eigen::Index> ind(std::begin(input.indicator_positions), std::end(input.indicator_positions));
        auto m = diff::mofe(out.fields, ad::gather_rows(out.hidden, ind), params["gate.w"], params["gate.b"],
                            pooling.k, active);
        out.sparse = m.sparse;
        out.gates = m.gates;
        break;
      }
      case AcrossField::kMax:
        out.sparse = ad::max_rows(ad::gather_rows(out.fields, active_rows));
        break;
      case AcrossField::kMean:
        out.sparse = ad::mean_rows(ad::gather_rows(out.fields, active_rows));
        break;
    }
  }

  if (pooling.mask.any_dense_masked()) {
    encoder::HiddenPositions hidden_from_cls;
    for (std::size_t f = 0; f < kFieldCount; ++f) {
      if (pooling.mask.dense[f]) continue;
      hidden_from_cls.push_back(input.indicator_positions[f]);
      for (Eigen::Index p : positions[f]) hidden_from_cls.push_back(static_cast<std::size_t>(p));
    }
    ad::Var masked = encoder::encode(params, config, input.tokens, &hidden_from_cls);
    out.dense = ad::slice_rows(masked, 0, 1);
  } else {
    out.dense = ad::slice_rows(out.hidden, 0, 1);
  }
  return out;
}

namespace {

DenseVector row_to_dense(const Matrix& row) { return DenseVector(row.data(), row.data() + row.size()); }

}  // namespace

QueryRepresentation query_repr(std::span<const TokenId> tokens, const ParameterSet& params,
                               const EncoderConfig& config) {
  ad::Tape tape;
  encoder::BoundParams bound(tape, params, false);
  QueryVars v = query_repr(bound, config, tokens);
  return {row_to_dense(v.dense.value()), row_to_sparse(v.sparse.value())};
}

QueryRepresentation query_repr(const corpus::Query& query, const corpus::Vocabulary& vocab,
                               const ParameterSet& params, const EncoderConfig& config, std::size_t max_len) {
  if (corpus::tokenize(query.text, vocab).empty()) {
    throw std::invalid_argument("query '" + query.id + "' has no tokens");
  }
  return query_repr(corpus::serialize_query(query, vocab, max_len), params, config);
}

DenseVector table_dense(const SerializedInput& input, const ParameterSet& params, const EncoderConfig& config) {
  return row_to_dense(encoder::encode(input.tokens, params, config).row(0));
}

TableRepresentation table_repr(const SerializedInput& input, const ParameterSet& params, const EncoderConfig& config,
                               const PoolingConfig& pooling) {
  ad::Tape tape;
  encoder::BoundParams bound(tape, params, false);
  TableVars v = table_repr(bound, config, input, pooling);
  TableRepresentation out;
  out.dense = row_to_dense(v.dense.value());
  out.sparse = row_to_sparse(v.sparse.value());
  for (std::size_t f = 0; f < kFieldCount; ++f) {
    out.bundle.fields[f] = row_to_sparse(v.fields.value().row(static_cast<Eigen::Index>(f)));
  }
  out.bundle.gate_states.resize(kFieldCount, v.hidden.cols());
  for (std::size_t f = 0; f < kFieldCount; ++f) {
    out.bundle.gate_states.row(static_cast<Eigen::Index>(f)) =
        v.hidden.value().row(static_cast<Eigen::Index>(input.indicator_positions[f]));
  }
  if (v.gates.valid()) {
    GateWeights g;
    for (std::size_t f = 0; f < kFieldCount; ++f) g.values[f] = v.gates.value()(0, static_cast<Eigen::Index>(f));
    out.gates = g;
  }
  return out;
}

std::string dump_sparse(const SparseVector& v, const corpus::Vocabulary& vocab) {
  std::vector<SparseVector::Entry> entries = v.entries();
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.weight > b.weight; });
  std::ostringstream out;
  out << std::setprecision(6);
  for (const auto& e : entries) {
    out << (e.index < vocab.size() ? vocab.token(e.index) : "#" + std::to_string(e.index)) << '\t' << e.weight
        << '\n';
  }
  return out.str();
}

}  // namespace thyme::representation
