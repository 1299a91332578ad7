#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "thyme/autodiff.hpp"
#include "thyme/corpus.hpp"
#include "thyme/encoder.hpp"

namespace thyme::representation {

using ad::Matrix;
using corpus::CellSpan;
using corpus::SerializedInput;
using corpus::Span;
using corpus::TokenId;
using encoder::EncoderConfig;
using encoder::ParameterSet;
using encoder::VocabLogits;

/// log(1 + ReLU(x)).
double saturate(double x);

using DenseVector = std::vector<double>;

/// Non-negative vocabulary-indexed weights. Only strictly positive entries
/// are stored, sorted by index.
class SparseVector {
 public:
  struct Entry {
    TokenId index;
    double weight;
    bool operator==(const Entry&) const = default;
  };

  SparseVector() = default;
  explicit SparseVector(std::size_t dim) : dim_(dim) {}

  /// Keeps the strictly positive coordinates of a dense row.
  static SparseVector from_dense(std::span<const double> values);
  static SparseVector from_dense(const Matrix& row);
  /// Entries may come in any order; throws on duplicates, out-of-range
  /// indices or non-positive/non-finite weights.
  static SparseVector from_entries(std::size_t dim, std::vector<Entry> entries);

  std::size_t dim() const { return dim_; }
  std::size_t nnz() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  double get(TokenId index) const;
  Eigen::RowVectorXd to_dense() const;

  bool operator==(const SparseVector&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<Entry> entries_;
};

enum class Field { kTitle = 0, kHeaders = 1, kCells = 2 };
inline constexpr std::size_t kFieldCount = 3;

enum class WithinField { kTableSpecific, kMax, kMean };
enum class AcrossField { kMofe, kMax, kMean };

std::string to_string(WithinField v);
std::string to_string(AcrossField v);
WithinField parse_within_field(const std::string& s);
AcrossField parse_across_field(const std::string& s);

/// Which fields feed each side of the table representation. A dense-masked
/// field (indicator included) is hidden from the attention of every other
/// token in a second encoder pass that yields the dense vector; a
/// sparse-masked field is left out of the across-field aggregation.
struct FieldMask {
  std::array<bool, kFieldCount> dense{true, true, true};
  std::array<bool, kFieldCount> sparse{true, true, true};

  bool any_dense_masked() const { return !(dense[0] && dense[1] && dense[2]); }
  std::size_t sparse_active() const { return std::size_t(sparse[0]) + sparse[1] + sparse[2]; }
  bool operator==(const FieldMask&) const = default;
};

struct PoolingConfig {
  WithinField within = WithinField::kTableSpecific;
  AcrossField across = AcrossField::kMofe;
  std::size_t k = 3;
  FieldMask mask;

  void validate() const;
  /// Compact label such as "table_specific/mofe/k3".
  std::string label() const;
  bool operator==(const PoolingConfig&) const = default;
};

struct GateWeights {
  std::array<double, kFieldCount> values{0.0, 0.0, 0.0};
  double sum() const { return values[0] + values[1] + values[2]; }
  std::size_t nonzero() const;
};

struct FieldBundle {
  std::array<SparseVector, kFieldCount> fields;
  /// Hidden-state rows at [TTL], [HEAD], [CELL] (3 x d).
  Matrix gate_states;
};

// Pooling over a fixed logit matrix W_t (rows = token positions).

/// Max of saturate() over the title tokens.
SparseVector pool_title(const VocabLogits& logits, const Span& title);
/// Mean within each header, max across headers.
SparseVector pool_headers(const VocabLogits& logits, const std::vector<Span>& headers);
/// Flat mean over every token of each column, max across columns.
SparseVector pool_cells(const VocabLogits& logits, const std::vector<CellSpan>& cells, std::size_t rows,
                        std::size_t cols);

/// Gate logits from a shared affine map (gate_w: d x 1, gate_b) applied to
/// each gate state; softmax over the top-k (ties to the lower field).
std::pair<SparseVector, GateWeights> mofe_aggregate(const FieldBundle& bundle, const Matrix& gate_w, double gate_b,
                                                    std::size_t k,
                                                    std::array<bool, kFieldCount> active = {true, true, true});

/// Which fields the gate keeps: the top `k` active logits.
std::vector<bool> select_top_k(std::span<const double> logits, std::size_t k, std::array<bool, kFieldCount> active);

// Differentiable building blocks. `phi` is saturate(W_t) on the tape.
namespace diff {

ad::Var pool_title(ad::Var phi, const Span& title);
ad::Var pool_headers(ad::Var phi, const std::vector<Span>& headers);
ad::Var pool_cells(ad::Var phi, const std::vector<CellSpan>& cells, std::size_t rows, std::size_t cols);

struct MofeOutput {
  ad::Var sparse;  // 1 x |V|
  ad::Var gates;   // 1 x 3
};
MofeOutput mofe(ad::Var fields, ad::Var gate_states, ad::Var gate_w, ad::Var gate_b, std::size_t k,
                std::array<bool, kFieldCount> active);

}  // namespace diff

struct QueryVars {
  ad::Var dense;   // 1 x d
  ad::Var sparse;  // 1 x |V|
};

struct TableVars {
  ad::Var dense;   // 1 x d
  ad::Var sparse;  // 1 x |V|
  ad::Var fields;  // 3 x |V|, one row per field before aggregation
  ad::Var gates;   // 1 x 3 when aggregated by MoFE, invalid otherwise
  ad::Var hidden;  // encoder output used for the sparse side
};

/// Query: dense = [CLS] row; sparse = max over every position (specials
/// included) of saturate(logits). `tokens` must be [CLS] body.. [SEP].
QueryVars query_repr(const encoder::BoundParams& params, const EncoderConfig& config,
                     std::span<const TokenId> tokens);

TableVars table_repr(const encoder::BoundParams& params, const EncoderConfig& config, const SerializedInput& input,
                     const PoolingConfig& pooling);

struct QueryRepresentation {
  DenseVector dense;
  SparseVector sparse;
};

struct TableRepresentation {
  DenseVector dense;
  SparseVector sparse;
  std::optional<GateWeights> gates;
  FieldBundle bundle;
};

QueryRepresentation query_repr(const corpus::Query& query, const corpus::Vocabulary& vocab,
                               const ParameterSet& params, const EncoderConfig& config,
                               std::size_t max_len = corpus::kDefaultMaxLen);
QueryRepresentation query_repr(std::span<const TokenId> tokens, const ParameterSet& params,
                               const EncoderConfig& config);
DenseVector table_dense(const SerializedInput& input, const ParameterSet& params, const EncoderConfig& config);
TableRepresentation table_repr(const SerializedInput& input, const ParameterSet& params, const EncoderConfig& config,
                               const PoolingConfig& pooling);

/// "token<TAB>weight" lines, weight descending (index ascending on ties).
std::string dump_sparse(const SparseVector& v, const corpus::Vocabulary& vocab);

}  // namespace thyme::representation
