#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "thyme/corpus.hpp"
#include "thyme/encoder.hpp"
#include "thyme/representation.hpp"

namespace thyme::index {

using corpus::TokenId;
using representation::DenseVector;
using representation::PoolingConfig;
using representation::SparseVector;

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Internal document number. Tables are numbered in ascending id order, so
/// ordering by DocId is ordering by table id.
using DocId = std::uint32_t;

struct Posting {
  DocId doc;
  double weight;
  bool operator==(const Posting&) const = default;
};

class InvertedIndex {
 public:
  explicit InvertedIndex(std::size_t vocab_size = 0) : lists_(vocab_size) {}

  /// Documents must arrive in increasing DocId order.
  void add(DocId doc, const SparseVector& v);

  std::size_t vocab_size() const { return lists_.size(); }
  std::size_t doc_count() const { return doc_count_; }
  const std::vector<Posting>& postings(TokenId token) const { return lists_.at(token); }
  std::size_t posting_count() const;
  SparseVector reconstruct(DocId doc) const;

  /// Term-at-a-time accumulation of the sparse inner product for every
  /// document (zero where no query term matches). Query terms are visited in
  /// ascending token order.
  std::vector<double> accumulate(const SparseVector& query, std::vector<DocId>* touched = nullptr) const;

  bool operator==(const InvertedIndex&) const = default;

 private:
  friend class HybridIndex;
  std::vector<std::vector<Posting>> lists_;
  std::size_t doc_count_ = 0;
};

/// Row-major float32 matrix of table dense vectors.
class DenseStore {
 public:
  explicit DenseStore(std::size_t dim = 0) : dim_(dim) {}

  void add(std::span<const double> v);
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return dim_ == 0 ? 0 : data_.size() / dim_; }
  std::span<const float> row(DocId doc) const { return {data_.data() + std::size_t(doc) * dim_, dim_}; }
  double dot(DocId doc, std::span<const double> query) const;

  bool operator==(const DenseStore&) const = default;

 private:
  friend class HybridIndex;
  std::size_t dim_;
  std::vector<float> data_;
};

struct ScoredDoc {
  DocId doc;
  double score;
};

struct RetrievalResult {
  std::string table_id;
  double sem = 0.0;
  double lex = 0.0;
  double total = 0.0;
  std::size_t rank = 0;  // 1-based
};

/// Orders by score descending, then doc ascending, and keeps the first k.
void top_k_in_place(std::vector<ScoredDoc>& docs, std::size_t k);

/// Exact top-k by sparse inner product; only documents sharing a term.
std::vector<ScoredDoc> search_sparse(const SparseVector& query, const InvertedIndex& index, std::size_t top_k);
/// Exact top-k by inner product over every stored vector.
std::vector<ScoredDoc> search_dense(std::span<const double> query, const DenseStore& store, std::size_t top_k);

struct HybridSearchOptions {
  /// Below this table count the fused score is computed for every table.
  std::size_t full_scan_below = 10000;
  /// First candidate depth is factor * top_k, doubled until exact.
  std::size_t initial_factor = 4;
};

struct FusedDoc {
  DocId doc;
  double sem;
  double lex;
  double total;
};

/// Exact top-k under sem + lex.
std::vector<FusedDoc> search_hybrid(std::span<const double> query_dense, const SparseVector& query_sparse,
                                    const InvertedIndex& index, const DenseStore& store, std::size_t top_k,
                                    const HybridSearchOptions& options = {});

struct IndexManifest {
  std::uint64_t vocab_hash = 0;
  std::size_t vocab_size = 0;
  std::uint64_t params_hash = 0;
  encoder::EncoderConfig encoder;
  PoolingConfig pooling;
  std::size_t max_len = corpus::kDefaultMaxLen;
};

/// Inverted index + dense store over one table set, with the id map and the
/// build provenance needed to refuse mismatched loads.
class HybridIndex {
 public:
  HybridIndex() = default;
  HybridIndex(IndexManifest manifest, std::vector<std::string> table_ids, InvertedIndex sparse, DenseStore dense);

  const IndexManifest& manifest() const { return manifest_; }
  const std::vector<std::string>& table_ids() const { return table_ids_; }
  const InvertedIndex& sparse() const { return sparse_; }
  const DenseStore& dense() const { return dense_; }
  std::size_t size() const { return table_ids_.size(); }
  const std::string& table_id(DocId doc) const { return table_ids_.at(doc); }
  DocId doc_of(const std::string& table_id) const;

  std::vector<RetrievalResult> search(std::span<const double> query_dense, const SparseVector& query_sparse,
                                      std::size_t top_k, const HybridSearchOptions& options = {}) const;

  /// Directory with manifest.json, postings.bin and dense.bin.
  void save(const std::filesystem::path& dir) const;
  /// Throws IndexError unless the vocabulary and parameter hashes match.
  static HybridIndex load(const std::filesystem::path& dir, const corpus::Vocabulary& vocab,
                          const encoder::ParameterSet& params);
  static IndexManifest read_manifest(const std::filesystem::path& dir);

 private:
  IndexManifest manifest_;
  std::vector<std::string> table_ids_;
  std::unordered_map<std::string, DocId> doc_of_;
  InvertedIndex sparse_;
  DenseStore dense_;
};

HybridIndex build_index(const std::vector<corpus::Table>& tables, const corpus::Vocabulary& vocab,
                        const encoder::ParameterSet& params, const encoder::EncoderConfig& config,
                        const PoolingConfig& pooling, std::size_t max_len = corpus::kDefaultMaxLen);

enum class SearchMode { kHybrid, kDense, kSparse };
std::string to_string(SearchMode mode);
SearchMode parse_search_mode(const std::string& s);

/// Encodes queries with the indexing model and searches a HybridIndex.
class Retriever {
 public:
  Retriever(const corpus::Vocabulary& vocab, const encoder::ParameterSet& params, const HybridIndex& index);

  std::vector<RetrievalResult> search(const corpus::Query& query, std::size_t top_k,
                                      SearchMode mode = SearchMode::kHybrid) const;

 private:
  const corpus::Vocabulary* vocab_;
  const encoder::ParameterSet* params_;
  const HybridIndex* index_;
};

/// Okapi BM25 over tables flattened to title + headers + cells words.
class Bm25Index {
 public:
  explicit Bm25Index(const std::vector<corpus::Table>& tables, double k1 = 0.9, double b = 0.4);

  /// Documents with a positive score, best first (ties by table id).
  std::vector<std::pair<std::string, double>> search(std::string_view query, std::size_t top_k) const;

  double k1() const { return k1_; }
  double b() const { return b_; }

 private:
  double k1_;
  double b_;
  std::vector<std::string> ids_;
  std::vector<double> lengths_;
  double avg_length_ = 0.0;
  /// term -> (doc, term frequency), doc ascending.
  std::unordered_map<std::string, std::vector<std::pair<DocId, double>>> postings_;
};

}  // namespace thyme::index
