#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace thyme::corpus {

using TokenId = std::uint32_t;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Table {
  std::string id;
  std::string title;
  std::vector<std::string> headers;
  /// Row-major grid; every row holds headers.size() cells.
  std::vector<std::vector<std::string>> cells;

  std::size_t rows() const { return cells.size(); }
  std::size_t cols() const { return headers.size(); }

  /// Throws CorpusError when the grid is ragged or there are no headers.
  void validate() const;

  bool operator==(const Table&) const = default;
};

struct Query {
  std::string id;
  std::string text;

  bool operator==(const Query&) const = default;
};

/// query id -> ids of relevant tables.
using RelevanceJudgments = std::map<std::string, std::set<std::string>>;

struct Corpus {
  std::vector<Table> tables;
  std::vector<Query> queries;
  RelevanceJudgments judgments;

  /// Checks unique ids, table shapes, non-empty queries and that every
  /// judgment references known ids with at least one relevant table.
  void validate() const;

  const Table* find_table(std::string_view id) const;

  bool operator==(const Corpus&) const = default;
};

/// Lowercased word pieces split on whitespace and ASCII punctuation. Bytes
/// >= 0x80 are kept as word characters so UTF-8 text survives intact.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kTtl = 4;
  static constexpr TokenId kHead = 5;
  static constexpr TokenId kCell = 6;
  static constexpr std::size_t kReservedCount = 7;

  static const std::vector<std::string>& reserved_tokens();

  /// Reserved tokens followed by `words` in the given order. Duplicates or
  /// collisions with reserved tokens throw.
  explicit Vocabulary(const std::vector<std::string>& words = {});

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  TokenId index_of(std::string_view token) const;
  bool contains(std::string_view token) const;

  /// FNV-1a over the ordered token list; identifies the vocabulary in index
  /// manifests.
  std::uint64_t hash() const;

  /// One token per line, reserved tokens included.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Frequency-descending, then lexicographic. Counts every word in titles,
/// headers, cells and query texts.
Vocabulary build_vocabulary(const std::vector<Table>& tables, const std::vector<Query>& queries,
                            std::size_t min_count = 1);

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);

/// Half-open token range [begin, end) into SerializedInput::tokens.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool operator==(const Span&) const = default;
};

struct CellSpan {
  std::size_t row = 0;
  std::size_t col = 0;
  Span span;
  bool operator==(const CellSpan&) const = default;
};

struct SerializedInput {
  std::string table_id;
  std::vector<TokenId> tokens;
  Span title_span;
  std::vector<Span> header_spans;
  std::vector<CellSpan> cell_spans;
  /// Positions of [TTL], [HEAD], [CELL] in that order.
  std::size_t indicator_positions[3] = {0, 0, 0};
  std::size_t rows_kept = 0;
  std::size_t rows_total = 0;
  std::size_t cols = 0;
  bool rows_truncated = false;
  bool title_truncated = false;

  bool truncated() const { return rows_truncated || title_truncated; }
};

inline constexpr std::size_t kDefaultMaxLen = 256;

/// [CLS] [TTL] title [HEAD] headers [CELL] cells (row-major) [SEP].
/// Overflow drops whole trailing rows first and then trims the title; if the
/// headers still do not fit, throws CorpusError naming the table.
SerializedInput serialize_table(const Table& table, const Vocabulary& vocab,
                                std::size_t max_len = kDefaultMaxLen);

/// [CLS] query tokens [SEP], truncated to max_len.
std::vector<TokenId> serialize_query(const Query& query, const Vocabulary& vocab,
                                     std::size_t max_len = kDefaultMaxLen);

// JSON Lines I/O. A corpus directory holds tables.jsonl, queries.jsonl and
// judgments.jsonl; a missing judgments file reads as no judgments.
std::vector<Table> load_tables(const std::filesystem::path& path);
std::vector<Query> load_queries(const std::filesystem::path& path);
RelevanceJudgments load_judgments(const std::filesystem::path& path);
void save_tables(const std::filesystem::path& path, const std::vector<Table>& tables);
void save_queries(const std::filesystem::path& path, const std::vector<Query>& queries);
void save_judgments(const std::filesystem::path& path, const RelevanceJudgments& judgments);

Corpus load_corpus(const std::filesystem::path& dir);
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);

}  // namespace thyme::corpus
