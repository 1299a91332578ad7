#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thyme/corpus.hpp"
#include "thyme/index.hpp"
#include "thyme/training.hpp"

namespace thyme::harness {

/// Fraction of the relevant set found in the first k ranked ids.
/// Throws std::invalid_argument for k == 0 or an empty relevant set.
double recall_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, std::size_t k);

/// Binary-gain NDCG; the ideal DCG places min(k, |relevant|) hits first.
double ndcg_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, std::size_t k);

enum Metric : std::size_t { kNdcg5, kNdcg10, kRecall1, kRecall10, kRecall50, kMetricCount };
inline constexpr std::array<const char*, kMetricCount> kMetricNames = {"NDCG@5", "NDCG@10", "R@1", "R@10", "R@50"};

/// Retrieval depth used for every report.
inline constexpr std::size_t kCutoff = 50;

using MetricValues = std::array<double, kMetricCount>;

MetricValues score_ranking(std::span<const std::string> ranked, const std::set<std::string>& relevant);

struct QueryMetrics {
  std::string query_id;
  MetricValues values{};
};

struct EvalReport {
  MetricValues aggregate{};  // macro-average over judged queries, in [0, 1]
  std::vector<QueryMetrics> per_query;
  std::vector<std::string> skipped;  // queries without judgments
  nlohmann::json config = nlohmann::json::object();

  std::size_t judged() const { return per_query.size(); }
  nlohmann::json to_json() const;
};

/// query id -> ranked table ids, best first.
using Rankings = std::map<std::string, std::vector<std::string>>;

/// Pure function of the ranked lists and judgments. Lists are cut at kCutoff.
/// A judged query with no ranking entry counts as an empty ranking.
EvalReport evaluate_rankings(const std::vector<corpus::Query>& queries, const Rankings& rankings,
                             const corpus::RelevanceJudgments& judgments);

/// Produces the ranked table ids for one query, at most `depth` long.
using Ranker = std::function<std::vector<std::string>(const corpus::Query&, std::size_t depth)>;

Ranker make_ranker(const index::Retriever& retriever, index::SearchMode mode);
Ranker make_ranker(const index::Bm25Index& bm25);

Rankings rank_all(const Ranker& ranker, const std::vector<corpus::Query>& queries);

/// Retrieves the top kCutoff for every judged query and scores them.
EvalReport evaluate(const Ranker& ranker, const std::vector<corpus::Query>& queries,
                    const corpus::RelevanceJudgments& judgments);

/// Aligned text table, metrics scaled by 100.
std::string format_reports(const std::vector<std::pair<std::string, EvalReport>>& rows);

struct AblationSpec {
  std::vector<representation::PoolingConfig> configs;
  training::TrainConfig train;
  index::SearchMode mode = index::SearchMode::kHybrid;
};

/// Pooling/aggregation variants: table-specific/MoFE, max/MoFE, mean/MoFE,
/// max/max (tables as flat text) and mean/mean.
std::vector<representation::PoolingConfig> pooling_variants();
/// Field masking variants over title and body (headers + cells).
std::vector<representation::PoolingConfig> masking_variants();

struct AblationRow {
  std::string label;
  representation::PoolingConfig pooling;
  std::optional<EvalReport> report;
  std::string error;  // set when training or evaluation failed
};

using RowCallback = std::function<void(const AblationRow&)>;

/// One independent training run + evaluation per config, all from the same
/// seed. Queries and judgments of `eval` are scored against its tables.
std::vector<AblationRow> run_ablation(const AblationSpec& spec, const corpus::Corpus& train,
                                      const corpus::Corpus& eval, const corpus::Vocabulary& vocab,
                                      const RowCallback& on_row = {});

std::string format_ablation(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);

enum class QueryKind { kCellLookup, kTitleParaphrase };
std::string to_string(QueryKind kind);

struct SyntheticSpec {
  std::size_t tables = 200;
  std::size_t min_rows = 3;
  std::size_t max_rows = 6;
  std::size_t min_cols = 3;
  std::size_t max_cols = 5;
  /// Distinct pseudo-words available to the generator.
  std::size_t vocab_size = 3000;
  std::size_t title_words = 40;   // pool of title words; each has one synonym
  std::size_t title_length = 3;
  std::size_t header_words = 30;
  std::size_t cell_words = 150;   // shared filler values
  std::size_t cell_lookup_queries = 50;
  std::size_t title_paraphrase_queries = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticCorpus {
  corpus::Corpus corpus;
  std::map<std::string, QueryKind> kinds;
  /// title word -> synonym; synonyms never occur in any table.
  std::map<std::string, std::string> synonyms;
};

/// Cell-lookup queries name a column header and a row entity that occurs in
/// exactly one table. Title-paraphrase queries are the synonyms of a table's
/// title words. Throws std::invalid_argument when the word budget cannot
/// guarantee unique answers.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

}  // namespace thyme::harness
