#include "thyme/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace thyme::harness {

using nlohmann::json;

namespace {

void check_args(const std::set<std::string>& relevant, std::size_t k) {
  if (k == 0) throw std::invalid_argument("metric cutoff k must be at least 1");
  if (relevant.empty()) throw std::invalid_argument("relevant set is empty");
}

}  // namespace

double recall_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, std::size_t k) {
  check_args(relevant, k);
  const std::size_t depth = std::min(k, ranked.size());
  std::size_t hits = 0;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < depth; ++i) {
    if (relevant.count(ranked[i]) && seen.insert(ranked[i]).second) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, std::size_t k) {
  check_args(relevant, k);
  const std::size_t depth = std::min(k, ranked.size());
  double dcg = 0.0;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < depth; ++i) {
    if (relevant.count(ranked[i]) && seen.insert(ranked[i]).second) dcg += 1.0 / std::log2(double(i) + 2.0);
  }
  double ideal = 0.0;
  const std::size_t hits = std::min(k, relevant.size());
  for (std::size_t i = 0; i < hits; ++i) ideal += 1.0 / std::log2(double(i) + 2.0);
  return dcg / ideal;
}

MetricValues score_ranking(std::span<const std::string> ranked, const std::set<std::string>& relevant) {
  MetricValues v{};
  v[kNdcg5] = ndcg_at_k(ranked, relevant, 5);
  v[kNdcg10] = ndcg_at_k(ranked, relevant, 10);
  v[kRecall1] = recall_at_k(ranked, relevant, 1);
  v[kRecall10] = recall_at_k(ranked, relevant, 10);
  v[kRecall50] = recall_at_k(ranked, relevant, 50);
  return v;
}

json EvalReport::to_json() const {
  json metrics = json::object();
  for (std::size_t m = 0; m < kMetricCount; ++m) metrics[kMetricNames[m]] = aggregate[m];
  json queries = json::array();
  for (const auto& q : per_query) {
    json row{{"query_id", q.query_id}};
    for (std::size_t m = 0; m < kMetricCount; ++m) row[kMetricNames[m]] = q.values[m];
    queries.push_back(std::move(row));
  }
  return json{{"metrics", metrics},
              {"judged", judged()},
              {"skipped", skipped},
              {"cutoff", kCutoff},
              {"per_query", queries},
              {"config", config}};
}

EvalReport evaluate_rankings(const std::vector<corpus::Query>& queries, const Rankings& rankings,
                             const corpus::RelevanceJudgments& judgments) {
  EvalReport report;
  static const std::vector<std::string> kEmpty;
  for (const corpus::Query& q : queries) {
    auto j = judgments.find(q.id);
    if (j == judgments.end() || j->second.empty()) {
      report.skipped.push_back(q.id);
      continue;
    }
    auto r = rankings.find(q.id);
    const auto& ranked = r == rankings.end() ? kEmpty : r->second;
    std::span<const std::string> top(ranked.data(), std::min(ranked.size(), kCutoff));
    report.per_query.push_back({q.id, score_ranking(top, j->second)});
  }
  if (!report.per_query.empty()) {
    // Ordered reduction so the aggregate is reproducible bit for bit.
    for (const auto& q : report.per_query) {
      for (std::size_t m = 0; m < kMetricCount; ++m) report.aggregate[m] += q.values[m];
    }
    for (double& v : report.aggregate) v /= static_cast<double>(report.per_query.size());
  }
  return report;
}

Ranker make_ranker(const index::Retriever& retriever, index::SearchMode mode) {
  return [&retriever, mode](const corpus::Query& q, std::size_t depth) {
    std::vector<std::string> ids;
    for (auto& r : retriever.search(q, depth, mode)) ids.push_back(std::move(r.table_id));
    return ids;
  };
}

Ranker make_ranker(const index::Bm25Index& bm25) {
  return [&bm25](const corpus::Query& q, std::size_t depth) {
    std::vector<std::string> ids;
    for (auto& [id, score] : bm25.search(q.text, depth)) ids.push_back(id);
    return ids;
  };
}

Rankings rank_all(const Ranker& ranker, const std::vector<corpus::Query>& queries) {
  Rankings out;
  for (const auto& q : queries) out[q.id] = ranker(q, kCutoff);
  return out;
}

EvalReport evaluate(const Ranker& ranker, const std::vector<corpus::Query>& queries,
                    const corpus::RelevanceJudgments& judgments) {
  std::vector<corpus::Query> judged;
  for (const auto& q : queries) {
    if (judgments.count(q.id)) judged.push_back(q);
  }
  EvalReport report = evaluate_rankings(queries, rank_all(ranker, judged), judgments);
  return report;
}

namespace {

std::string fixed(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string render(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      } else {
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
      }
    }
    out << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  out << std::string(total - 2, '-') << '\n';
  for (const auto& row : rows) line(row);
  return out.str();
}

std::vector<std::string> metric_header(const std::string& first) {
  std::vector<std::string> h{first};
  for (const char* name : kMetricNames) h.emplace_back(name);
  h.emplace_back("judged");
  return h;
}

std::vector<std::string> metric_cells(const std::string& label, const EvalReport& r) {
  std::vector<std::string> row{label};
  for (double v : r.aggregate) row.push_back(fixed(100.0 * v, 2));
  row.push_back(std::to_string(r.judged()));
  return row;
}

}  // namespace

std::string format_reports(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& [label, report] : rows) cells.push_back(metric_cells(label, report));
  return render(metric_header("run"), cells);
}

std::vector<representation::PoolingConfig> pooling_variants() {
  using representation::AcrossField;
  using representation::WithinField;
  std::vector<representation::PoolingConfig> out;
  const std::pair<WithinField, AcrossField> combos[] = {
      {WithinField::kTableSpecific, AcrossField::kMofe},
      {WithinField::kMax, AcrossField::kMofe},
      {WithinField::kMean, AcrossField::kMofe},
      {WithinField::kMax, AcrossField::kMax},
      {WithinField::kMean, AcrossField::kMean},
  };
  for (const auto& [within, across] : combos) {
    representation::PoolingConfig p;
    p.within = within;
    p.across = across;
    out.push_back(p);
  }
  return out;
}

std::vector<representation::PoolingConfig> masking_variants() {
  // {title dense, title sparse, body dense, body sparse}
  const std::array<bool, 4> rows[] = {
      {true, true, true, true},
      {true, false, true, true},
      {true, true, false, true},
      {true, true, true, false},
      {false, true, true, false},
  };
  std::vector<representation::PoolingConfig> out;
  for (const auto& r : rows) {
    representation::PoolingConfig p;
    p.mask.dense = {r[0], r[2], r[2]};
    p.mask.sparse = {r[1], r[3], r[3]};
    p.k = std::max<std::size_t>(1, std::min(p.k, p.mask.sparse_active()));
    out.push_back(p);
  }
  return out;
}

std::vector<AblationRow> run_ablation(const AblationSpec& spec, const corpus::Corpus& train,
                                      const corpus::Corpus& eval, const corpus::Vocabulary& vocab,
                                      const RowCallback& on_row) {
  std::vector<AblationRow> rows;
  for (const auto& pooling : spec.configs) {
    AblationRow row;
    row.pooling = pooling;
    try {
      row.label = pooling.label();
      pooling.validate();
      training::TrainConfig config = spec.train;
      config.pooling = pooling;
      const auto result = training::train(train, vocab, config);
      const auto built = index::build_index(eval.tables, vocab, result.params, result.config, pooling, config.max_len);
      const index::Retriever retriever(vocab, result.params, built);
      EvalReport report = evaluate(make_ranker(retriever, spec.mode), eval.queries, eval.judgments);
      report.config = json{{"pooling", row.label},
                           {"mode", index::to_string(spec.mode)},
                           {"epochs", config.epochs},
                           {"seed", config.seed}};
      row.report = std::move(report);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows) {
    if (row.report) {
      cells.push_back(metric_cells(row.label, *row.report));
    } else {
      std::vector<std::string> failed{row.label};
      for (std::size_t m = 0; m < kMetricCount; ++m) failed.emplace_back("-");
      failed.push_back("failed: " + row.error);
      cells.push_back(std::move(failed));
    }
  }
  return render(metric_header("variant"), cells);
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& row : rows) {
    json r{{"label", row.label}};
    if (row.report) {
      r["report"] = row.report->to_json();
    } else {
      r["error"] = row.error;
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace thyme::harness
