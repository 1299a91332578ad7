#pragma once

// Straight-loop reference implementations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "thyme/autodiff.hpp"
#include "thyme/corpus.hpp"

namespace oracle {

using Matrix = thyme::ad::Matrix;
using Vec = std::vector<double>;

inline double phi(double x) { return x > 0.0 ? std::log1p(x) : 0.0; }

inline Vec phi_row(const Matrix& w, std::size_t r) {
  Vec out(static_cast<std::size_t>(w.cols()));
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = phi(w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(v)));
  return out;
}

inline Vec elementwise_max(const std::vector<Vec>& rows, std::size_t dim) {
  Vec out(dim, 0.0);
  for (const auto& r : rows) {
    for (std::size_t v = 0; v < dim; ++v) out[v] = std::max(out[v], r[v]);
  }
  return out;
}

inline Vec mean_of(const std::vector<Vec>& rows, std::size_t dim) {
  Vec out(dim, 0.0);
  if (rows.empty()) return out;
  for (const auto& r : rows) {
    for (std::size_t v = 0; v < dim; ++v) out[v] += r[v];
  }
  for (double& x : out) x /= static_cast<double>(rows.size());
  return out;
}

inline Vec title(const Matrix& w, const thyme::corpus::Span& s) {
  std::vector<Vec> rows;
  for (std::size_t p = s.begin; p < s.end; ++p) rows.push_back(phi_row(w, p));
  return elementwise_max(rows, static_cast<std::size_t>(w.cols()));
}

inline Vec headers(const Matrix& w, const std::vector<thyme::corpus::Span>& spans) {
  const auto dim = static_cast<std::size_t>(w.cols());
  std::vector<Vec> per_header;
  for (const auto& s : spans) {
    std::vector<Vec> rows;
    for (std::size_t p = s.begin; p < s.end; ++p) rows.push_back(phi_row(w, p));
    per_header.push_back(mean_of(rows, dim));
  }
  return elementwise_max(per_header, dim);
}

inline Vec cells(const Matrix& w, const std::vector<thyme::corpus::CellSpan>& spans, std::size_t cols) {
  const auto dim = static_cast<std::size_t>(w.cols());
  std::vector<std::vector<Vec>> by_col(cols);
  for (const auto& c : spans) {
    for (std::size_t p = c.span.begin; p < c.span.end; ++p) by_col[c.col].push_back(phi_row(w, p));
  }
  std::vector<Vec> col_means;
  for (const auto& rows : by_col) col_means.push_back(mean_of(rows, dim));
  return elementwise_max(col_means, dim);
}

inline Vec softmax(const Vec& x) {
  double m = -INFINITY;
  for (double v : x) m = std::max(m, v);
  Vec out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - m);
  for (double& v : out) v /= z;
  return out;
}

/// Full sort of every (doc, score), score desc then doc asc, cut to k.
inline std::vector<std::pair<std::size_t, double>> top_k(const Vec& scores, std::size_t k,
                                                         const std::vector<bool>* keep = nullptr) {
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t d = 0; d < scores.size(); ++d) {
    if (keep == nullptr || (*keep)[d]) all.emplace_back(d, scores[d]);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (all.size() > k) all.resize(k);
  return all;
}

inline double recall(const std::vector<std::string>& ranked, const std::set<std::string>& rel, std::size_t k) {
  std::size_t found = 0;
  for (const auto& r : rel) {
    auto it = std::find(ranked.begin(), ranked.end(), r);
    if (it != ranked.end() && std::size_t(it - ranked.begin()) < k) ++found;
  }
  return double(found) / double(rel.size());
}

inline double ndcg(const std::vector<std::string>& ranked, const std::set<std::string>& rel, std::size_t k) {
  double dcg = 0.0;
  for (const auto& r : rel) {
    auto it = std::find(ranked.begin(), ranked.end(), r);
    if (it == ranked.end()) continue;
    const std::size_t rank = std::size_t(it - ranked.begin()) + 1;
    if (rank <= k) dcg += std::log(2.0) / std::log(double(rank) + 1.0);
  }
  double ideal = 0.0;
  for (std::size_t rank = 1; rank <= std::min(k, rel.size()); ++rank) ideal += std::log(2.0) / std::log(double(rank) + 1.0);
  return dcg / ideal;
}

/// Okapi BM25 with the non-negative idf ln(1 + (N - df + 0.5) / (df + 0.5)),
/// over bags of words; each distinct query word counted once.
inline std::map<std::size_t, double> bm25(const std::vector<std::vector<std::string>>& docs,
                                          const std::vector<std::string>& query, double k1, double b) {
  const double n = double(docs.size());
  double avg = 0.0;
  for (const auto& d : docs) avg += double(d.size());
  avg /= n;
  std::set<std::string> terms(query.begin(), query.end());
  std::map<std::size_t, double> out;
  for (const auto& t : terms) {
    double df = 0.0;
    for (const auto& d : docs) df += std::count(d.begin(), d.end(), t) > 0 ? 1.0 : 0.0;
    if (df == 0.0) continue;
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    for (std::size_t i = 0; i < docs.size(); ++i) {
      const double tf = double(std::count(docs[i].begin(), docs[i].end(), t));
      if (tf == 0.0) continue;
      out[i] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * double(docs[i].size()) / avg));
    }
  }
  return out;
}

}  // namespace oracle
