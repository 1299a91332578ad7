#include <algorithm>
#include <cstdio>
#include <stdexcept>
#include <unordered_set>

#include "thyme/harness.hpp"
#include "thyme/rng.hpp"

namespace thyme::harness {

std::string to_string(QueryKind kind) {
  return kind == QueryKind::kCellLookup ? "cell-lookup" : "title-paraphrase";
}

namespace {

std::size_t choose(std::size_t n, std::size_t k) {
  double c = 1.0;
  for (std::size_t i = 0; i < k; ++i) c = c * double(n - i) / double(i + 1);
  return c > 1e18 ? std::size_t(1e18) : static_cast<std::size_t>(c);
}

/// Pronounceable lowercase words made of 2-4 consonant-vowel syllables.
class WordSource {
 public:
  explicit WordSource(Rng& rng) : rng_(rng) {}

  std::string next() {
    static constexpr char kCons[] = "bdfghklmnprstvz";
    static constexpr char kVow[] = "aeiou";
    while (true) {
      std::string w;
      const std::size_t syllables = 2 + rng_.below(3);
      for (std::size_t s = 0; s < syllables; ++s) {
        w += kCons[rng_.below(sizeof(kCons) - 1)];
        w += kVow[rng_.below(sizeof(kVow) - 1)];
      }
      if (used_.insert(w).second) return w;
    }
  }

  std::vector<std::string> take(std::size_t n) {
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  Rng& rng_;
  std::unordered_set<std::string> used_;
};

std::size_t in_range(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// k distinct indices from [0, n), in draw order.
std::vector<std::size_t> sample(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(k);
  return all;
}

std::string make_id(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%04zu", prefix, i);
  return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (tables < 2) throw std::invalid_argument("synthetic corpus needs at least two tables");
  if (min_rows < 1 || min_rows > max_rows) throw std::invalid_argument("invalid row range");
  if (min_cols < 2 || min_cols > max_cols) throw std::invalid_argument("column range must start at 2 or more");
  if (title_length < 1 || title_length > title_words) throw std::invalid_argument("invalid title length");
  if (header_words < max_cols) throw std::invalid_argument("header pool smaller than the widest table");
  if (cell_words < 1) throw std::invalid_argument("cell pool is empty");
  if (choose(title_words, title_length) < tables) {
    throw std::invalid_argument("title pool too small for unique titles: " + std::to_string(tables) + " tables but " +
                                std::to_string(choose(title_words, title_length)) + " combinations");
  }
  if (cell_lookup_queries > tables || title_paraphrase_queries > tables) {
    throw std::invalid_argument("more queries of one kind than tables");
  }
  const std::size_t needed = 2 * title_words + header_words + cell_words + tables * max_rows;
  if (vocab_size < needed) {
    throw std::invalid_argument("vocabulary budget " + std::to_string(vocab_size) + " is below the " +
                                std::to_string(needed) + " words needed for unique answers");
  }
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  WordSource words(rng);
  const auto title_pool = words.take(spec.title_words);
  const auto synonym_pool = words.take(spec.title_words);
  const auto header_pool = words.take(spec.header_words);
  const auto cell_pool = words.take(spec.cell_words);

  SyntheticCorpus out;
  for (std::size_t i = 0; i < title_pool.size(); ++i) out.synonyms[title_pool[i]] = synonym_pool[i];

  // Table i: column 0 holds row entities unique to the corpus, the other
  // columns draw from the shared cell pool.
  std::set<std::vector<std::size_t>> used_titles;
  std::vector<std::vector<std::size_t>> title_of(spec.tables);
  std::vector<std::vector<std::string>> entities(spec.tables);
  auto& tables = out.corpus.tables;
  for (std::size_t t = 0; t < spec.tables; ++t) {
    std::vector<std::size_t> title;
    do {
      title = sample(rng, spec.title_words, spec.title_length);
      auto key = title;
      std::sort(key.begin(), key.end());
      if (used_titles.insert(key).second) break;
    } while (true);
    title_of[t] = title;

    corpus::Table table;
    table.id = make_id('t', t);
    for (std::size_t w : title) table.title += (table.title.empty() ? "" : " ") + title_pool[w];
    const std::size_t cols = in_range(rng, spec.min_cols, spec.max_cols);
    const std::size_t rows = in_range(rng, spec.min_rows, spec.max_rows);
    for (std::size_t h : sample(rng, spec.header_words, cols)) table.headers.push_back(header_pool[h]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::string> row;
      entities[t].push_back(words.next());
      row.push_back(entities[t].back());
      for (std::size_t c = 1; c < cols; ++c) row.push_back(cell_pool[rng.below(spec.cell_words)]);
      table.cells.push_back(std::move(row));
    }
    tables.push_back(std::move(table));
  }

  std::size_t next_query = 0;
  for (std::size_t t : sample(rng, spec.tables, spec.cell_lookup_queries)) {
    const corpus::Table& table = tables[t];
    const std::size_t r = rng.below(table.rows());
    const std::size_t c = 1 + rng.below(table.cols() - 1);
    corpus::Query q{make_id('q', next_query++), table.headers[c] + " " + entities[t][r]};
    out.kinds[q.id] = QueryKind::kCellLookup;
    out.corpus.judgments[q.id] = {table.id};
    out.corpus.queries.push_back(std::move(q));
  }
  for (std::size_t t : sample(rng, spec.tables, spec.title_paraphrase_queries)) {
    auto order = title_of[t];
    rng.shuffle(order);
    std::string text;
    for (std::size_t w : order) text += (text.empty() ? "" : " ") + synonym_pool[w];
    corpus::Query q{make_id('q', next_query++), text};
    out.kinds[q.id] = QueryKind::kTitleParaphrase;
    out.corpus.judgments[q.id] = {tables[t].id};
    out.corpus.queries.push_back(std::move(q));
  }
  out.corpus.validate();
  return out;
}

}  // namespace thyme::harness
