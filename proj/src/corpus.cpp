#include "thyme/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace thyme::corpus {

using nlohmann::json;

void Table::validate() const {
  if (headers.empty()) throw CorpusError("table '" + id + "' has no headers");
  for (std::size_t r = 0; r < cells.size(); ++r) {
    if (cells[r].size() != headers.size()) {
      throw CorpusError("table '" + id + "' row " + std::to_string(r) + " has " +
                        std::to_string(cells[r].size()) + " cells, expected " +
                        std::to_string(headers.size()));
    }
  }
}

void Corpus::validate() const {
  std::unordered_set<std::string> table_ids;
  for (const Table& t : tables) {
    t.validate();
    if (!table_ids.insert(t.id).second) throw CorpusError("duplicate table id '" + t.id + "'");
  }
  std::unordered_set<std::string> query_ids;
  for (const Query& q : queries) {
    if (q.text.empty()) throw CorpusError("query '" + q.id + "' has empty text");
    if (!query_ids.insert(q.id).second) throw CorpusError("duplicate query id '" + q.id + "'");
  }
  for (const auto& [qid, relevant] : judgments) {
    if (!query_ids.contains(qid)) throw CorpusError("judgment references unknown query '" + qid + "'");
    if (relevant.empty()) throw CorpusError("judgment for query '" + qid + "' lists no tables");
    for (const std::string& tid : relevant) {
      if (!table_ids.contains(tid)) {
        throw CorpusError("judgment for query '" + qid + "' references unknown table '" + tid + "'");
      }
    }
  }
}

const Table* Corpus::find_table(std::string_view id) const {
  for (const Table& t : tables) {
    if (t.id == id) return &t;
  }
  return nullptr;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

const std::vector<std::string>& Vocabulary::reserved_tokens() {
  static const std::vector<std::string> reserved = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                    "[TTL]", "[HEAD]", "[CELL]"};
  return reserved;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = reserved_tokens();
  tokens_.insert(tokens_.end(), words.begin(), words.end());
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw CorpusError("vocabulary token '" + tokens_[i] + "' appears twice");
    }
  }
}

TokenId Vocabulary::index_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (const std::string& t : tokens_) {
    for (char c : t) mix(static_cast<unsigned char>(c));
    mix('\n');
  }
  return h;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write vocabulary to " + path.string());
  for (const std::string& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read vocabulary from " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  const auto& reserved = reserved_tokens();
  if (lines.size() < reserved.size() ||
      !std::equal(reserved.begin(), reserved.end(), lines.begin())) {
    throw CorpusError(path.string() + ": vocabulary does not start with the reserved tokens");
  }
  return Vocabulary(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(reserved.size()),
                                             lines.end()));
}

Vocabulary build_vocabulary(const std::vector<Table>& tables, const std::vector<Query>& queries,
                            std::size_t min_count) {
  if (tables.empty() && queries.empty()) throw CorpusError("cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  auto count = [&counts](std::string_view text) {
    for (std::string& w : split_words(text)) ++counts[std::move(w)];
  };
  for (const Table& t : tables) {
    count(t.title);
    for (const std::string& h : t.headers) count(h);
    for (const auto& row : t.cells) {
      for (const std::string& c : row) count(c);
    }
  }
  for (const Query& q : queries) count(q.text);

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [word, n] : counts) {
    if (n >= std::max<std::size_t>(min_count, 1)) kept.emplace_back(word, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, n] : kept) words.push_back(std::move(w));
  return Vocabulary(words);
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const std::string& w : split_words(text)) ids.push_back(vocab.index_of(w));
  return ids;
}

SerializedInput serialize_table(const Table& table, const Vocabulary& vocab, std::size_t max_len) {
  table.validate();
  std::vector<TokenId> title = tokenize(table.title, vocab);
  std::vector<std::vector<TokenId>> headers;
  std::size_t header_total = 0;
  for (const std::string& h : table.headers) {
    headers.push_back(tokenize(h, vocab));
    header_total += headers.back().size();
  }
  constexpr std::size_t kMarkers = 5;  // [CLS] [TTL] [HEAD] [CELL] [SEP]
  if (kMarkers + header_total > max_len) {
    throw CorpusError("table '" + table.id + "': title and headers need " +
                      std::to_string(kMarkers + title.size() + header_total) +
                      " tokens, max_len is " + std::to_string(max_len));
  }

  SerializedInput out;
  out.table_id = table.id;
  out.rows_total = table.rows();
  out.cols = table.cols();
  if (kMarkers + title.size() + header_total > max_len) {
    title.resize(max_len - kMarkers - header_total);
    out.title_truncated = true;
  }

  auto& tokens = out.tokens;
  tokens.push_back(Vocabulary::kCls);
  out.indicator_positions[0] = tokens.size();
  tokens.push_back(Vocabulary::kTtl);
  out.title_span.begin = tokens.size();
  tokens.insert(tokens.end(), title.begin(), title.end());
  out.title_span.end = tokens.size();
  out.indicator_positions[1] = tokens.size();
  tokens.push_back(Vocabulary::kHead);
  for (const auto& h : headers) {
    Span s{tokens.size(), 0};
    tokens.insert(tokens.end(), h.begin(), h.end());
    s.end = tokens.size();
    out.header_spans.push_back(s);
  }
  out.indicator_positions[2] = tokens.size();
  tokens.push_back(Vocabulary::kCell);

  // One slot is reserved for the closing [SEP].
  for (std::size_t r = 0; r < table.rows(); ++r) {
    std::vector<std::vector<TokenId>> row;
    std::size_t row_len = 0;
    for (const std::string& c : table.cells[r]) {
      row.push_back(tokenize(c, vocab));
      row_len += row.back().size();
    }
    if (tokens.size() + row_len + 1 > max_len) {
      out.rows_truncated = true;
      break;
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      CellSpan cs{r, c, Span{tokens.size(), 0}};
      tokens.insert(tokens.end(), row[c].begin(), row[c].end());
      cs.span.end = tokens.size();
      out.cell_spans.push_back(cs);
    }
    ++out.rows_kept;
  }
  tokens.push_back(Vocabulary::kSep);
  return out;
}

std::vector<TokenId> serialize_query(const Query& query, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenId> body = tokenize(query.text, vocab);
  if (max_len < 2) throw CorpusError("max_len must leave room for [CLS] and [SEP]");
  if (body.size() > max_len - 2) body.resize(max_len - 2);
  std::vector<TokenId> tokens;
  tokens.reserve(body.size() + 2);
  tokens.push_back(Vocabulary::kCls);
  tokens.insert(tokens.end(), body.begin(), body.end());
  tokens.push_back(Vocabulary::kSep);
  return tokens;
}

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      fn(json::parse(line));
    } catch (const std::exception& e) {
      throw CorpusError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<Table> load_tables(const std::filesystem::path& path) {
  std::vector<Table> tables;
  for_each_json_line(path, [&tables](const json& j) {
    Table t;
    t.id = j.at("id").get<std::string>();
    t.title = j.value("title", std::string());
    t.headers = j.at("headers").get<std::vector<std::string>>();
    t.cells = j.value("cells", std::vector<std::vector<std::string>>{});
    t.validate();
    tables.push_back(std::move(t));
  });
  return tables;
}

std::vector<Query> load_queries(const std::filesystem::path& path) {
  std::vector<Query> queries;
  for_each_json_line(path, [&queries](const json& j) {
    Query q{j.at("id").get<std::string>(), j.at("text").get<std::string>()};
    if (q.text.empty()) throw CorpusError("query '" + q.id + "' has empty text");
    queries.push_back(std::move(q));
  });
  return queries;
}

RelevanceJudgments load_judgments(const std::filesystem::path& path) {
  RelevanceJudgments judgments;
  for_each_json_line(path, [&judgments](const json& j) {
    auto ids = j.at("table_ids").get<std::vector<std::string>>();
    if (ids.empty()) throw CorpusError("judgment lists no relevant tables");
    judgments[j.at("query_id").get<std::string>()].insert(ids.begin(), ids.end());
  });
  return judgments;
}

void save_tables(const std::filesystem::path& path, const std::vector<Table>& tables) {
  auto out = open_for_write(path);
  for (const Table& t : tables) {
    out << json{{"id", t.id}, {"title", t.title}, {"headers", t.headers}, {"cells", t.cells}}.dump()
        << '\n';
  }
}

void save_queries(const std::filesystem::path& path, const std::vector<Query>& queries) {
  auto out = open_for_write(path);
  for (const Query& q : queries) out << json{{"id", q.id}, {"text", q.text}}.dump() << '\n';
}

void save_judgments(const std::filesystem::path& path, const RelevanceJudgments& judgments) {
  auto out = open_for_write(path);
  for (const auto& [qid, ids] : judgments) {
    out << json{{"query_id", qid}, {"table_ids", std::vector<std::string>(ids.begin(), ids.end())}}.dump()
        << '\n';
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.tables = load_tables(dir / "tables.jsonl");
  corpus.queries = load_queries(dir / "queries.jsonl");
  if (std::filesystem::exists(dir / "judgments.jsonl")) {
    corpus.judgments = load_judgments(dir / "judgments.jsonl");
  }
  corpus.validate();
  return corpus;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  save_tables(dir / "tables.jsonl", corpus.tables);
  save_queries(dir / "queries.jsonl", corpus.queries);
  save_judgments(dir / "judgments.jsonl", corpus.judgments);
}

}  // namespace thyme::corpus
