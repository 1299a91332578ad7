#include "thyme/index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>


namespace thyme::index {

using nlohmann::json;

void InvertedIndex::add(DocId doc, const SparseVector& v) {
  if (v.dim() != lists_.size()) throw IndexError("sparse vector dimension does not match the index vocabulary");
  if (doc < doc_count_) throw IndexError("documents must be added in increasing order");
  for (const auto& e : v.entries()) lists_[e.index].push_back({doc, e.weight});
  doc_count_ = std::size_t(doc) + 1;
}

std::size_t InvertedIndex::posting_count() const {
  std::size_t n = 0;
  for (const auto& l : lists_) n += l.size();
  return n;
}

SparseVector InvertedIndex::reconstruct(DocId doc) const {
  std::vector<SparseVector::Entry> entries;
  for (std::size_t t = 0; t < lists_.size(); ++t) {
    const auto& l = lists_[t];
    auto it = std::lower_bound(l.begin(), l.end(), doc, [](const Posting& p, DocId d) { return p.doc < d; });
    if (it != l.end() && it->doc == doc) entries.push_back({static_cast<TokenId>(t), it->weight});
  }
  return SparseVector::from_entries(lists_.size(), std::move(entries));
}

std::vector<double> InvertedIndex::accumulate(const SparseVector& query, std::vector<DocId>* touched) const {
  if (query.dim() != lists_.size()) throw IndexError("query dimension does not match the index vocabulary");
  std::vector<double> acc(doc_count_, 0.0);
  std::vector<char> seen(touched != nullptr ? doc_count_ : 0, 0);
  for (const auto& e : query.entries()) {
    for (const Posting& p : lists_[e.index]) {
      acc[p.doc] += e.weight * p.weight;
      if (touched != nullptr && !seen[p.doc]) {
        seen[p.doc] = 1;
        touched->push_back(p.doc);
      }
    }
  }
  return acc;
}

void DenseStore::add(std::span<const double> v) {
  if (v.size() != dim_) {
    throw IndexError("dense vector has dimension " + std::to_string(v.size()) + ", store expects " +
                     std::to_string(dim_));
  }
  for (double x : v) data_.push_back(static_cast<float>(x));
}

double DenseStore::dot(DocId doc, std::span<const double> query) const {
  const auto r = row(doc);
  double s = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) s += query[i] * static_cast<double>(r[i]);
  return s;
}

namespace {

bool better(double sa, DocId da, double sb, DocId db) { return sa != sb ? sa > sb : da < db; }

}  // namespace

void top_k_in_place(std::vector<ScoredDoc>& docs, std::size_t k) {
  auto cmp = [](const ScoredDoc& a, const ScoredDoc& b) { return better(a.score, a.doc, b.score, b.doc); };
  if (docs.size() > k) {
    std::partial_sort(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(k), docs.end(), cmp);
    docs.resize(k);
  } else {
    std::sort(docs.begin(), docs.end(), cmp);
  }
}

namespace {

void check_top_k(std::size_t top_k) {
  if (top_k == 0) throw IndexError("top_k must be positive");
}

void sort_fused(std::vector<FusedDoc>& docs, std::size_t k) {
  auto cmp = [](const FusedDoc& a, const FusedDoc& b) { return better(a.total, a.doc, b.total, b.doc); };
  if (docs.size() > k) {
    std::partial_sort(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(k), docs.end(), cmp);
    docs.resize(k);
  } else {
    std::sort(docs.begin(), docs.end(), cmp);
  }
}

}  // namespace

std::vector<ScoredDoc> search_sparse(const SparseVector& query, const InvertedIndex& index, std::size_t top_k) {
  check_top_k(top_k);
  std::vector<DocId> touched;
  const auto acc = index.accumulate(query, &touched);
  std::vector<ScoredDoc> docs;
  docs.reserve(touched.size());
  for (DocId d : touched) docs.push_back({d, acc[d]});
  top_k_in_place(docs, top_k);
  return docs;
}

std::vector<ScoredDoc> search_dense(std::span<const double> query, const DenseStore& store, std::size_t top_k) {
  check_top_k(top_k);
  if (query.size() != store.dim()) {
    throw IndexError("dense query has dimension " + std::to_string(query.size()) + ", store has " +
                     std::to_string(store.dim()));
  }
  std::vector<ScoredDoc> docs(store.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    docs[d] = {static_cast<DocId>(d), store.dot(static_cast<DocId>(d), query)};
  }
  top_k_in_place(docs, top_k);
  return docs;
}

std::vector<FusedDoc> search_hybrid(std::span<const double> query_dense, const SparseVector& query_sparse,
                                    const InvertedIndex& index, const DenseStore& store, std::size_t top_k,
                                    const HybridSearchOptions& options) {
  check_top_k(top_k);
  if (index.doc_count() != store.size()) {
    throw IndexError("sparse index covers " + std::to_string(index.doc_count()) + " tables, dense store " +
                     std::to_string(store.size()));
  }
  if (query_dense.size() != store.dim()) throw IndexError("dense query dimension mismatch");
  const std::size_t n = store.size();
  const auto lex = index.accumulate(query_sparse);

  if (n < options.full_scan_below) {
    std::vector<FusedDoc> docs(n);
    for (std::size_t d = 0; d < n; ++d) {
      const double sem = store.dot(static_cast<DocId>(d), query_dense);
      docs[d] = {static_cast<DocId>(d), sem, lex[d], sem + lex[d]};
    }
    sort_fused(docs, top_k);
    return docs;
  }

  // Candidate growth: any table outside both branch lists scores at most the
  // sum of the two lists' last scores.
  std::size_t depth = std::max<std::size_t>(1, options.initial_factor) * top_k;
  while (true) {
    depth = std::min(depth, n);
    const auto sparse_top = search_sparse(query_sparse, index, depth);
    const auto dense_top = search_dense(query_dense, store, depth);
    std::set<DocId> candidates;
    for (const auto& d : sparse_top) candidates.insert(d.doc);
    for (const auto& d : dense_top) candidates.insert(d.doc);
    std::vector<FusedDoc> docs;
    docs.reserve(candidates.size());
    for (DocId d : candidates) {
      const double sem = store.dot(d, query_dense);
      docs.push_back({d, sem, lex[d], sem + lex[d]});
    }
    sort_fused(docs, top_k);
    if (depth >= n) return docs;
    const double lex_bound = sparse_top.size() < depth ? 0.0 : sparse_top.back().score;
    const double bound = lex_bound + dense_top.back().score;
    if (docs.size() >= top_k && docs.back().total > bound) return docs;
    depth *= 2;
  }
}

HybridIndex::HybridIndex(IndexManifest manifest, std::vector<std::string> table_ids, InvertedIndex sparse,
                         DenseStore dense)
    : manifest_(std::move(manifest)),
      table_ids_(std::move(table_ids)),
      sparse_(std::move(sparse)),
      dense_(std::move(dense)) {
  if (sparse_.doc_count() > table_ids_.size() || dense_.size() != table_ids_.size()) {
    throw IndexError("index structures do not cover the same table set");
  }
  sparse_.doc_count_ = table_ids_.size();
  for (std::size_t i = 0; i < table_ids_.size(); ++i) {
    if (!doc_of_.emplace(table_ids_[i], static_cast<DocId>(i)).second) {
      throw IndexError("duplicate table id '" + table_ids_[i] + "'");
    }
    if (i > 0 && !(table_ids_[i - 1] < table_ids_[i])) throw IndexError("table ids must be sorted");
  }
}

DocId HybridIndex::doc_of(const std::string& table_id) const {
  auto it = doc_of_.find(table_id);
  if (it == doc_of_.end()) throw IndexError("unknown table id '" + table_id + "'");
  return it->second;
}

std::vector<RetrievalResult> HybridIndex::search(std::span<const double> query_dense,
                                                 const SparseVector& query_sparse, std::size_t top_k,
                                                 const HybridSearchOptions& options) const {
  const auto fused = search_hybrid(query_dense, query_sparse, sparse_, dense_, top_k, options);
  std::vector<RetrievalResult> out;
  out.reserve(fused.size());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    out.push_back({table_ids_[fused[i].doc], fused[i].sem, fused[i].lex, fused[i].total, i + 1});
  }
  return out;
}

namespace {

constexpr char kPostingsMagic[4] = {'T', 'H', 'Y', 'P'};
constexpr char kDenseMagic[4] = {'T', 'H', 'Y', 'D'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IndexError("truncated index file");
  return v;
}

void put_varint(std::ostream& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.put(static_cast<char>((v & 0x7f) | 0x80));
    v >>= 7;
  }
  out.put(static_cast<char>(v));
}

std::uint64_t get_varint(std::istream& in) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const int c = in.get();
    if (c == EOF) throw IndexError("truncated varint in postings file");
    v |= std::uint64_t(c & 0x7f) << shift;
    if ((c & 0x80) == 0) return v;
  }
  throw IndexError("malformed varint in postings file");
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

void HybridIndex::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto& m = manifest_;
  json manifest{
      {"format", "thyme-index-v1"},
      {"vocab_hash", hex64(m.vocab_hash)},
      {"vocab_size", m.vocab_size},
      {"params_hash", hex64(m.params_hash)},
      {"dim", dense_.dim()},
      {"max_len", m.max_len},
      {"encoder",
       {{"hidden_dim", m.encoder.hidden_dim},
        {"layers", m.encoder.layers},
        {"heads", m.encoder.heads},
        {"ffn_dim", m.encoder.ffn_dim},
        {"max_positions", m.encoder.max_positions},
        {"vocab_size", m.encoder.vocab_size},
        {"seed", m.encoder.seed}}},
      {"pooling",
       {{"within", representation::to_string(m.pooling.within)},
        {"across", representation::to_string(m.pooling.across)},
        {"k", m.pooling.k},
        {"dense_fields", m.pooling.mask.dense},
        {"sparse_fields", m.pooling.mask.sparse}}},
      {"table_ids", table_ids_}};
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw IndexError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "postings.bin", std::ios::binary);
    if (!out) throw IndexError("cannot write postings file");
    out.write(kPostingsMagic, 4);
    put(out, kFormatVersion);
    put(out, std::uint64_t(sparse_.vocab_size()));
    put(out, std::uint64_t(sparse_.doc_count()));
    std::uint64_t nonempty = 0;
    for (const auto& l : sparse_.lists_) nonempty += l.empty() ? 0 : 1;
    put(out, nonempty);
    for (std::size_t t = 0; t < sparse_.lists_.size(); ++t) {
      const auto& l = sparse_.lists_[t];
      if (l.empty()) continue;
      put(out, std::uint32_t(t));
      put(out, std::uint32_t(l.size()));
      DocId prev = 0;
      for (const Posting& p : l) {
        put_varint(out, p.doc - prev);
        prev = p.doc;
      }
      for (const Posting& p : l) put(out, p.weight);
    }
  }
  {
    std::ofstream out(dir / "dense.bin", std::ios::binary);
    if (!out) throw IndexError("cannot write dense file");
    out.write(kDenseMagic, 4);
    put(out, kFormatVersion);
    put(out, std::uint64_t(dense_.size()));
    put(out, std::uint64_t(dense_.dim()));
    out.write(reinterpret_cast<const char*>(dense_.data_.data()),
              static_cast<std::streamsize>(dense_.data_.size() * sizeof(float)));
  }
}

IndexManifest HybridIndex::read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IndexError("cannot read " + (dir / "manifest.json").string());
  const json j = json::parse(in);
  if (j.value("format", std::string()) != "thyme-index-v1") throw IndexError("not a thyme index: " + dir.string());
  IndexManifest m;
  m.vocab_hash = parse_hex64(j.at("vocab_hash").get<std::string>());
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.params_hash = parse_hex64(j.at("params_hash").get<std::string>());
  m.max_len = j.at("max_len").get<std::size_t>();
  const json& e = j.at("encoder");
  m.encoder.hidden_dim = e.at("hidden_dim").get<std::size_t>();
  m.encoder.layers = e.at("layers").get<std::size_t>();
  m.encoder.heads = e.at("heads").get<std::size_t>();
  m.encoder.ffn_dim = e.at("ffn_dim").get<std::size_t>();
  m.encoder.max_positions = e.at("max_positions").get<std::size_t>();
  m.encoder.vocab_size = e.at("vocab_size").get<std::size_t>();
  m.encoder.seed = e.at("seed").get<std::uint64_t>();
  const json& p = j.at("pooling");
  m.pooling.within = representation::parse_within_field(p.at("within").get<std::string>());
  m.pooling.across = representation::parse_across_field(p.at("across").get<std::string>());
  m.pooling.k = p.at("k").get<std::size_t>();
  m.pooling.mask.dense = p.at("dense_fields").get<std::array<bool, 3>>();
  m.pooling.mask.sparse = p.at("sparse_fields").get<std::array<bool, 3>>();
  return m;
}

HybridIndex HybridIndex::load(const std::filesystem::path& dir, const corpus::Vocabulary& vocab,
                              const encoder::ParameterSet& params) {
  IndexManifest m = read_manifest(dir);
  if (m.vocab_hash != vocab.hash() || m.vocab_size != vocab.size()) {
    throw IndexError("index " + dir.string() + " was built with a different vocabulary");
  }
  if (m.params_hash != params.hash()) {
    throw IndexError("index " + dir.string() + " was built with different model parameters");
  }
  std::vector<std::string> ids;
  {
    std::ifstream in(dir / "manifest.json");
    ids = json::parse(in).at("table_ids").get<std::vector<std::string>>();
  }

  InvertedIndex sparse;
  {
    std::ifstream in(dir / "postings.bin", std::ios::binary);
    if (!in) throw IndexError("cannot read postings file");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kPostingsMagic, 4) != 0) throw IndexError("bad postings file magic");
    if (get<std::uint32_t>(in) != kFormatVersion) throw IndexError("unsupported postings format version");
    const auto vocab_size = get<std::uint64_t>(in);
    const auto docs = get<std::uint64_t>(in);
    if (vocab_size != vocab.size() || docs != ids.size()) throw IndexError("postings file does not match manifest");
    sparse = InvertedIndex(vocab_size);
    const auto lists = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < lists; ++i) {
      const auto token = get<std::uint32_t>(in);
      const auto count = get<std::uint32_t>(in);
      if (token >= vocab_size) throw IndexError("postings token out of range");
      auto& l = sparse.lists_[token];
      l.resize(count);
      DocId prev = 0;
      for (auto& p : l) {
        prev += static_cast<DocId>(get_varint(in));
        if (prev >= docs) throw IndexError("posting references a missing table");
        p.doc = prev;
      }
      for (auto& p : l) p.weight = get<double>(in);
    }
  }
  DenseStore dense;
  {
    std::ifstream in(dir / "dense.bin", std::ios::binary);
    if (!in) throw IndexError("cannot read dense file");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kDenseMagic, 4) != 0) throw IndexError("bad dense file magic");
    if (get<std::uint32_t>(in) != kFormatVersion) throw IndexError("unsupported dense format version");
    const auto rows = get<std::uint64_t>(in);
    const auto dim = get<std::uint64_t>(in);
    if (rows != ids.size() || dim != m.encoder.hidden_dim) throw IndexError("dense file does not match manifest");
    dense = DenseStore(dim);
    dense.data_.resize(rows * dim);
    in.read(reinterpret_cast<char*>(dense.data_.data()), static_cast<std::streamsize>(rows * dim * sizeof(float)));
    if (!in) throw IndexError("truncated dense file");
  }
  return HybridIndex(std::move(m), std::move(ids), std::move(sparse), std::move(dense));
}

HybridIndex build_index(const std::vector<corpus::Table>& tables, const corpus::Vocabulary& vocab,
                        const encoder::ParameterSet& params, const encoder::EncoderConfig& config,
                        const PoolingConfig& pooling, std::size_t max_len) {
  encoder::validate_params(params, config);
  if (config.vocab_size != vocab.size()) throw IndexError("model vocabulary size does not match the vocabulary");
  max_len = std::min(max_len, config.max_positions);

  std::vector<const corpus::Table*> order;
  order.reserve(tables.size());
  for (const auto& t : tables) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i - 1]->id == order[i]->id) throw IndexError("duplicate table id '" + order[i]->id + "'");
  }

  InvertedIndex sparse(vocab.size());
  DenseStore dense(config.hidden_dim);
  std::vector<std::string> ids;
  ids.reserve(order.size());
  for (std::size_t d = 0; d < order.size(); ++d) {
    const auto input = corpus::serialize_table(*order[d], vocab, max_len);
    const auto repr = representation::table_repr(input, params, config, pooling);
    sparse.add(static_cast<DocId>(d), repr.sparse);
    dense.add(repr.dense);
    ids.push_back(order[d]->id);
  }
  IndexManifest m{vocab.hash(), vocab.size(), params.hash(), config, pooling, max_len};
  return HybridIndex(std::move(m), std::move(ids), std::move(sparse), std::move(dense));
}

std::string to_string(SearchMode mode) {
  switch (mode) {
    case SearchMode::kHybrid: return "hybrid";
    case SearchMode::kDense: return "dense";
    case SearchMode::kSparse: return "sparse";
  }
  return "?";
}

SearchMode parse_search_mode(const std::string& s) {
  if (s == "hybrid") return SearchMode::kHybrid;
  if (s == "dense") return SearchMode::kDense;
  if (s == "sparse") return SearchMode::kSparse;
  throw std::invalid_argument("unknown search mode '" + s + "'");
}

Retriever::Retriever(const corpus::Vocabulary& vocab, const encoder::ParameterSet& params, const HybridIndex& index)
    : vocab_(&vocab), params_(&params), index_(&index) {
  if (index.manifest().vocab_hash != vocab.hash()) throw IndexError("retriever vocabulary does not match the index");
  if (index.manifest().params_hash != params.hash()) throw IndexError("retriever parameters do not match the index");
}

std::vector<RetrievalResult> Retriever::search(const corpus::Query& query, std::size_t top_k, SearchMode mode) const {
  const auto& m = index_->manifest();
  const auto q = representation::query_repr(query, *vocab_, *params_, m.encoder, m.max_len);
  if (mode == SearchMode::kHybrid) return index_->search(q.dense, q.sparse, top_k);
  const auto docs = mode == SearchMode::kDense ? search_dense(q.dense, index_->dense(), top_k)
                                               : search_sparse(q.sparse, index_->sparse(), top_k);
  std::vector<RetrievalResult> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    RetrievalResult r{index_->table_id(docs[i].doc), 0.0, 0.0, docs[i].score, i + 1};
    (mode == SearchMode::kDense ? r.sem : r.lex) = docs[i].score;
    out.push_back(std::move(r));
  }
  return out;
}

Bm25Index::Bm25Index(const std::vector<corpus::Table>& tables, double k1, double b) : k1_(k1), b_(b) {
  std::vector<const corpus::Table*> order;
  for (const auto& t : tables) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* c) { return a->id < c->id; });
  double total = 0.0;
  for (std::size_t d = 0; d < order.size(); ++d) {
    const corpus::Table& t = *order[d];
    std::unordered_map<std::string, double> tf;
    double len = 0.0;
    auto add = [&](const std::string& text) {
      for (auto& w : corpus::split_words(text)) {
        tf[std::move(w)] += 1.0;
        len += 1.0;
      }
    };
    add(t.title);
    for (const auto& h : t.headers) add(h);
    for (const auto& row : t.cells) {
      for (const auto& c : row) add(c);
    }
    for (auto& [term, f] : tf) postings_[term].push_back({static_cast<DocId>(d), f});
    ids_.push_back(t.id);
    lengths_.push_back(len);
    total += len;
  }
  avg_length_ = ids_.empty() ? 0.0 : total / static_cast<double>(ids_.size());
}

std::vector<std::pair<std::string, double>> Bm25Index::search(std::string_view query, std::size_t top_k) const {
  check_top_k(top_k);
  auto words = corpus::split_words(query);
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());

  const double n = static_cast<double>(ids_.size());
  std::vector<double> acc(ids_.size(), 0.0);
  std::vector<char> hit(ids_.size(), 0);
  for (const auto& w : words) {
    auto it = postings_.find(w);
    if (it == postings_.end()) continue;
    const double df = static_cast<double>(it->second.size());
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    for (const auto& [doc, tf] : it->second) {
      const double norm = k1_ * (1.0 - b_ + b_ * lengths_[doc] / avg_length_);
      acc[doc] += idf * tf * (k1_ + 1.0) / (tf + norm);
      hit[doc] = 1;
    }
  }
  std::vector<ScoredDoc> docs;
  for (std::size_t d = 0; d < acc.size(); ++d) {
    if (hit[d] && acc[d] > 0.0) docs.push_back({static_cast<DocId>(d), acc[d]});
  }
  top_k_in_place(docs, top_k);
  std::vector<std::pair<std::string, double>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.emplace_back(ids_[d.doc], d.score);
  return out;
}

}  // namespace thyme::index
