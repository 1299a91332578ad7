// Command-line front end: corpus prep, training, indexing, search and
// evaluation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "thyme/corpus.hpp"
#include "thyme/encoder.hpp"
#include "thyme/harness.hpp"
#include "thyme/index.hpp"
#include "thyme/representation.hpp"
#include "thyme/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace thyme;

namespace {

struct PoolingFlags {
  std::string within = "table_specific";
  std::string across = "mofe";
  std::size_t k = 3;
  std::vector<std::string> drop_dense;
  std::vector<std::string> drop_sparse;
  bool set = false;

  void add_to(CLI::App* app) {
    app->add_option("--within", within, "within-field pooling: table_specific|max|mean")
        ->each([this](const std::string&) { set = true; });
    app->add_option("--across", across, "across-field aggregation: mofe|max|mean")
        ->each([this](const std::string&) { set = true; });
    app->add_option("--k", k, "fields kept by the MoFE gate")->each([this](const std::string&) { set = true; });
    app->add_option("--drop-dense", drop_dense, "fields hidden from the dense vector (title, headers, cells, body)")
        ->delimiter(',')
        ->each([this](const std::string&) { set = true; });
    app->add_option("--drop-sparse", drop_sparse, "fields left out of the sparse vector")
        ->delimiter(',')
        ->each([this](const std::string&) { set = true; });
  }

  static void apply_mask(std::array<bool, 3>& mask, const std::vector<std::string>& names) {
    for (const auto& n : names) {
      if (n == "body") {
        mask[1] = mask[2] = false;
      } else if (n == "title") {
        mask[0] = false;
      } else if (n == "headers") {
        mask[1] = false;
      } else if (n == "cells") {
        mask[2] = false;
      } else {
        throw std::invalid_argument("unknown field '" + n + "'");
      }
    }
  }

  representation::PoolingConfig build() const {
    representation::PoolingConfig p;
    p.within = representation::parse_within_field(within);
    p.across = representation::parse_across_field(across);
    p.k = k;
    apply_mask(p.mask.dense, drop_dense);
    apply_mask(p.mask.sparse, drop_sparse);
    p.validate();
    return p;
  }
};

struct TrainFlags {
  std::string config_path;
  std::optional<std::size_t> epochs, batch_size, hidden_dim, layers, heads, ffn_dim, max_len;
  std::optional<double> lr, lambda_q, lambda_t, p_sem, p_lex;
  bool verbose = false;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "training config JSON");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--lambda-q", lambda_q, "FLOPS weight on queries");
    app->add_option("--lambda-t", lambda_t, "FLOPS weight on tables");
    app->add_option("--p-sem", p_sem, "probability of a semantic-only step");
    app->add_option("--p-lex", p_lex, "probability of a lexical-only step");
    app->add_option("--hidden-dim", hidden_dim);
    app->add_option("--layers", layers);
    app->add_option("--heads", heads);
    app->add_option("--ffn-dim", ffn_dim);
    app->add_option("--max-len", max_len, "serialized input length limit");
    app->add_flag("-v,--verbose", verbose, "log per-epoch losses");
  }

  training::TrainConfig build(std::uint64_t seed, const PoolingFlags& pooling) const {
    training::TrainConfig c = config_path.empty() ? training::TrainConfig{} : training::load_train_config(config_path);
    c.seed = seed;
    c.encoder.seed = seed;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.learning_rate = *lr;
    if (lambda_q) c.lambda_q = *lambda_q;
    if (lambda_t) c.lambda_t = *lambda_t;
    if (p_sem) c.dropout.p_sem = *p_sem;
    if (p_lex) c.dropout.p_lex = *p_lex;
    if (hidden_dim) c.encoder.hidden_dim = *hidden_dim;
    if (layers) c.encoder.layers = *layers;
    if (heads) c.encoder.heads = *heads;
    if (ffn_dim) c.encoder.ffn_dim = *ffn_dim;
    if (max_len) c.max_len = *max_len;
    if (pooling.set || config_path.empty()) c.pooling = pooling.build();
    c.verbose = c.verbose || verbose;
    return c;
  }
};

struct Model {
  encoder::EncoderConfig config;
  encoder::ParameterSet params;
};

Model load_model(const std::string& path) {
  auto [config, params] = encoder::load_checkpoint(path);
  return {config, std::move(params)};
}

void write_json(const std::string& path, const json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

void print_results(const std::vector<index::RetrievalResult>& results) {
  std::cout << std::left << std::setw(6) << "rank" << std::setw(16) << "table" << std::right << std::setw(12)
            << "s_sem" << std::setw(12) << "s_lex" << std::setw(12) << "total" << '\n';
  for (const auto& r : results) {
    std::cout << std::left << std::setw(6) << r.rank << std::setw(16) << r.table_id << std::right << std::setw(12)
              << fmt(r.sem) << std::setw(12) << fmt(r.lex) << std::setw(12) << fmt(r.total) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"thyme: hybrid sparse + dense table retrieval"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "seed for every random draw")->capture_default_str();

  // build-vocab
  auto* vocab_cmd = app.add_subcommand("build-vocab", "build a vocabulary from a corpus directory");
  std::string corpus_dir, vocab_path, out_path;
  std::size_t min_count = 1;
  vocab_cmd->add_option("--corpus", corpus_dir, "directory with tables.jsonl and queries.jsonl")->required();
  vocab_cmd->add_option("--min-count", min_count)->capture_default_str();
  vocab_cmd->add_option("--out", out_path, "vocabulary file")->required();

  // gen-synth
  auto* synth_cmd = app.add_subcommand("gen-synth", "write a synthetic corpus");
  harness::SyntheticSpec synth;
  synth_cmd->add_option("--tables", synth.tables)->capture_default_str();
  synth_cmd->add_option("--min-rows", synth.min_rows)->capture_default_str();
  synth_cmd->add_option("--max-rows", synth.max_rows)->capture_default_str();
  synth_cmd->add_option("--min-cols", synth.min_cols)->capture_default_str();
  synth_cmd->add_option("--max-cols", synth.max_cols)->capture_default_str();
  synth_cmd->add_option("--vocab-size", synth.vocab_size)->capture_default_str();
  synth_cmd->add_option("--cell-queries", synth.cell_lookup_queries)->capture_default_str();
  synth_cmd->add_option("--title-queries", synth.title_paraphrase_queries)->capture_default_str();
  synth_cmd->add_option("--out", out_path, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train an encoder");
  TrainFlags train_flags;
  PoolingFlags pooling_flags;
  std::string loss_csv, save_config;
  train_cmd->add_option("--corpus", corpus_dir)->required();
  train_cmd->add_option("--vocab", vocab_path)->required();
  train_cmd->add_option("--out", out_path, "checkpoint path")->required();
  train_cmd->add_option("--loss-csv", loss_csv, "per-step loss curve");
  train_cmd->add_option("--save-config", save_config, "write the effective training config");
  train_flags.add_to(train_cmd);
  pooling_flags.add_to(train_cmd);

  // index
  auto* index_cmd = app.add_subcommand("index", "encode tables and write a hybrid index");
  std::string model_path, index_dir;
  std::size_t max_len = corpus::kDefaultMaxLen;
  index_cmd->add_option("--corpus", corpus_dir)->required();
  index_cmd->add_option("--vocab", vocab_path)->required();
  index_cmd->add_option("--model", model_path)->required();
  index_cmd->add_option("--out", index_dir)->required();
  index_cmd->add_option("--max-len", max_len)->capture_default_str();
  pooling_flags.add_to(index_cmd);

  // search
  auto* search_cmd = app.add_subcommand("search", "run one query against an index");
  std::string query_text, mode_name = "hybrid";
  std::size_t top_k = 10;
  search_cmd->add_option("--index", index_dir)->required();
  search_cmd->add_option("--vocab", vocab_path)->required();
  search_cmd->add_option("--model", model_path)->required();
  search_cmd->add_option("--query", query_text)->required();
  search_cmd->add_option("--top-k", top_k)->capture_default_str();
  search_cmd->add_option("--mode", mode_name, "hybrid|dense|sparse")->capture_default_str();

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "dump the sparse vector of a query or table");
  std::string table_id;
  std::size_t show = 20;
  inspect_cmd->add_option("--vocab", vocab_path)->required();
  inspect_cmd->add_option("--model", model_path)->required();
  inspect_cmd->add_option("--query", query_text);
  inspect_cmd->add_option("--corpus", corpus_dir, "needed with --table");
  inspect_cmd->add_option("--table", table_id);
  inspect_cmd->add_option("--max-len", max_len)->capture_default_str();
  inspect_cmd->add_option("--show", show, "number of terms to print (0 = all)")->capture_default_str();
  pooling_flags.add_to(inspect_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate an index on judged queries");
  std::string json_out;
  std::vector<std::string> modes;
  eval_cmd->add_option("--index", index_dir)->required();
  eval_cmd->add_option("--vocab", vocab_path)->required();
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--corpus", corpus_dir, "queries.jsonl + judgments.jsonl")->required();
  eval_cmd->add_option("--mode", modes, "one or more of hybrid, dense, sparse")->delimiter(',');
  eval_cmd->add_option("--json", json_out, "write reports as JSON");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate pooling or masking variants");
  std::string preset = "pooling", eval_dir;
  TrainFlags ablate_flags;
  PoolingFlags base_pooling;  // each variant replaces it
  ablate_cmd->add_option("--corpus", corpus_dir, "training corpus")->required();
  ablate_cmd->add_option("--eval-corpus", eval_dir, "evaluation corpus (default: training corpus)");
  ablate_cmd->add_option("--vocab", vocab_path)->required();
  ablate_cmd->add_option("--preset", preset, "pooling|masking")->capture_default_str();
  ablate_cmd->add_option("--mode", mode_name, "hybrid|dense|sparse")->capture_default_str();
  ablate_cmd->add_option("--json", json_out);
  ablate_flags.add_to(ablate_cmd);

  // bm25
  auto* bm25_cmd = app.add_subcommand("bm25", "BM25 baseline: one query, or evaluation with judgments");
  double k1 = 0.9, b = 0.4;
  bm25_cmd->add_option("--corpus", corpus_dir)->required();
  bm25_cmd->add_option("--query", query_text);
  bm25_cmd->add_option("--top-k", top_k)->capture_default_str();
  bm25_cmd->add_option("--k1", k1)->capture_default_str();
  bm25_cmd->add_option("--b", b)->capture_default_str();
  bm25_cmd->add_option("--json", json_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*vocab_cmd) {
      const auto c = corpus::load_corpus(corpus_dir);
      const auto vocab = corpus::build_vocabulary(c.tables, c.queries, min_count);
      vocab.save(out_path);
      std::cout << "vocabulary: " << vocab.size() << " tokens -> " << out_path << '\n';
    } else if (*synth_cmd) {
      synth.seed = seed;
      const auto s = harness::generate_synthetic(synth);
      corpus::save_corpus(out_path, s.corpus);
      json kinds = json::object();
      for (const auto& [id, kind] : s.kinds) kinds[id] = harness::to_string(kind);
      write_json((fs::path(out_path) / "query_kinds.json").string(), kinds);
      std::cout << "synthetic corpus: " << s.corpus.tables.size() << " tables, " << s.corpus.queries.size()
                << " queries -> " << out_path << '\n';
    } else if (*train_cmd) {
      const auto c = corpus::load_corpus(corpus_dir);
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      const auto config = train_flags.build(seed, pooling_flags);
      const auto result = training::train(c, vocab, config);
      encoder::save_checkpoint(out_path, result.config, result.params);
      if (!save_config.empty()) {
        auto saved = config;
        saved.encoder = result.config;
        training::save_train_config(save_config, saved);
      }
      if (!loss_csv.empty()) {
        std::ofstream out(loss_csv);
        training::write_loss_csv(out, result.curve);
      }
      const auto& last = result.epochs.back();
      std::cout << "trained " << config.epochs << " epochs, final l_rel=" << last.mean_rel
                << " l_all=" << last.mean_all << " -> " << out_path << '\n';
    } else if (*index_cmd) {
      const auto c = corpus::load_corpus(corpus_dir);
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      const auto model = load_model(model_path);
      const auto built =
          index::build_index(c.tables, vocab, model.params, model.config, pooling_flags.build(), max_len);
      built.save(index_dir);
      std::cout << "indexed " << built.size() << " tables, " << built.sparse().posting_count() << " postings -> "
                << index_dir << '\n';
    } else if (*search_cmd) {
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      const auto model = load_model(model_path);
      const auto idx = index::HybridIndex::load(index_dir, vocab, model.params);
      const index::Retriever retriever(vocab, model.params, idx);
      print_results(retriever.search({"query", query_text}, top_k, index::parse_search_mode(mode_name)));
    } else if (*inspect_cmd) {
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      const auto model = load_model(model_path);
      representation::SparseVector v;
      if (!table_id.empty()) {
        if (corpus_dir.empty()) throw std::invalid_argument("--table needs --corpus");
        const auto c = corpus::load_corpus(corpus_dir);
        const corpus::Table* t = c.find_table(table_id);
        if (t == nullptr) throw std::invalid_argument("unknown table '" + table_id + "'");
        const auto input = corpus::serialize_table(*t, vocab, std::min(max_len, model.config.max_positions));
        const auto repr = representation::table_repr(input, model.params, model.config, pooling_flags.build());
        v = repr.sparse;
        if (repr.gates) {
          std::cout << "# gates title=" << repr.gates->values[0] << " headers=" << repr.gates->values[1]
                    << " cells=" << repr.gates->values[2] << '\n';
        }
      } else if (!query_text.empty()) {
        v = representation::query_repr({"query", query_text}, vocab, model.params, model.config,
                                        std::min(max_len, model.config.max_positions))
                .sparse;
      } else {
        throw std::invalid_argument("inspect needs --query or --table");
      }
      std::cout << "# nnz=" << v.nnz() << '\n';
      std::istringstream lines(representation::dump_sparse(v, vocab));
      std::string line;
      for (std::size_t n = 0; std::getline(lines, line) && (show == 0 || n < show); ++n) std::cout << line << '\n';
    } else if (*eval_cmd) {
      const auto c = corpus::load_corpus(corpus_dir);
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      const auto model = load_model(model_path);
      const auto idx = index::HybridIndex::load(index_dir, vocab, model.params);
      const index::Retriever retriever(vocab, model.params, idx);
      if (modes.empty()) modes = {"hybrid", "dense", "sparse"};
      std::vector<std::pair<std::string, harness::EvalReport>> reports;
      json all = json::object();
      for (const auto& m : modes) {
        auto report = harness::evaluate(harness::make_ranker(retriever, index::parse_search_mode(m)), c.queries,
                                        c.judgments);
        report.config = json{{"mode", m}, {"index", index_dir}, {"model", model_path}};
        all[m] = report.to_json();
        reports.emplace_back(m, std::move(report));
      }
      std::cout << harness::format_reports(reports);
      if (!reports.empty() && !reports.front().second.skipped.empty()) {
        std::cerr << "warning: " << reports.front().second.skipped.size() << " queries without judgments skipped\n";
      }
      write_json(json_out, all);
    } else if (*ablate_cmd) {
      const auto train_corpus = corpus::load_corpus(corpus_dir);
      const auto eval_corpus = eval_dir.empty() ? train_corpus : corpus::load_corpus(eval_dir);
      const auto vocab = corpus::Vocabulary::load(vocab_path);
      harness::AblationSpec spec;
      spec.train = ablate_flags.build(seed, base_pooling);
      spec.mode = index::parse_search_mode(mode_name);
      if (preset == "pooling") {
        spec.configs = harness::pooling_variants();
      } else if (preset == "masking") {
        spec.configs = harness::masking_variants();
      } else {
        throw std::invalid_argument("unknown preset '" + preset + "'");
      }
      const auto rows = harness::run_ablation(spec, train_corpus, eval_corpus, vocab, [](const auto& row) {
        std::cerr << "done: " << row.label << (row.report ? "" : " (failed)") << '\n';
      });
      std::cout << harness::format_ablation(rows);
      write_json(json_out, harness::ablation_to_json(rows));
    } else if (*bm25_cmd) {
      const auto c = corpus::load_corpus(corpus_dir);
      const index::Bm25Index bm25(c.tables, k1, b);
      if (!query_text.empty()) {
        std::size_t rank = 0;
        for (const auto& [id, score] : bm25.search(query_text, top_k)) {
          std::cout << std::left << std::setw(6) << ++rank << std::setw(16) << id << fmt(score) << '\n';
        }
      } else {
        auto report = harness::evaluate(harness::make_ranker(bm25), c.queries, c.judgments);
        report.config = json{{"mode", "bm25"}, {"k1", k1}, {"b", b}};
        std::cout << harness::format_reports({{"bm25", report}});
        write_json(json_out, report.to_json());
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
