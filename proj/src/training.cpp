#include "thyme/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace thyme::training {

using nlohmann::json;

std::string to_string(Branch b) {
  switch (b) {
    case Branch::kSem: return "sem";
    case Branch::kLex: return "lex";
    case Branch::kBoth: return "both";
  }
  return "?";
}

double inner_product(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("inner_product: dimension " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double inner_product(const SparseVector& a, const SparseVector& b) {
  if (a.dim() != b.dim()) {
    throw std::invalid_argument("inner_product: sparse dimension " + std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()));
  }
  const SparseVector& small = a.nnz() <= b.nnz() ? a : b;
  const SparseVector& large = a.nnz() <= b.nnz() ? b : a;
  double s = 0.0;
  for (const auto& e : small.entries()) {
    const double w = large.get(e.index);
    if (w != 0.0) s += e.weight * w;
  }
  return s;
}

ScoreTriple score(const DenseVector& query_dense, const SparseVector& query_sparse, const DenseVector& table_dense,
                  const SparseVector& table_sparse) {
  ScoreTriple s;
  s.sem = inner_product(query_dense, table_dense);
  s.lex = inner_product(query_sparse, table_sparse);
  s.total = s.sem + s.lex;
  return s;
}

ScoreTriple score(const representation::QueryRepresentation& q, const representation::TableRepresentation& t) {
  return score(q.dense, q.sparse, t.dense, t.sparse);
}

void DropoutPolicy::validate() const {
  if (!(p_sem >= 0.0) || !(p_lex >= 0.0) || p_sem + p_lex > 1.0) {
    throw std::invalid_argument("dropout probabilities must be non-negative with p_sem + p_lex <= 1");
  }
}

Branch sample_branch(const DropoutPolicy& policy, Rng& rng) {
  const double u = rng.uniform();
  if (u < policy.p_sem) return Branch::kSem;
  if (u < policy.p_sem + policy.p_lex) return Branch::kLex;
  return Branch::kBoth;
}

double relevance_loss(const Matrix& scores) {
  if (scores.rows() != scores.cols() || scores.rows() < 2) {
    throw std::invalid_argument("relevance_loss needs a square score matrix with batch size >= 2");
  }
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (!std::isfinite(scores(i, j))) {
        throw TrainingError("non-finite score for query " + std::to_string(i) + ", table " + std::to_string(j));
      }
    }
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double m = scores.row(i).maxCoeff();
    const double lse = m + std::log((scores.row(i).array() - m).exp().sum());
    total += lse - scores(i, i);
  }
  return total / static_cast<double>(scores.rows());
}

double flops_penalty(std::span<const SparseVector> batch) {
  if (batch.empty()) throw std::invalid_argument("flops_penalty of an empty batch");
  const std::size_t dim = batch.front().dim();
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(dim));
  for (const SparseVector& v : batch) {
    if (v.dim() != dim) throw std::invalid_argument("flops_penalty: mixed dimensions");
    for (const auto& e : v.entries()) mean(e.index) += e.weight;
  }
  mean /= static_cast<double>(batch.size());
  return mean.squaredNorm();
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2 for in-batch negatives");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (lambda_q < 0.0 || lambda_t < 0.0) throw std::invalid_argument("FLOPS weights must be non-negative");
  if (max_len < 6) throw std::invalid_argument("max_len too small to serialize a table");
  dropout.validate();
  pooling.validate();
}

namespace {

json pooling_to_json(const PoolingConfig& p) {
  return json{{"within", representation::to_string(p.within)},
              {"across", representation::to_string(p.across)},
              {"k", p.k},
              {"dense_fields", p.mask.dense},
              {"sparse_fields", p.mask.sparse}};
}

PoolingConfig pooling_from_json(const json& j) {
  PoolingConfig p;
  p.within = representation::parse_within_field(j.value("within", std::string("table_specific")));
  p.across = representation::parse_across_field(j.value("across", std::string("mofe")));
  p.k = j.value("k", std::size_t{3});
  if (j.contains("dense_fields")) p.mask.dense = j.at("dense_fields").get<std::array<bool, 3>>();
  if (j.contains("sparse_fields")) p.mask.sparse = j.at("sparse_fields").get<std::array<bool, 3>>();
  return p;
}

}  // namespace

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read train config " + path.string());
  const json j = json::parse(in);
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.lambda_q = j.value("lambda_q", c.lambda_q);
  c.lambda_t = j.value("lambda_t", c.lambda_t);
  c.dropout.p_sem = j.value("p_sem", c.dropout.p_sem);
  c.dropout.p_lex = j.value("p_lex", c.dropout.p_lex);
  if (j.contains("pooling")) c.pooling = pooling_from_json(j.at("pooling"));
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.seed = j.value("seed", c.seed);
  c.max_len = j.value("max_len", c.max_len);
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    c.encoder.hidden_dim = e.value("hidden_dim", c.encoder.hidden_dim);
    c.encoder.layers = e.value("layers", c.encoder.layers);
    c.encoder.heads = e.value("heads", c.encoder.heads);
    c.encoder.ffn_dim = e.value("ffn_dim", c.encoder.ffn_dim);
    c.encoder.max_positions = e.value("max_positions", c.encoder.max_positions);
    c.encoder.vocab_size = e.value("vocab_size", c.encoder.vocab_size);
    c.encoder.seed = e.value("seed", c.encoder.seed);
  }
  c.verbose = j.value("verbose", c.verbose);
  c.validate();
  return c;
}

void save_train_config(const std::filesystem::path& path, const TrainConfig& c) {
  json j{{"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"epochs", c.epochs},
         {"lambda_q", c.lambda_q},
         {"lambda_t", c.lambda_t},
         {"p_sem", c.dropout.p_sem},
         {"p_lex", c.dropout.p_lex},
         {"pooling", pooling_to_json(c.pooling)},
         {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
         {"seed", c.seed},
         {"max_len", c.max_len},
         {"encoder",
          {{"hidden_dim", c.encoder.hidden_dim},
           {"layers", c.encoder.layers},
           {"heads", c.encoder.heads},
           {"ffn_dim", c.encoder.ffn_dim},
           {"max_positions", c.encoder.max_positions},
           {"vocab_size", c.encoder.vocab_size},
           {"seed", c.encoder.seed}}},
         {"verbose", c.verbose}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write train config " + path.string());
  out << j.dump(2) << '\n';
}

TrainingSet::TrainingSet(const corpus::Corpus& corpus, const corpus::Vocabulary& vocab, std::size_t max_len) {
  tables_.reserve(corpus.tables.size());
  for (const corpus::Table& t : corpus.tables) {
    table_index_.emplace(t.id, tables_.size());
    tables_.push_back(corpus::serialize_table(t, vocab, max_len));
  }
  for (const corpus::Query& q : corpus.queries) {
    auto it = corpus.judgments.find(q.id);
    if (it == corpus.judgments.end()) continue;
    Example ex;
    ex.query_id = q.id;
    if (corpus::tokenize(q.text, vocab).empty()) throw TrainingError("query '" + q.id + "' has no tokens");
    ex.query_tokens = corpus::serialize_query(q, vocab, max_len);
    for (const std::string& tid : it->second) {
      auto t = table_index_.find(tid);
      if (t == table_index_.end()) throw TrainingError("query '" + q.id + "' judged against unknown table '" + tid + "'");
      ex.positives.push_back(t->second);
    }
    examples_.push_back(std::move(ex));
  }
}

LossBreakdown compute_loss(const TrainingSet& data, const TrainingBatch& batch, const ParameterSet& params,
                           const TrainConfig& config, Branch branch, ParameterSet* gradients) {
  if (batch.size() < 2) throw std::invalid_argument("a training batch needs at least two pairs");
  ad::Tape tape;
  encoder::BoundParams bound(tape, params, gradients != nullptr);
  const EncoderConfig& enc = config.encoder;

  std::vector<ad::Var> q_dense, q_sparse, t_dense, t_sparse;
  for (const TrainingPair& pair : batch) {
    auto q = representation::query_repr(bound, enc, data.examples().at(pair.example).query_tokens);
    auto t = representation::table_repr(bound, enc, data.tables().at(pair.table), config.pooling);
    q_dense.push_back(q.dense);
    q_sparse.push_back(q.sparse);
    t_dense.push_back(t.dense);
    t_sparse.push_back(t.sparse);
  }
  ad::Var qd = ad::vconcat(q_dense);
  ad::Var ql = ad::vconcat(q_sparse);
  ad::Var td = ad::vconcat(t_dense);
  ad::Var tl = ad::vconcat(t_sparse);

  ad::Var scores;
  switch (branch) {
    case Branch::kSem: scores = ad::matmul_nt(qd, td); break;
    case Branch::kLex: scores = ad::matmul_nt(ql, tl); break;
    case Branch::kBoth: scores = ad::add(ad::matmul_nt(qd, td), ad::matmul_nt(ql, tl)); break;
  }
  const Matrix& s = scores.value();
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (!std::isfinite(s(i, j))) {
        throw TrainingError("non-finite score for query '" + data.examples()[batch[i].example].query_id +
                            "' and table '" + data.tables()[batch[j].table].table_id + "'");
      }
    }
  }

  ad::Var rel = ad::diagonal_cross_entropy(scores);
  ad::Var flops_q = ad::sum(ad::square(ad::mean_rows(ql)));
  ad::Var flops_t = ad::sum(ad::square(ad::mean_rows(tl)));
  ad::Var all = rel;
  if (branch == Branch::kLex) {
    all = ad::add(rel, ad::add(ad::scale(flops_q, config.lambda_q), ad::scale(flops_t, config.lambda_t)));
  }

  LossBreakdown loss;
  loss.branch = branch;
  loss.rel = rel.value()(0, 0);
  loss.flops_q = flops_q.value()(0, 0);
  loss.flops_t = flops_t.value()(0, 0);
  loss.all = all.value()(0, 0);
  if (gradients != nullptr) {
    tape.backward(all);
    *gradients = bound.gradients();
  }
  return loss;
}

AdamOptimizer::AdamOptimizer(const ParameterSet& shape, AdamConfig config, double learning_rate)
    : config_(config), lr_(learning_rate), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

void AdamOptimizer::step(ParameterSet& params, const ParameterSet& gradients) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    const auto g = gradients.tensor(i).array();
    auto m = m_.tensor(i).array();
    auto v = v_.tensor(i).array();
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.square();
    params.tensor(i).array() -= lr_ * (m / c1) / ((v / c2).sqrt() + config_.eps);
  }
}

LossBreakdown train_step(const TrainingSet& data, const TrainingBatch& batch, ParameterSet& params,
                         AdamOptimizer& optimizer, const TrainConfig& config, Branch branch) {
  ParameterSet grads;
  LossBreakdown loss = compute_loss(data, batch, params, config, branch, &grads);
  if (!std::isfinite(loss.all)) {
    std::ostringstream msg;
    msg << "loss diverged at optimizer step " << optimizer.steps() + 1 << " (branch " << to_string(branch)
        << "): l_rel=" << loss.rel << " l_flops_q=" << loss.flops_q << " l_flops_t=" << loss.flops_t;
    throw TrainingError(msg.str());
  }
  optimizer.step(params, grads);
  if (!params.all_finite()) throw TrainingError("parameters became non-finite after an optimizer step");
  return loss;
}

std::vector<TrainingBatch> make_batches(const TrainingSet& data, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(data.examples().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<TrainingPair> pending;
  pending.reserve(order.size());
  for (std::size_t ex : order) {
    const auto& positives = data.examples()[ex].positives;
    pending.push_back({ex, positives[rng.below(positives.size())]});
  }

  std::vector<TrainingBatch> batches;
  while (!pending.empty()) {
    TrainingBatch batch;
    std::vector<TrainingPair> deferred;
    for (const TrainingPair& p : pending) {
      const bool clash = std::any_of(batch.begin(), batch.end(), [&](const TrainingPair& b) { return b.table == p.table; });
      if (batch.size() < batch_size && !clash) {
        batch.push_back(p);
      } else {
        deferred.push_back(p);
      }
    }
    if (batch.size() < 2) break;
    batches.push_back(std::move(batch));
    pending = std::move(deferred);
  }
  return batches;
}

TrainResult train(const corpus::Corpus& corpus, const corpus::Vocabulary& vocab, const TrainConfig& config_in,
                  const EpochEvaluator& evaluator, const std::filesystem::path& checkpoint_path) {
  TrainConfig config = config_in;
  if (config.encoder.vocab_size == 0) config.encoder.vocab_size = vocab.size();
  if (config.encoder.vocab_size != vocab.size()) {
    throw std::invalid_argument("encoder vocab_size does not match the vocabulary");
  }
  if (config.encoder.max_positions < config.max_len) config.max_len = config.encoder.max_positions;
  config.validate();

  TrainingSet data(corpus, vocab, config.max_len);
  if (data.examples().size() < 2) throw TrainingError("training needs at least two judged queries");

  TrainResult result;
  result.config = config.encoder;
  result.params = encoder::init_params(config.encoder);
  result.best_params = result.params;
  AdamOptimizer optimizer(result.params, config.adam, config.learning_rate);
  Rng order_rng(config.seed);
  ScoreDropout dropout(config.dropout, config.seed ^ 0x9e3779b97f4a7c15ULL);

  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    const auto batches = make_batches(data, config.batch_size, order_rng);
    for (const TrainingBatch& batch : batches) {
      const Branch branch = dropout.sample();
      LossBreakdown loss = train_step(data, batch, result.params, optimizer, config, branch);
      result.curve.push_back({step++, epoch, loss});
      log.mean_rel += loss.rel;
      log.mean_all += loss.all;
    }
    if (!batches.empty()) {
      log.mean_rel /= static_cast<double>(batches.size());
      log.mean_all /= static_cast<double>(batches.size());
    }
    if (evaluator) log.metric = evaluator(epoch, result.params);
    const double current = log.metric ? *log.metric : -log.mean_rel;
    if (current > best_score) {
      best_score = current;
      result.best_params = result.params;
      result.best_epoch = epoch;
      if (!checkpoint_path.empty()) encoder::save_checkpoint(checkpoint_path, config.encoder, result.params);
    }
    if (config.verbose) {
      std::clog << "epoch " << epoch + 1 << "/" << config.epochs << " l_rel=" << log.mean_rel
                << " l_all=" << log.mean_all;
      if (log.metric) std::clog << " metric=" << *log.metric;
      std::clog << '\n';
    }
    result.epochs.push_back(log);
  }
  return result;
}

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& curve) {
  out << "step,branch,l_rel,l_flops_q,l_flops_t,l_all\n";
  out.precision(17);
  for (const LossRecord& r : curve) {
    out << r.step << ',' << to_string(r.loss.branch) << ',' << r.loss.rel << ',' << r.loss.flops_q << ','
        << r.loss.flops_t << ',' << r.loss.all << '\n';
  }
}

}  // namespace thyme::training
