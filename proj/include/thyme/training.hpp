#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "thyme/corpus.hpp"
#include "thyme/encoder.hpp"
#include "thyme/representation.hpp"
#include "thyme/rng.hpp"

namespace thyme::training {

using ad::Matrix;
using encoder::EncoderConfig;
using encoder::ParameterSet;
using representation::DenseVector;
using representation::PoolingConfig;
using representation::SparseVector;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Which matching score drives a training step.
enum class Branch { kSem, kLex, kBoth };
std::string to_string(Branch b);

double inner_product(std::span<const double> a, std::span<const double> b);
/// Walks the smaller support and binary-searches the larger one.
double inner_product(const SparseVector& a, const SparseVector& b);

struct ScoreTriple {
  double sem = 0.0;
  double lex = 0.0;
  double total = 0.0;
};

/// Inference score: total = sem + lex.
ScoreTriple score(const DenseVector& query_dense, const SparseVector& query_sparse, const DenseVector& table_dense,
                  const SparseVector& table_sparse);
ScoreTriple score(const representation::QueryRepresentation& q, const representation::TableRepresentation& t);

struct DropoutPolicy {
  double p_sem = 0.15;
  double p_lex = 0.15;
  void validate() const;
};

Branch sample_branch(const DropoutPolicy& policy, Rng& rng);

/// Seeded stream of per-step branch draws.
class ScoreDropout {
 public:
  ScoreDropout(DropoutPolicy policy, std::uint64_t seed) : policy_(policy), rng_(seed) { policy_.validate(); }
  Branch sample() { return sample_branch(policy_, rng_); }

 private:
  DropoutPolicy policy_;
  Rng rng_;
};

/// In-batch softmax cross-entropy with the positives on the diagonal.
double relevance_loss(const Matrix& scores);
/// Sum over the vocabulary of the squared batch-mean weight.
double flops_penalty(std::span<const SparseVector> batch);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t epochs = 50;
  double lambda_q = 1e-4;
  double lambda_t = 1e-4;
  DropoutPolicy dropout;
  PoolingConfig pooling;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t max_len = corpus::kDefaultMaxLen;
  /// vocab_size == 0 means "take it from the vocabulary".
  EncoderConfig encoder;
  bool verbose = false;

  void validate() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const std::filesystem::path& path, const TrainConfig& config);

struct LossBreakdown {
  double rel = 0.0;
  double flops_q = 0.0;
  double flops_t = 0.0;
  double all = 0.0;
  Branch branch = Branch::kBoth;
};

/// Tokenized queries and serialized tables ready for training.
class TrainingSet {
 public:
  struct Example {
    std::string query_id;
    std::vector<corpus::TokenId> query_tokens;
    std::vector<std::size_t> positives;  // indices into tables()
  };

  TrainingSet(const corpus::Corpus& corpus, const corpus::Vocabulary& vocab, std::size_t max_len);

  const std::vector<Example>& examples() const { return examples_; }
  const std::vector<corpus::SerializedInput>& tables() const { return tables_; }
  std::size_t table_index(const std::string& id) const { return table_index_.at(id); }

 private:
  std::vector<Example> examples_;
  std::vector<corpus::SerializedInput> tables_;
  std::unordered_map<std::string, std::size_t> table_index_;
};

struct TrainingPair {
  std::size_t example = 0;
  std::size_t table = 0;
};

/// Pairs with distinct queries and distinct tables.
using TrainingBatch = std::vector<TrainingPair>;

/// Forward pass for one batch under `branch`. When `gradients` is non-null it
/// receives d(loss.all)/d(params).
LossBreakdown compute_loss(const TrainingSet& data, const TrainingBatch& batch, const ParameterSet& params,
                           const TrainConfig& config, Branch branch, ParameterSet* gradients = nullptr);

class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterSet& shape, AdamConfig config, double learning_rate);
  void step(ParameterSet& params, const ParameterSet& gradients);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  double lr_;
  std::size_t t_ = 0;
  ParameterSet m_;
  ParameterSet v_;
};

/// One gradient evaluation plus one optimizer update. Throws TrainingError
/// when the loss is not finite.
LossBreakdown train_step(const TrainingSet& data, const TrainingBatch& batch, ParameterSet& params,
                         AdamOptimizer& optimizer, const TrainConfig& config, Branch branch);

/// Shuffled epoch split into batches of distinct tables. A trailing batch
/// with fewer than two pairs is dropped.
std::vector<TrainingBatch> make_batches(const TrainingSet& data, std::size_t batch_size, Rng& rng);

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_rel = 0.0;
  double mean_all = 0.0;
  std::optional<double> metric;
};

struct TrainResult {
  EncoderConfig config;
  ParameterSet params;       // after the last epoch
  ParameterSet best_params;  // epoch with the best metric (or lowest mean loss)
  std::size_t best_epoch = 0;
  std::vector<LossRecord> curve;
  std::vector<EpochLog> epochs;
};

/// Returns a validation metric (higher is better) for the current params.
using EpochEvaluator = std::function<std::optional<double>(std::size_t epoch, const ParameterSet&)>;

TrainResult train(const corpus::Corpus& corpus, const corpus::Vocabulary& vocab, const TrainConfig& config,
                  const EpochEvaluator& evaluator = {},
                  const std::filesystem::path& checkpoint_path = {});

/// CSV: step,branch,l_rel,l_flops_q,l_flops_t,l_all
void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& curve);

}  // namespace thyme::training
