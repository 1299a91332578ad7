#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "thyme/autodiff.hpp"
#include "thyme/corpus.hpp"

namespace thyme::encoder {

using ad::Matrix;
using corpus::TokenId;

struct EncoderConfig {
  std::size_t hidden_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_positions = 256;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on a zero dimension or hidden_dim % heads.
  void validate() const;
  std::size_t head_dim() const { return hidden_dim / heads; }

  bool operator==(const EncoderConfig&) const = default;
};

/// (sequence length x hidden_dim), one row per input token.
using HiddenStates = Matrix;
/// (sequence length x |V|).
using VocabLogits = Matrix;

/// Named, ordered parameter tensors. The flat view enumerates tensors in
/// insertion order and each tensor row-major.
class ParameterSet {
 public:
  void add(std::string name, Matrix value);

  std::size_t tensor_count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Matrix& tensor(std::size_t i) const { return tensors_.at(i); }
  Matrix& tensor(std::size_t i) { return tensors_.at(i); }
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;
  const Matrix& operator[](std::string_view name) const { return tensors_[index_of(name)]; }
  Matrix& operator[](std::string_view name) { return tensors_[index_of(name)]; }

  std::size_t scalar_count() const;
  double flat(std::size_t i) const;
  double& flat(std::size_t i);
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  bool all_finite() const;
  /// Same tensor names and shapes, all zero.
  ParameterSet zeros_like() const;
  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const;

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded init: matrices uniform in +-1/sqrt(d), biases zero, layer-norm
/// gains one.
ParameterSet init_params(const EncoderConfig& config);

/// Throws if a tensor is missing or has the wrong shape for `config`.
void validate_params(const ParameterSet& params, const EncoderConfig& config);

/// Parameter tensors registered on a tape, looked up by name.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable);

  ad::Var operator[](std::string_view name) const { return vars_[params_->index_of(name)]; }
  ad::Var var(std::size_t i) const { return vars_.at(i); }
  ad::Tape& tape() const { return *tape_; }
  const ParameterSet& params() const { return *params_; }

  /// Copies accumulated tape gradients into a ParameterSet-shaped container.
  ParameterSet gradients() const;

 private:
  ad::Tape* tape_;
  const ParameterSet* params_;
  std::vector<ad::Var> vars_;
};

/// Positions that no other position may attend to, in any layer. Rows
/// outside the set then never depend on the hidden tokens.
using HiddenPositions = std::vector<std::size_t>;

/// Attention probabilities per layer and head, for diagnostics.
struct EncoderTrace {
  std::vector<std::vector<Matrix>> attention;
};

/// Pre-LN bidirectional transformer with learned absolute positions.
/// Returns hidden states (len x d) on the tape.
ad::Var encode(const BoundParams& params, const EncoderConfig& config, std::span<const TokenId> tokens,
               const HiddenPositions* hidden = nullptr, EncoderTrace* trace = nullptr);

/// Shared affine map hidden -> vocabulary logits.
ad::Var project_to_vocab(const BoundParams& params, ad::Var hidden);

// Value-level conveniences (no gradient tracking).
HiddenStates encode(std::span<const TokenId> tokens, const ParameterSet& params, const EncoderConfig& config,
                    EncoderTrace* trace = nullptr);
VocabLogits project_to_vocab(const HiddenStates& hidden, const ParameterSet& params);

/// Parameter checkpoint: JSON with the config and every tensor's shape and
/// row-major values.
void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config,
                     const ParameterSet& params);
std::pair<EncoderConfig, ParameterSet> load_checkpoint(const std::filesystem::path& path);

}  // namespace thyme::encoder
