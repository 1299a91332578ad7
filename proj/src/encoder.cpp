#include "thyme/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "thyme/rng.hpp"

namespace thyme::encoder {

using nlohmann::json;

void EncoderConfig::validate() const {
  if (hidden_dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0 || max_positions == 0 ||
      vocab_size == 0) {
    throw std::invalid_argument("encoder config: every dimension must be >= 1");
  }
  if (hidden_dim % heads != 0) {
    throw std::invalid_argument("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                                " is not divisible by heads " + std::to_string(heads));
  }
}

void ParameterSet::add(std::string name, Matrix value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

bool ParameterSet::contains(std::string_view name) const { return index_.contains(std::string(name)); }

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const Matrix& t : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

double ParameterSet::flat(std::size_t i) const {
  for (const Matrix& t : tensors_) {
    const auto n = static_cast<std::size_t>(t.size());
    if (i < n) return t.data()[i];
    i -= n;
  }
  throw std::out_of_range("flat parameter index");
}

double& ParameterSet::flat(std::size_t i) {
  for (Matrix& t : tensors_) {
    const auto n = static_cast<std::size_t>(t.size());
    if (i < n) return t.data()[i];
    i -= n;
  }
  throw std::out_of_range("flat parameter index");
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const Matrix& t : tensors_) out.insert(out.end(), t.data(), t.data() + t.size());
  return out;
}

void ParameterSet::assign_flat(std::span<const double> values) {
  if (values.size() != scalar_count()) throw std::invalid_argument("flat parameter size mismatch");
  std::size_t at = 0;
  for (Matrix& t : tensors_) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), t.size(), t.data());
    at += static_cast<std::size_t>(t.size());
  }
}

bool ParameterSet::all_finite() const {
  for (const Matrix& t : tensors_) {
    if (!t.allFinite()) return false;
  }
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    out.add(names_[i], Matrix::Zero(tensors_[i].rows(), tensors_[i].cols()));
  }
  return out;
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    const std::int64_t shape[2] = {tensors_[i].rows(), tensors_[i].cols()};
    mix(shape, sizeof(shape));
    mix(tensors_[i].data(), sizeof(double) * static_cast<std::size_t>(tensors_[i].size()));
  }
  return h;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].rows() != other.tensors_[i].rows() || tensors_[i].cols() != other.tensors_[i].cols() ||
        tensors_[i] != other.tensors_[i]) {
      return false;
    }
  }
  return true;
}

namespace {

struct Shape {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  enum class Init { kUniform, kZero, kOne } init;
};

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

std::vector<Shape> expected_shapes(const EncoderConfig& c) {
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto f = static_cast<Eigen::Index>(c.ffn_dim);
  const auto v = static_cast<Eigen::Index>(c.vocab_size);
  using I = Shape::Init;
  std::vector<Shape> s;
  s.push_back({"tok_emb", v, d, I::kUniform});
  s.push_back({"pos_emb", static_cast<Eigen::Index>(c.max_positions), d, I::kUniform});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = layer_prefix(l);
    s.push_back({p + "ln1.gain", 1, d, I::kOne});
    s.push_back({p + "ln1.bias", 1, d, I::kZero});
    for (const char* m : {"wq", "wk", "wv", "wo"}) {
      s.push_back({p + "attn." + m, d, d, I::kUniform});
      s.push_back({p + "attn.b" + std::string(m + 1), 1, d, I::kZero});
    }
    s.push_back({p + "ln2.gain", 1, d, I::kOne});
    s.push_back({p + "ln2.bias", 1, d, I::kZero});
    s.push_back({p + "ffn.w1", d, f, I::kUniform});
    s.push_back({p + "ffn.b1", 1, f, I::kZero});
    s.push_back({p + "ffn.w2", f, d, I::kUniform});
    s.push_back({p + "ffn.b2", 1, d, I::kZero});
  }
  s.push_back({"ln_f.gain", 1, d, I::kOne});
  s.push_back({"ln_f.bias", 1, d, I::kZero});
  s.push_back({"trans.w", d, v, I::kUniform});
  s.push_back({"trans.b", 1, v, I::kZero});
  s.push_back({"gate.w", d, 1, I::kUniform});
  s.push_back({"gate.b", 1, 1, I::kZero});
  return s;
}

}  // namespace

ParameterSet init_params(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
  ParameterSet params;
  for (const Shape& s : expected_shapes(config)) {
    Matrix m(s.rows, s.cols);
    switch (s.init) {
      case Shape::Init::kUniform:
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
        break;
      case Shape::Init::kZero:
        m.setZero();
        break;
      case Shape::Init::kOne:
        m.setOnes();
        break;
    }
    params.add(s.name, std::move(m));
  }
  return params;
}

void validate_params(const ParameterSet& params, const EncoderConfig& config) {
  config.validate();
  const auto shapes = expected_shapes(config);
  if (params.tensor_count() != shapes.size()) {
    throw std::invalid_argument("parameter set has " + std::to_string(params.tensor_count()) +
                                " tensors, config expects " + std::to_string(shapes.size()));
  }
  for (const Shape& s : shapes) {
    if (!params.contains(s.name)) throw std::invalid_argument("missing parameter '" + s.name + "'");
    const Matrix& m = params[s.name];
    if (m.rows() != s.rows || m.cols() != s.cols) {
      throw std::invalid_argument("parameter '" + s.name + "' has shape " + std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) + ", expected " + std::to_string(s.rows) + "x" +
                                  std::to_string(s.cols));
    }
  }
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.tensor_count());
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    vars_.push_back(trainable ? tape.variable(params.tensor(i)) : tape.constant(params.tensor(i)));
  }
}

ParameterSet BoundParams::gradients() const {
  ParameterSet out;
  for (std::size_t i = 0; i < vars_.size(); ++i) out.add(params_->name(i), tape_->grad(vars_[i]));
  return out;
}

ad::Var encode(const BoundParams& p, const EncoderConfig& config, std::span<const TokenId> tokens,
               const HiddenPositions* hidden, EncoderTrace* trace) {
  const std::size_t len = tokens.size();
  if (len == 0) throw std::invalid_argument("encode: empty token sequence");
  if (len > config.max_positions) {
    throw std::invalid_argument("encode: sequence length " + std::to_string(len) + " exceeds max positions " +
                                std::to_string(config.max_positions));
  }
  std::vector<Eigen::Index> ids(len);
  for (std::size_t i = 0; i < len; ++i) {
    if (tokens[i] >= config.vocab_size) {
      throw std::invalid_argument("encode: token id " + std::to_string(tokens[i]) + " out of vocabulary");
    }
    ids[i] = static_cast<Eigen::Index>(tokens[i]);
  }
  const auto n = static_cast<Eigen::Index>(len);
  const auto dh = static_cast<Eigen::Index>(config.head_dim());
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::optional<Matrix> mask;
  if (hidden != nullptr && !hidden->empty()) {
    std::vector<bool> is_hidden(len, false);
    for (std::size_t pos : *hidden) {
      if (pos > 0 && pos < len) is_hidden[pos] = true;  // [CLS] is never hidden
    }
    mask = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (is_hidden[static_cast<std::size_t>(i)]) continue;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (is_hidden[static_cast<std::size_t>(j)]) (*mask)(i, j) = -std::numeric_limits<double>::infinity();
      }
    }
  }
  if (trace != nullptr) trace->attention.assign(config.layers, {});

  ad::Var x = ad::add(ad::gather_rows(p["tok_emb"], ids), ad::slice_rows(p["pos_emb"], 0, n));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    ad::Var h = ad::layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"]);
    ad::Var q = ad::add_row(ad::matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"]);
    ad::Var k = ad::add_row(ad::matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"]);
    ad::Var v = ad::add_row(ad::matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"]);
    std::vector<ad::Var> heads;
    heads.reserve(config.heads);
    for (std::size_t hd = 0; hd < config.heads; ++hd) {
      const auto c0 = static_cast<Eigen::Index>(hd) * dh;
      ad::Var scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, c0, dh), ad::slice_cols(k, c0, dh)), inv_sqrt_dh);
      ad::Var att = ad::softmax_rows(scores, mask ? &*mask : nullptr);
      if (trace != nullptr) trace->attention[l].push_back(att.value());
      heads.push_back(ad::matmul(att, ad::slice_cols(v, c0, dh)));
    }
    ad::Var attended = ad::add_row(ad::matmul(ad::hconcat(heads), p[pre + "attn.wo"]), p[pre + "attn.bo"]);
    x = ad::add(x, attended);

    ad::Var h2 = ad::layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"]);
    ad::Var f = ad::gelu(ad::add_row(ad::matmul(h2, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]));
    x = ad::add(x, ad::add_row(ad::matmul(f, p[pre + "ffn.w2"]), p[pre + "ffn.b2"]));
  }
  return ad::layer_norm(x, p["ln_f.gain"], p["ln_f.bias"]);
}

ad::Var project_to_vocab(const BoundParams& p, ad::Var hidden) {
  if (hidden.cols() != p.params()["trans.w"].rows()) {
    throw std::invalid_argument("project_to_vocab: hidden width does not match trans.w");
  }
  return ad::add_row(ad::matmul(hidden, p["trans.w"]), p["trans.b"]);
}

HiddenStates encode(std::span<const TokenId> tokens, const ParameterSet& params, const EncoderConfig& config,
                    EncoderTrace* trace) {
  ad::Tape tape;
  BoundParams bound(tape, params, false);
  return encode(bound, config, tokens, nullptr, trace).value();
}

VocabLogits project_to_vocab(const HiddenStates& hidden, const ParameterSet& params) {
  const Matrix& w = params["trans.w"];
  if (hidden.cols() != w.rows()) throw std::invalid_argument("project_to_vocab: hidden width does not match trans.w");
  VocabLogits out(hidden.rows(), w.cols());
  out.noalias() = hidden * w;
  out.rowwise() += params["trans.b"].row(0);
  return out;
}

namespace {

json config_to_json(const EncoderConfig& c) {
  return json{{"hidden_dim", c.hidden_dim}, {"layers", c.layers},
              {"heads", c.heads},           {"ffn_dim", c.ffn_dim},
              {"max_positions", c.max_positions}, {"vocab_size", c.vocab_size},
              {"seed", c.seed}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config, const ParameterSet& params) {
  validate_params(params, config);
  json tensors = json::array();
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    const Matrix& m = params.tensor(i);
    tensors.push_back({{"name", params.name(i)},
                       {"shape", {m.rows(), m.cols()}},
                       {"values", std::vector<double>(m.data(), m.data() + m.size())}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << json{{"format", "thyme-checkpoint-v1"}, {"config", config_to_json(config)}, {"tensors", tensors}}.dump();
}

std::pair<EncoderConfig, ParameterSet> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  json j = json::parse(in);
  if (j.value("format", std::string()) != "thyme-checkpoint-v1") {
    throw std::runtime_error(path.string() + ": not a thyme checkpoint");
  }
  EncoderConfig config = config_from_json(j.at("config"));
  ParameterSet params;
  for (const json& t : j.at("tensors")) {
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    const auto values = t.at("values").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
      throw std::runtime_error("checkpoint tensor '" + t.at("name").get<std::string>() + "' has wrong value count");
    }
    Matrix m(rows, cols);
    std::copy(values.begin(), values.end(), m.data());
    params.add(t.at("name").get<std::string>(), std::move(m));
  }
  validate_params(params, config);
  return {config, std::move(params)};
}

}  // namespace thyme::encoder
