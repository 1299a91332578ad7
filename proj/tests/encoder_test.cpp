#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support/gradcheck.hpp"
#include "thyme/encoder.hpp"
#include "thyme/rng.hpp"

using namespace thyme;
using namespace thyme::encoder;

namespace {

EncoderConfig small_config(std::uint64_t seed = 1) {
  EncoderConfig c;
  c.hidden_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 16;
  c.max_positions = 12;
  c.vocab_size = 20;
  c.seed = seed;
  return c;
}

const std::vector<TokenId> kTokens{2, 9, 10, 11, 12, 3};

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS(c.validate());
  c = small_config();
  c.vocab_size = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("encode shape and determinism") {
  const auto c = small_config();
  const auto p = init_params(c);
  const auto h = encode(kTokens, p, c);
  CHECK(h.rows() == 6);
  CHECK(h.cols() == 8);
  CHECK(h.allFinite());
  CHECK(encode(kTokens, p, c) == h);
  CHECK(project_to_vocab(h, p).rows() == 6);
  CHECK(project_to_vocab(h, p).cols() == 20);
}

TEST_CASE("position embeddings make order matter") {
  const auto c = small_config();
  const auto p = init_params(c);
  auto swapped = kTokens;
  std::swap(swapped[1], swapped[2]);
  const auto a = encode(kTokens, p, c);
  const auto b = encode(swapped, p, c);
  CHECK_FALSE(a.row(0).isApprox(b.row(0)));
}

TEST_CASE("input errors") {
  const auto c = small_config();
  const auto p = init_params(c);
  CHECK_THROWS(encode(std::vector<TokenId>{}, p, c));
  CHECK_THROWS(encode(std::vector<TokenId>(13, 2), p, c));
  CHECK_THROWS(encode(std::vector<TokenId>{2, 20, 3}, p, c));
}

TEST_CASE("attention rows are distributions") {
  const auto c = small_config();
  const auto p = init_params(c);
  EncoderTrace trace;
  encode(kTokens, p, c, &trace);
  REQUIRE(trace.attention.size() == c.layers);
  for (const auto& layer : trace.attention) {
    REQUIRE(layer.size() == c.heads);
    for (const auto& a : layer) {
      for (Eigen::Index r = 0; r < a.rows(); ++r) CHECK(std::abs(a.row(r).sum() - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("hidden positions do not reach the other rows") {
  const auto c = small_config();
  const auto p = init_params(c);
  ad::Tape t1, t2;
  const HiddenPositions hidden{2, 3};
  auto other = kTokens;
  other[2] = 15;
  other[3] = 16;
  const auto a = encode(BoundParams(t1, p, false), c, kTokens, &hidden).value();
  const auto b = encode(BoundParams(t2, p, false), c, other, &hidden).value();
  CHECK(a.row(0) == b.row(0));
  CHECK(a.row(4) == b.row(4));
  CHECK_FALSE(a.row(2).isApprox(b.row(2)));
}

TEST_CASE("project_to_vocab is a shared affine map") {
  auto c = small_config();
  auto p = init_params(c);
  p["trans.w"].setZero();
  p["trans.b"].row(0).setLinSpaced(20, -1.0, 1.0);
  const auto w = project_to_vocab(encode(kTokens, p, c), p);
  for (Eigen::Index r = 0; r < w.rows(); ++r) CHECK(w.row(r) == p["trans.b"]);

  SUBCASE("identity map") {
    ParameterSet q;
    ad::Matrix id = ad::Matrix::Identity(2, 2);
    q.add("trans.w", id);
    q.add("trans.b", ad::Matrix::Zero(1, 2));
    ad::Matrix h(1, 2);
    h << 3, -1;
    const auto out = project_to_vocab(h, q);
    CHECK(out(0, 0) == 3.0);
    CHECK(out(0, 1) == -1.0);
  }
}

TEST_CASE("init is seeded and scaled") {
  const auto c = small_config(4);
  const auto a = init_params(c);
  CHECK(init_params(c) == a);
  CHECK_FALSE(init_params(small_config(5)) == a);
  CHECK(a.all_finite());
  const double bound = 1.0 / std::sqrt(8.0);
  CHECK(a["tok_emb"].cwiseAbs().maxCoeff() <= bound);
  CHECK(a["layer0.attn.wq"].cwiseAbs().maxCoeff() <= bound);
  CHECK(a["layer1.ffn.b1"].isZero());
  CHECK(a["ln_f.gain"].isOnes());
  CHECK(a["trans.w"].rows() == 8);
  CHECK(a["trans.w"].cols() == 20);
  CHECK(a["gate.w"].cols() == 1);
  CHECK_NOTHROW(validate_params(a, c));
}

TEST_CASE("flat view enumerates every scalar once") {
  const auto c = small_config();
  auto p = init_params(c);
  const auto flat = p.flatten();
  CHECK(flat.size() == p.scalar_count());
  std::vector<double> shifted(flat);
  for (double& x : shifted) x += 1.0;
  p.assign_flat(shifted);
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(p.flat(i) == flat[i] + 1.0);
}

TEST_CASE("checkpoint round trip and shape checks") {
  const auto dir = std::filesystem::temp_directory_path() / "thyme_encoder_ckpt";
  std::filesystem::create_directories(dir);
  const auto c = small_config(9);
  const auto p = init_params(c);
  save_checkpoint(dir / "model.json", c, p);
  const auto [c2, p2] = load_checkpoint(dir / "model.json");
  CHECK(c2 == c);
  CHECK(p2 == p);
  CHECK(p2.hash() == p.hash());

  auto wrong = small_config(9);
  wrong.hidden_dim = 4;
  wrong.heads = 2;
  CHECK_THROWS(validate_params(p, wrong));
  std::ofstream(dir / "broken.json") << "{\"format\": \"nope\"}";
  CHECK_THROWS(load_checkpoint(dir / "broken.json"));
}

TEST_CASE("encoder gradients match finite differences") {
  auto c = small_config(3);
  c.max_positions = 8;
  const auto p = init_params(c);
  const std::vector<TokenId> tokens{2, 7, 14, 9, 3};
  Rng rng(8);
  ad::Matrix weights(5, 20);
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.uniform(-1, 1);
  auto loss = [&](const ParameterSet& params, ParameterSet* grads) {
    ad::Tape tape;
    BoundParams bound(tape, params, grads != nullptr);
    const ad::Var logits = project_to_vocab(bound, encode(bound, c, tokens));
    const ad::Var l = ad::sum(ad::hadamard(logits, tape.constant(weights)));
    if (grads != nullptr) {
      tape.backward(l);
      *grads = bound.gradients();
    }
    return l.value()(0, 0);
  };
  ParameterSet grads;
  loss(p, &grads);
  // Key biases shift every score in a row equally, so their gradient is zero
  // and the central difference is pure rounding noise.
  auto is_key_bias = [](const std::string& name) { return name.ends_with("attn.bk"); };
  std::size_t skipped = 0;
  for (std::size_t t = 0; t < grads.tensor_count(); ++t) {
    if (!is_key_bias(grads.name(t))) continue;
    CHECK(grads.tensor(t).cwiseAbs().maxCoeff() < 1e-12);
    skipped += static_cast<std::size_t>(grads.tensor(t).size());
  }
  const auto r = gradcheck::compare(
      p, grads, [&](const ParameterSet& q) { return loss(q, nullptr); }, 1e-5, is_key_bias);
  INFO("worst " << r.worst_tensor << " analytic " << r.analytic << " numeric " << r.numeric);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.checked + skipped == p.scalar_count());
}
