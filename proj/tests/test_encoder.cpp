#include <gtest/gtest.h>

#include "cmlmcse/encoder.hpp"
#include "support.hpp"

using namespace cmlmcse;

namespace {

EncoderConfig small_config(double dropout = 0.1) {
  EncoderConfig c;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.dropout_p = dropout;
  return c;
}

std::vector<TokenSeq> batch_of(Rng& rng, std::size_t n, const EncoderConfig& c) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen::token_seq(rng, c.max_seq_len, c.vocab_size, gen::between(rng, 1, c.max_seq_len - 1)));
  return out;
}

bool params_equal(EncoderParams<float>& a, EncoderParams<float>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bit_equal(pa[i]->value, pb[i]->value)) return false;
  return true;
}

}  // namespace

TEST(Init, SameSeedIsBitIdentical) {
  Rng r1 = make_stream(1, "init"), r2 = make_stream(1, "init");
  auto a = init_params<float>(small_config(), r1), b = init_params<float>(small_config(), r2);
  EXPECT_TRUE(params_equal(a, b));
}

TEST(Init, DifferentSeedDiffers) {
  Rng r1 = make_stream(1, "init"), r2 = make_stream(2, "init");
  auto a = init_params<float>(small_config(), r1), b = init_params<float>(small_config(), r2);
  EXPECT_FALSE(params_equal(a, b));
}

TEST(Init, FollowsDistributionContract) {
  Rng rng = make_stream(3, "init");
  auto p = init_params<float>(small_config(), rng);
  for (float v : p.blocks[0].wq.value.values()) EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
  for (float v : p.blocks[1].ff_b1.value.values()) EXPECT_EQ(v, 0.0f);
  for (float v : p.blocks[1].ff_ln_gain.value.values()) EXPECT_EQ(v, 1.0f);
  double var = 0;
  const auto& w = p.embeddings.token.value;
  for (float v : w.values()) var += double(v) * v;
  // Normal(0, 0.02) truncated at 2 sd has sd ~0.0176.
  EXPECT_NEAR(std::sqrt(var / w.numel()), 0.0176, 0.002);
}

TEST(Init, ParameterCountMatchesHandCount) {
  EncoderConfig c;
  c.vocab_size = 10;
  c.max_seq_len = 6;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 16;
  // embeddings 10*8 + 6*8 + 8 + 8 = 144
  // block: q,k,v,o 4*(64+8) = 288, two LNs 32, ffn 8*16+16 + 16*8+8 = 280 -> 600
  // head 8*10 + 10 = 90
  const std::size_t hand = 144 + 2 * 600 + 90;
  EXPECT_EQ(encoder_parameter_count(c), hand);
  Rng rng(0);
  auto p = init_params<float>(c, rng);
  std::size_t total = 0;
  for (auto* q : p.parameters()) total += q->value.numel();
  EXPECT_EQ(total, hand);
}

TEST(Init, RejectsInvalidConfig) {
  EncoderConfig c = small_config();
  c.n_heads = 3;
  Rng rng(0);
  EXPECT_THROW(init_params<float>(c, rng), ConfigError);
  c = small_config(1.0);
  EXPECT_THROW(init_params<float>(c, rng), ConfigError);
}

TEST(EncodeBatch, NoDropoutTrainPassesAreBitIdentical) {
  Rng rng = make_stream(4, "enc");
  auto p = init_params<float>(small_config(0.0), rng);
  const auto batch = batch_of(rng, 3, p.config);
  Rng s1 = make_stream(1, "a"), s2 = make_stream(2, "b");
  Graph<float> g;
  auto h1 = encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::train(s1));
  auto h2 = encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::train(s2));
  EXPECT_TRUE(bit_equal(h1.value(), h2.value()));
}

TEST(EncodeBatch, DistinctDropoutDrawsDiffer) {
  Rng rng = make_stream(5, "enc");
  auto p = init_params<float>(small_config(0.1), rng);
  const auto batch = batch_of(rng, 3, p.config);
  Rng s1 = make_stream(1, "a"), s2 = make_stream(2, "b");
  Graph<float> g;
  auto h1 = encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::train(s1));
  auto h2 = encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::train(s2));
  EXPECT_FALSE(bit_equal(h1.value(), h2.value()));
}

TEST(EncodeBatch, EvalModeIsPure) {
  Rng rng = make_stream(6, "enc");
  auto p = init_params<float>(small_config(0.1), rng);
  const auto batch = batch_of(rng, 4, p.config);
  Graph<float> g1, g2;
  EXPECT_TRUE(bit_equal(encode_batch<float, TokenSeq>(g1, p, batch, DropoutDraw::eval()).value(),
                        encode_batch<float, TokenSeq>(g2, p, batch, DropoutDraw::eval()).value()));
}

TEST(EncodeBatch, PadKeysGetZeroAttention) {
  Rng rng = make_stream(7, "enc");
  auto p = init_params<float>(small_config(0.0), rng);
  std::vector<TokenSeq> batch{make_seq({5, 6, 7}, 8), make_seq({9, 10, 11, 12, 13, 14}, 8)};
  ForwardTrace<float> trace;
  Graph<float> g;
  encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::eval(), &trace);
  ASSERT_EQ(trace.attention_probs.size(), 2u);
  const std::size_t pl = 8, heads = 2;
  for (const auto& probs : trace.attention_probs) {
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < pl; ++i) {
          const float* row = probs.data() + ((s * heads + h) * pl + i) * pl;
          double pad = 0, all = 0;
          for (std::size_t j = 0; j < pl; ++j) {
            all += row[j];
            if (batch[s].ids[j] == kPadId) pad += row[j];
          }
          EXPECT_LT(pad, 1e-6);
          EXPECT_NEAR(all, 1.0, 1e-6);
        }
  }
}

TEST(EncodeBatch, WrongSequenceLengthIsShapeError) {
  Rng rng = make_stream(8, "enc");
  auto p = init_params<float>(small_config(), rng);
  std::vector<TokenSeq> batch{make_seq({5, 6}, 7)};
  Graph<float> g;
  EXPECT_THROW((encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::eval())), ShapeError);
}

TEST(EncodeBatch, OutputsArePostLayerNormalized) {
  Rng rng = make_stream(9, "enc");
  auto p = init_params<float>(small_config(0.0), rng);
  const auto batch = batch_of(rng, 3, p.config);
  Graph<float> g;
  const Tensor<float> h = encode_batch<float, TokenSeq>(g, p, batch, DropoutDraw::eval()).value();
  // Final LN has unit gain and zero bias at init.
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < h.cols(); ++j) mu += h.at(r, j);
    mu /= h.cols();
    for (std::size_t j = 0; j < h.cols(); ++j) var += (h.at(r, j) - mu) * (h.at(r, j) - mu);
    EXPECT_LT(std::abs(mu), 1e-5);
    EXPECT_NEAR(var / h.cols(), 1.0, 1e-3);
  }
}

TEST(PoolCls, ReturnsPositionZero) {
  const std::size_t n = 3, pl = 4, d = 5;
  Tensor<double> hidden({n * pl, d});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < pl; ++j)
      for (std::size_t k = 0; k < d; ++k) hidden.at(s * pl + j, k) = j == 0 ? 7.0 + s : -1.0 * (j + k);
  Graph<double> g;
  auto pooled = pool_cls(g.constant(hidden), n, pl);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(pooled.value().at(s, k), 7.0 + s);
}

TEST(PoolCls, IndependentOfOtherPositionsIncludingGradient) {
  Rng rng = make_stream(10, "pool");
  const std::size_t n = 2, pl = 5, d = 3;
  Tensor<double> hidden = gen::tensor(rng, {n * pl, d});
  Tensor<double> other = hidden;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 1; j < pl; ++j)
      for (std::size_t k = 0; k < d; ++k) other.at(s * pl + j, k) += 100.0;
  Graph<double> g;
  auto x = g.variable(hidden);
  auto pooled = pool_cls(x, n, pl);
  EXPECT_TRUE(bit_equal(pooled.value(), pool_cls(g.constant(other), n, pl).value()));
  g.backward(sum(mul(pooled, pooled)));
  const Tensor<double> grad = g.grad(x);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 1; j < pl; ++j)
      for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(grad.at(s * pl + j, k), 0.0);
  EXPECT_NE(grad.at(0, 0), 0.0);
}

TEST(SplitExtractor, FullDepthEqualsBaseEvalHiddenStates) {
  Rng rng = make_stream(11, "split");
  auto base = init_params<float>(small_config(0.1), rng);
  auto ex = split_extractor(base, base.config.n_layers);
  const auto batch = batch_of(rng, 3, base.config);
  Graph<float> g;
  EXPECT_TRUE(bit_equal(encode_batch<float, TokenSeq>(g, base, batch, DropoutDraw::eval()).value(),
                        encode_batch<float, TokenSeq>(g, ex, batch, DropoutDraw::eval()).value()));
}

TEST(SplitExtractor, EveryGroupFrozenAndRenamed) {
  Rng rng = make_stream(12, "split");
  auto base = init_params<float>(small_config(), rng);
  auto ex = split_extractor(base, 1);
  EXPECT_EQ(ex.blocks.size(), 1u);
  EXPECT_FALSE(ex.head.has_value());
  for (auto* p : ex.parameters()) {
    EXPECT_TRUE(p->frozen) << p->name;
    EXPECT_EQ(p->name.rfind("extractor.", 0), 0u) << p->name;
  }
  for (auto* p : base.parameters()) EXPECT_FALSE(p->frozen);
}

TEST(SplitExtractor, DepthOutOfRange) {
  Rng rng = make_stream(13, "split");
  auto base = init_params<float>(small_config(), rng);
  EXPECT_THROW(split_extractor(base, 0), ConfigError);
  EXPECT_THROW(split_extractor(base, 3), ConfigError);
}

TEST(SplitExtractor, FrozenGroupGetsNoGradient) {
  Rng rng = make_stream(14, "split");
  auto base = init_params<float>(small_config(0.0), rng);
  auto ex = split_extractor(base, 2);
  const auto batch = batch_of(rng, 2, base.config);
  Graph<float> g;
  auto h = encode_batch<float, TokenSeq>(g, ex, batch, DropoutDraw::eval());
  g.backward(sum(mul(h, h)));
  for (auto* p : ex.parameters())
    for (float v : p->grad.values()) ASSERT_EQ(v, 0.0f) << p->name;
}

TEST(DropoutDraw, IndependentStreamsGiveIndependentMasks) {
  Rng a = make_stream(1, "dropout-first"), b = make_stream(1, "dropout-second");
  const auto ma = DropoutDraw::train(a).mask<float>({1000}, 0.5);
  const auto mb = DropoutDraw::train(b).mask<float>({1000}, 0.5);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < 1000; ++i) agree += ma[i] == mb[i];
  EXPECT_NEAR(agree / 1000.0, 0.5, 0.06);
  EXPECT_THROW((DropoutDraw{DropoutMode::train, nullptr}.mask<float>({3}, 0.1)), StateError);
}

TEST(CastEncoder, RoundTripPreservesValues) {
  Rng rng = make_stream(15, "cast");
  auto p = init_params<float>(small_config(), rng);
  auto d = cast_encoder<float, double>(p);
  auto back = cast_encoder<double, float>(d);
  EXPECT_TRUE(params_equal(p, back));
}
