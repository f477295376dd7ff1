#pragma once

// The finite-difference gradient suite behind `cmlmcse gradcheck`: every
// differentiable primitive, both losses, and a one-block end-to-end model,
// all evaluated in double precision at random points.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cmlmcse/auxnet.hpp"
#include "cmlmcse/contrastive.hpp"
#include "cmlmcse/encoder.hpp"
#include "cmlmcse/ndtensor.hpp"
#include "cmlmcse/random.hpp"
#include "cmlmcse/textdata.hpp"

namespace cmlmcse {

inline constexpr double kPrimitiveTolerance = 1e-3;
inline constexpr double kEndToEndTolerance = 5e-3;
// Central-difference step for the double-precision checks.
inline constexpr double kGradcheckStep = 1e-4;

struct GradcheckCase {
  std::string name;
  double tolerance = kPrimitiveTolerance;
  // The analytic gradient must also be non-zero somewhere.
  bool require_nonzero = false;
  std::function<GradcheckResult(Rng&, double eps, double& grad_norm)> run;
};

struct GradcheckLine {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  double grad_norm = 0.0;
  std::size_t coordinates = 0;
  std::string worst;
  bool passed = false;
};

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (double& v : t.values()) v = scale * standard_normal(rng);
  return t;
}

namespace detail {

// sum(out * w) for a fixed random w, turning any op output into a scalar.
inline Var<double> weighted_sum(Var<double> out, const Tensor<double>& w) {
  return sum(mul(out, out.graph().constant(w)));
}

// Point-form case over the given input shapes; op maps inputs to any tensor.
inline GradcheckCase point_case(std::string name, std::vector<Shape> shapes,
                                std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)> op, double scale = 1.0) {
  GradcheckCase c;
  c.name = std::move(name);
  c.run = [shapes = std::move(shapes), op = std::move(op), scale](Rng& rng, double eps, double& norm) {
    std::vector<Tensor<double>> point;
    for (const Shape& s : shapes) point.push_back(random_tensor(s, rng, scale));
    // Output weights are drawn lazily once the output shape is known.
    Tensor<double> w;
    Rng wrng = make_stream(rng(), "gradcheck/weights");
    GradcheckResult r = gradcheck_at<double>(
        [&](Graph<double>& g, std::vector<Var<double>>& xs) {
          Var<double> out = op(g, xs);
          if (out.value().numel() == 1) return out.value().rank() == 0 ? out : sum(out);
          if (w.shape() != out.shape()) w = random_tensor(out.shape(), wrng);
          return weighted_sum(out, w);
        },
        point, eps);
    // Analytic gradient norm at the base point.
    std::vector<Parameter<double>> params;
    for (std::size_t i = 0; i < point.size(); ++i) params.emplace_back("x" + std::to_string(i), point[i]);
    Graph<double> g;
    std::vector<Var<double>> xs;
    for (auto& p : params) xs.push_back(g.param(p));
    Var<double> out = op(g, xs);
    Var<double> loss = out.value().numel() == 1 ? (out.value().rank() == 0 ? out : sum(out)) : weighted_sum(out, w);
    g.backward(loss);
    norm = 0.0;
    for (auto& p : params)
      for (double v : p.grad.values()) norm += v * v;
    norm = std::sqrt(norm);
    return r;
  };
  return c;
}

// Random sentences of length 2..p over ids 4..V-1.
inline std::vector<TokenSeq> random_batch(std::size_t n, std::size_t p, std::size_t vocab, Rng& rng) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 2 + uniform_index(rng, p - 2);
    std::vector<int> content(len);
    for (int& id : content) id = static_cast<int>(kReservedTokens + uniform_index(rng, vocab - kReservedTokens));
    out.push_back(make_seq(content, p));
  }
  return out;
}

struct TinyModel {
  EncoderConfig config;
  EncoderParams<double> encoder;
  EncoderParams<double> extractor;
  Fusioner<double> fusioner;
};

inline TinyModel tiny_model(Rng& rng) {
  TinyModel m;
  m.config.vocab_size = 12;
  m.config.max_seq_len = 6;
  m.config.d_model = 8;
  m.config.n_heads = 2;
  m.config.n_layers = 1;
  m.config.d_ff = 16;
  m.config.dropout_p = 0.1;
  EncoderParams<double> base = init_params<double>(m.config, rng, "encoder", false);
  m.encoder = copy_encoder(base, "encoder");
  m.extractor = split_extractor(base, 1);
  m.fusioner = init_fusioner<double>(m.config, 1, rng);
  return m;
}

}  // namespace detail

// End-to-end: one-block main encoder, dual-dropout InfoNCE, frozen one-block
// extractor, one-block fusioner, combined loss. Dropout masks are replayed
// from saved rng states so every evaluation sees the same masks.
inline GradcheckCase end_to_end_case(double lambda = 1.0) {
  GradcheckCase c;
  c.name = "end_to_end_combined_loss";
  c.tolerance = kEndToEndTolerance;
  c.run = [lambda](Rng& rng, double eps, double& norm) {
    detail::TinyModel m = detail::tiny_model(rng);
    const std::size_t n = 3, p = m.config.max_seq_len;
    const std::vector<TokenSeq> batch = detail::random_batch(n, p, m.config.vocab_size, rng);
    std::vector<MaskedSeq> masked;
    for (const auto& s : batch) masked.push_back(mask_tokens(s, 0.3, rng));
    const Rng first0 = make_stream(rng(), "gc/first"), second0 = make_stream(rng(), "gc/second"), fuse0 = make_stream(rng(), "gc/fuse");
    auto loss = [&](Graph<double>& g) {
      Rng first = first0, second = second0, fuse = fuse0;
      auto pairs = simcse_forward<double>(g, m.encoder, batch, first, second);
      Var<double> lexical = lexical_features<double>(g, m.extractor, masked);
      Var<double> logits = fuse_and_predict<double>(g, m.fusioner, pairs.first, lexical, masked, DropoutDraw::train(fuse));
      return add(info_nce_loss(pairs, 0.5), scale(conditional_mlm_loss<double>(logits, masked), lambda));
    };
    std::vector<Parameter<double>*> params = m.encoder.parameters();
    for (auto* q : m.fusioner.parameters()) params.push_back(q);
    GradcheckResult r = gradcheck<double>(loss, params, eps);
    norm = 0.0;
    for (auto* q : params)
      for (double v : q->grad.values()) norm += v * v;
    norm = std::sqrt(norm);
    return r;
  };
  return c;
}

// d L_MLM / d h: the conditional channel must carry gradient.
inline GradcheckCase conditional_channel_case() {
  GradcheckCase c;
  c.name = "conditional_mlm_wrt_sentence_embedding";
  c.tolerance = kEndToEndTolerance;
  c.require_nonzero = true;
  c.run = [](Rng& rng, double eps, double& norm) {
    detail::TinyModel m = detail::tiny_model(rng);
    const std::size_t n = 3, p = m.config.max_seq_len;
    const std::vector<TokenSeq> batch = detail::random_batch(n, p, m.config.vocab_size, rng);
    std::vector<MaskedSeq> masked;
    for (const auto& s : batch) masked.push_back(mask_tokens(s, 0.3, rng));
    Parameter<double> h("h", random_tensor({n, m.config.d_model}, rng));
    auto loss = [&](Graph<double>& g) {
      Var<double> lexical = lexical_features<double>(g, m.extractor, masked);
      Var<double> logits = fuse_and_predict<double>(g, m.fusioner, g.param(h), lexical, masked, DropoutDraw::eval());
      return conditional_mlm_loss<double>(logits, masked);
    };
    GradcheckResult r = gradcheck<double>(loss, {&h}, eps);
    norm = 0.0;
    for (double v : h.grad.values()) norm += v * v;
    norm = std::sqrt(norm);
    return r;
  };
  return c;
}

inline std::vector<GradcheckCase> default_gradcheck_suite() {
  using detail::point_case;
  using G = Graph<double>;
  using Vs = std::vector<Var<double>>;
  std::vector<GradcheckCase> s;
  s.push_back(point_case("add", {{3, 4}, {3, 4}}, [](G&, Vs& x) { return add(x[0], x[1]); }));
  s.push_back(point_case("mul", {{3, 4}, {3, 4}}, [](G&, Vs& x) { return mul(x[0], x[1]); }));
  s.push_back(point_case("scale", {{3, 4}}, [](G&, Vs& x) { return scale(x[0], -1.7); }));
  s.push_back(point_case("add_row", {{3, 5}, {5}}, [](G&, Vs& x) { return add_row(x[0], x[1]); }));
  s.push_back(point_case("sum", {{4, 3}}, [](G&, Vs& x) { return sum(x[0]); }));
  s.push_back(point_case("mean", {{4, 3}}, [](G&, Vs& x) { return mean(x[0]); }));
  s.push_back(point_case("gelu", {{3, 6}}, [](G&, Vs& x) { return gelu(x[0]); }));
  {
    GradcheckCase c = point_case("dropout", {{4, 5}}, nullptr);
    c.run = [](Rng& rng, double eps, double& norm) {
      const Tensor<double> mask = sample_dropout_mask<double>({4, 5}, 0.3, rng);
      GradcheckCase inner = point_case("dropout", {{4, 5}}, [mask](G&, Vs& x) { return dropout(x[0], mask); });
      return inner.run(rng, eps, norm);
    };
    s.push_back(std::move(c));
  }
  s.push_back(point_case("matmul", {{3, 4}, {4, 5}}, [](G&, Vs& x) { return matmul(x[0], x[1]); }));
  s.push_back(point_case("linear", {{3, 4}, {4, 5}, {5}}, [](G&, Vs& x) { return linear(x[0], x[1], x[2]); }));
  s.push_back(point_case("layer_norm", {{3, 6}, {6}, {6}}, [](G&, Vs& x) { return layer_norm(x[0], x[1], x[2]); }));
  s.push_back(point_case("embedding", {{7, 4}}, [](G&, Vs& x) { return embedding(x[0], {3, 0, 6, 3, 1}); }));
  s.push_back(point_case("gather_rows", {{5, 3}}, [](G&, Vs& x) { return gather_rows(x[0], {4, 0, 4, 2}); }));
  s.push_back(point_case("replace_rows", {{5, 3}, {2, 3}}, [](G&, Vs& x) { return replace_rows(x[0], x[1], {3, 1}); }));
  s.push_back(point_case("softmax_rows", {{3, 5}}, [](G&, Vs& x) { return softmax_rows(x[0]); }));
  s.push_back(point_case("cross_entropy", {{4, 6}}, [](G&, Vs& x) { return cross_entropy(x[0], {5, 0, 2, 2}); }));
  s.push_back(point_case("softmax_cross_entropy", {{7}}, [](G&, Vs& x) { return softmax_cross_entropy(x[0], 4); }));
  s.push_back(point_case("cosine_similarity", {{8}, {8}}, [](G&, Vs& x) { return cosine_similarity(x[0], x[1]); }));
  s.push_back(point_case("cosine_matrix", {{3, 5}, {4, 5}}, [](G&, Vs& x) { return cosine_matrix(x[0], x[1]); }));
  {
    GradcheckCase c = point_case("attention", {}, nullptr);
    c.run = [](Rng& rng, double eps, double& norm) {
      const AttentionShape dims{2, 4, 2};
      // Second sequence has a padded last key.
      const std::vector<char> valid{1, 1, 1, 1, 1, 1, 1, 0};
      const Tensor<double> pmask = sample_dropout_mask<double>({2, 2, 4, 4}, 0.2, rng);
      GradcheckCase inner = point_case("attention", {{8, 4}, {8, 4}, {8, 4}},
                                       [=](G&, Vs& x) { return attention(x[0], x[1], x[2], dims, valid, pmask); });
      return inner.run(rng, eps, norm);
    };
    s.push_back(std::move(c));
  }
  s.push_back(point_case("info_nce_loss", {{4, 6}, {4, 6}}, [](G&, Vs& x) { return info_nce_loss(x[0], x[1], 0.05); }));
  {
    GradcheckCase c = point_case("conditional_mlm_loss", {}, nullptr);
    c.run = [](Rng& rng, double eps, double& norm) {
      const std::size_t n = 2, p = 5, v = 9;
      std::vector<MaskedSeq> masked;
      for (const auto& seq : detail::random_batch(n, p, v, rng)) masked.push_back(mask_tokens(seq, 0.4, rng));
      GradcheckCase inner = point_case("conditional_mlm_loss", {{n * p, v}},
                                       [masked](G&, Vs& x) { return conditional_mlm_loss<double>(x[0], masked); });
      return inner.run(rng, eps, norm);
    };
    s.push_back(std::move(c));
  }
  s.push_back(conditional_channel_case());
  s.push_back(end_to_end_case());
  return s;
}

// Max error over `points` random points per case.
inline std::vector<GradcheckLine> run_gradcheck_suite(const std::vector<GradcheckCase>& cases, std::uint64_t seed,
                                                      std::size_t points = 3, double eps = kGradcheckStep) {
  std::vector<GradcheckLine> lines;
  for (const GradcheckCase& c : cases) {
    Rng rng = make_stream(seed, "gradcheck/" + c.name);
    GradcheckLine line;
    line.name = c.name;
    line.tolerance = c.tolerance;
    double min_norm = HUGE_VAL;
    for (std::size_t i = 0; i < points; ++i) {
      double norm = 0.0;
      const GradcheckResult r = c.run(rng, eps, norm);
      line.coordinates += r.coordinates;
      min_norm = std::min(min_norm, norm);
      if (i == 0 || r.max_rel_error > line.max_rel_error) {
        line.max_rel_error = r.max_rel_error;
        line.worst = r.worst_parameter + "[" + std::to_string(r.worst_index) + "]";
      }
    }
    line.grad_norm = min_norm;
    line.passed = line.max_rel_error < c.tolerance && (!c.require_nonzero || min_norm > 0.0);
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace cmlmcse
