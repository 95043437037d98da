#include "doctest.h"

#include "owtta/backbone.hpp"
#include "owtta/losses.hpp"
#include "owtta/rng.hpp"

#include <cmath>

using namespace owtta;

TEST_CASE("extract_ood_token: identity net, sharing across layers, shape") {
  Rng rng(1);
  const int d = 6, layers = 3;
  HlnParams p = init_hln(layers, d, rng);
  p.psi_w.value = Mat::Identity(d, d);
  p.psi_b.value.setZero();

  Tape tape;
  HlnVars vars = bind_hln(tape, p);
  Mat cls = randn(rng, 1, d);
  Var tok = extract_ood_token(vars, tape.constant(cls));
  CHECK((tok.value() - cls).cwiseAbs().maxCoeff() == 0.0);

  // Same class-token value through any "layer" gives the same OOD token.
  Var tok2 = extract_ood_token(vars, tape.constant(cls));
  CHECK((tok.value() - tok2.value()).cwiseAbs().maxCoeff() == 0.0);

  HlnParams q = init_hln(layers, d, rng);
  Tape t2;
  HlnVars vq = bind_hln(t2, q);
  CHECK(extract_ood_token(vq, t2.constant(randn(rng, 1, d))).cols() == d);
  CHECK_THROWS_AS(extract_ood_token(vq, t2.constant(randn(rng, 1, d + 1))),
                  std::invalid_argument);
}

TEST_CASE("aggregate: bias-only net, order sensitivity, extents") {
  Rng rng(2);
  const int d = 8, layers = 4;
  HlnParams p = init_hln(layers, d, rng);
  p.ladder_w.value.setZero();
  p.ladder_b.value = randn(rng, 1, d);

  Tape tape;
  HlnVars vars = bind_hln(tape, p);
  std::vector<Var> toks;
  for (int l = 0; l < layers; ++l) toks.push_back(tape.constant(randn(rng, 1, d)));
  Var agg = aggregate(vars, toks);
  CHECK((agg.value() - p.ladder_b.value).cwiseAbs().maxCoeff() == 0.0);
  CHECK(agg.cols() == d);

  // A non-symmetric ladder depends on layer order.
  HlnParams q = init_hln(layers, d, rng);
  q.ladder_w.value = randn(rng, layers * d, d);
  Tape t2;
  HlnVars vq = bind_hln(t2, q);
  std::vector<Var> fwd_order, rev_order;
  for (int l = 0; l < layers; ++l) fwd_order.push_back(t2.constant(randn(rng, 1, d)));
  for (int l = layers - 1; l >= 0; --l) rev_order.push_back(fwd_order[l]);
  CHECK((aggregate(vq, fwd_order).value() - aggregate(vq, rev_order).value())
            .cwiseAbs()
            .maxCoeff() > 0.0);

  std::vector<Var> too_few(fwd_order.begin(), fwd_order.begin() + 2);
  CHECK_THROWS_AS(aggregate(vq, too_few), std::invalid_argument);
}

TEST_CASE("ood_probs: uniform logits, dominant logit, normalization") {
  Tape tape;
  const int d = 4, c = 8;
  Var head_w = tape.constant(Mat::Zero(d, c));
  Var head_b = tape.constant(Mat::Zero(1, c));
  Var o = tape.constant(Mat::Random(1, d));
  Var p = ood_probs(o, head_w, head_b);
  CHECK((p.value().array() - 1.0 / c).abs().maxCoeff() < 1e-15);
  Eigen::VectorXd pv = p.value().row(0).transpose();
  CHECK(entropy(pv) == doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-12));

  Mat big_b = Mat::Zero(1, c);
  big_b(0, 2) = 50.0;
  Var p2 = ood_probs(o, head_w, tape.constant(big_b));
  Eigen::VectorXd pv2 = p2.value().row(0).transpose();
  CHECK(entropy(pv2) < 1e-12);
  CHECK(std::abs(p2.value().sum() - 1.0) < 1e-9);
}

TEST_CASE("ood_mask: thresholds, examples, monotonicity") {
  const double lnc = std::log(8.0);
  std::vector<double> h = {0.1, 1.9, 2.0};
  CHECK(ood_mask(h, lnc) == std::vector<std::uint8_t>{0, 0, 0});
  CHECK(ood_mask(h, 0.0) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(ood_mask(h, 1.5) == std::vector<std::uint8_t>{0, 1, 1});

  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, lnc);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> hs(16);
    for (auto& v : hs) v = u(rng);
    const double t1 = u(rng), t2 = u(rng);
    const double lo = std::min(t1, t2), hi = std::max(t1, t2);
    auto m_lo = ood_mask(hs, lo), m_hi = ood_mask(hs, hi);
    for (std::size_t i = 0; i < hs.size(); ++i) CHECK(m_hi[i] <= m_lo[i]);
  }
}

TEST_CASE("ood_loss: masked mean, empty-mask zero with zero gradient") {
  Tape tape;
  auto scalar = [&](double v) { return tape.constant_scalar(v); };

  std::vector<Var> h = {scalar(1.0), scalar(2.0), scalar(9.9)};
  CHECK(ood_loss(tape, h, {1, 1, 0}).scalar() == doctest::Approx(-1.5).epsilon(1e-14));
  CHECK(ood_loss(tape, {scalar(1.2)}, {1}).scalar() == doctest::Approx(-1.2).epsilon(1e-14));
  CHECK(ood_loss(tape, h, {0, 0, 0}).scalar() == 0.0);
  CHECK_THROWS_AS(ood_loss(tape, h, {1, 0}), std::invalid_argument);

  // Empty mask: gradient w.r.t. Psi and the ladder is exactly zero.
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patches = 4;
  cfg.classes = 3;
  ModelState state = init_backbone(cfg);
  Rng rng(4);
  std::vector<Mat> tokens = {randn(rng, cfg.patches, cfg.dim)};
  Tape t2;
  ForwardResult fwd = forward_collect(t2, state, tokens, false);
  std::vector<Var> ood_tokens;
  for (int l = 0; l < cfg.layers; ++l)
    ood_tokens.push_back(extract_ood_token(fwd.hln, fwd.samples[0].layers[l].cls));
  Var o = aggregate(fwd.hln, ood_tokens);
  Var p = ood_probs(o, fwd.head_w, fwd.head_b);
  Var h_ood = ad::entropy_rows(p);
  for (Parameter* prm : state.hln.psi_params()) prm->zero_grad();
  for (Parameter* prm : state.hln.ladder_params()) prm->zero_grad();
  Var loss = ood_loss(t2, {h_ood}, {0});
  t2.backward(loss);
  for (Parameter* prm : state.hln.psi_params()) CHECK(prm->grad.cwiseAbs().maxCoeff() == 0.0);
  for (Parameter* prm : state.hln.ladder_params())
    CHECK(prm->grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fuse: boundaries, mixing, convexity, rejection") {
  Tape tape;
  Mat a(1, 2), b(1, 2);
  a << 1.0, 0.0;
  b << 0.0, 1.0;
  Var pa = tape.constant(a), pb = tape.constant(b);
  CHECK((fuse(pa, pb, 1.0).value() - a).cwiseAbs().maxCoeff() == 0.0);
  CHECK((fuse(pa, pb, 0.0).value() - b).cwiseAbs().maxCoeff() == 0.0);
  Mat mid = fuse(pa, pb, 0.5).value();
  CHECK(mid(0, 0) == doctest::Approx(0.5));
  CHECK(mid(0, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(fuse(pa, pb, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(fuse(pa, pb, -0.1), std::invalid_argument);

  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    Var x = ad::softmax_rows(t.constant(randn(rng, 1, 6, 2.0)));
    Var y = ad::softmax_rows(t.constant(randn(rng, 1, 6, 2.0)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double alpha = u(rng);
    Mat f = fuse(x, y, alpha).value();
    CHECK(std::abs(f.sum() - 1.0) < 1e-9);
    for (int i = 0; i < 6; ++i) {
      const double lo = std::min(x.value()(0, i), y.value()(0, i));
      const double hi = std::max(x.value()(0, i), y.value()(0, i));
      CHECK(f(0, i) >= lo - 1e-15);
      CHECK(f(0, i) <= hi + 1e-15);
    }
  }
}

TEST_CASE("ood_score: entropy values and bounds") {
  Tape tape;
  Mat uniform = Mat::Constant(1, 8, 1.0 / 8.0);
  CHECK(ood_score(tape.constant(uniform)).scalar() ==
        doctest::Approx(std::log(8.0)).epsilon(1e-12));

  Mat onehot = Mat::Zero(1, 8);
  onehot(0, 3) = 1.0;
  CHECK(ood_score(tape.constant(onehot)).scalar() == doctest::Approx(0.0).epsilon(1e-12));

  Mat half = Mat::Zero(1, 4);
  half(0, 0) = 0.5;
  half(0, 1) = 0.5;
  CHECK(ood_score(tape.constant(half)).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    Var p = ad::softmax_rows(tape.constant(randn(rng, 1, 8, 2.0)));
    const double s = ood_score(p).scalar();
    CHECK(s >= 0.0);
    CHECK(s <= std::log(8.0) + 1e-12);
  }
}

TEST_CASE("shared Psi accumulates gradient from every layer") {
  // Gradient into one shared Psi equals the manual sum over an L-copy
  // ablation where each layer owns its own copy.
  Rng rng(7);
  const int d = 6, layers = 3;
  HlnParams shared = init_hln(layers, d, rng);
  Mat w_init = shared.psi_w.value;
  Mat ladder_w = shared.ladder_w.value;
  std::vector<Mat> cls(layers);
  for (int l = 0; l < layers; ++l) cls[l] = randn(rng, 1, d);

  auto loss_from = [&](HlnVars& vars, std::vector<Var>& toks, Tape& tape) {
    Var agg = aggregate(vars, toks);
    return ad::sum_all(ad::mul(agg, agg));
  };

  // Shared parameter set.
  shared.psi_w.zero_grad();
  shared.psi_b.zero_grad();
  Tape t1;
  HlnVars v1 = bind_hln(t1, shared);
  std::vector<Var> toks1;
  for (int l = 0; l < layers; ++l)
    toks1.push_back(extract_ood_token(v1, t1.constant(cls[l])));
  t1.backward(loss_from(v1, toks1, t1));
  Mat grad_shared = shared.psi_w.grad;

  // Per-layer copies, gradients summed by hand.
  Mat grad_manual = Mat::Zero(d, d);
  for (int l = 0; l < layers; ++l) {
    HlnParams copy = init_hln(layers, d, rng);
    copy.psi_w.value = w_init;
    copy.psi_b.value.setZero();
    copy.ladder_w.value = ladder_w;
    copy.ladder_b.value.setZero();
    copy.psi_w.zero_grad();
    Tape t;
    HlnVars v = bind_hln(t, copy);
    std::vector<Var> toks;
    for (int m = 0; m < layers; ++m) {
      // Only layer l's token goes through the trainable copy; the others
      // are constants holding the same values.
      if (m == l) {
        toks.push_back(extract_ood_token(v, t.constant(cls[m])));
      } else {
        Tape scratch;
        HlnParams frozen = init_hln(layers, d, rng);
        frozen.psi_w.value = w_init;
        frozen.psi_b.value.setZero();
        HlnVars fv = bind_hln(scratch, frozen);
        Mat tok = extract_ood_token(fv, scratch.constant(cls[m])).value();
        toks.push_back(t.constant(tok));
      }
    }
    t.backward(loss_from(v, toks, t));
    grad_manual += copy.psi_w.grad;
  }
  CHECK((grad_shared - grad_manual).cwiseAbs().maxCoeff() < 1e-10);
}
