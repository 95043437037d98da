#include "doctest.h"

#include "owtta/adapt.hpp"
#include "owtta/rng.hpp"
#include "owtta/stream.hpp"

#include <cmath>
#include <cstring>

using namespace owtta;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.patches = 8;
  cfg.classes = 4;
  cfg.seed = 11;
  return cfg;
}

Batch random_batch(Rng& rng, const BackboneConfig& cfg, int n) {
  Batch b;
  for (int i = 0; i < n; ++i) {
    b.tokens.push_back(randn(rng, cfg.patches, cfg.dim));
    b.labels.push_back(static_cast<int>(rng() % cfg.classes));
    b.ood_flags.push_back(0);
  }
  return b;
}

bool params_bitwise_equal(std::vector<Parameter*> a, std::vector<Parameter*> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.size() != b[i]->value.size()) return false;
    if (std::memcmp(a[i]->value.data(), b[i]->value.data(),
                    sizeof(double) * a[i]->value.size()) != 0)
      return false;
  }
  return true;
}

bool reports_bitwise_equal(const AdaptReport& a, const AdaptReport& b) {
  if (a.p_final.size() != b.p_final.size()) return false;
  if (std::memcmp(a.p_final.data(), b.p_final.data(), sizeof(double) * a.p_final.size()) != 0)
    return false;
  if (a.scores != b.scores || a.predictions != b.predictions) return false;
  return a.mask_count == b.mask_count &&
         std::memcmp(&a.loss1, &b.loss1, sizeof(double)) == 0 &&
         std::memcmp(&a.loss2, &b.loss2, sizeof(double)) == 0 &&
         std::memcmp(&a.eps_norm, &b.eps_norm, sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("sam_perturbation: scaling, degenerate input, norm") {
  Eigen::VectorXd g(2);
  g << 3.0, 4.0;
  Eigen::VectorXd e = sam_perturbation(g, 1.0);
  CHECK(e(0) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(e(1) == doctest::Approx(0.8).epsilon(1e-14));

  CHECK(sam_perturbation(Eigen::VectorXd::Zero(5), 0.05).norm() == 0.0);

  Rng rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd r = Eigen::Map<Eigen::VectorXd>(randn(rng, 17, 1).data(), 17);
    CHECK(std::abs(sam_perturbation(r, 0.05).norm() - 0.05) < 1e-9);
  }
}

TEST_CASE("zero learning rates: parameters bitwise unchanged, frozen predictions") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  ModelState reference = init_backbone(bc);
  Rng rng(2);
  Batch batch = random_batch(rng, bc, 4);

  AdaptConfig cfg;
  cfg.groups.lr_norm = cfg.groups.lr_aan = cfg.groups.lr_psi = cfg.groups.lr_ladder = 0.0;
  AdaptEngine engine(state, cfg);
  AdaptReport r1 = engine.adapt_batch(batch);
  CHECK(params_bitwise_equal(state.all_params(), reference.all_params()));

  // Predictions equal the frozen model's fused predictions (identity AAN).
  Tape tape;
  ForwardResult fwd = forward_collect(tape, reference, batch.tokens, true);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var p_base = ad::softmax_rows(fwd.samples[i].logits);
    std::vector<Var> ood;
    for (int l = 0; l < bc.layers; ++l)
      ood.push_back(extract_ood_token(fwd.hln, fwd.samples[i].layers[l].cls));
    Var p_ood = ood_probs(aggregate(fwd.hln, ood), fwd.head_w, fwd.head_b);
    Var p_final = fuse(p_base, p_ood, cfg.fusion.alpha);
    CHECK((p_final.value().row(0) - r1.p_final.row(i)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rho = 0 with matching lambdas equals the single-pass update") {
  BackboneConfig bc = small_backbone();
  Rng rng(3);
  Batch batch = random_batch(rng, bc, 4);

  const double lambda = 0.01;
  AdaptConfig two_pass;
  two_pass.sam.rho = 0.0;
  two_pass.weights.lambda1 = lambda;
  two_pass.weights.lambda2 = lambda;

  AdaptConfig single;
  single.single_pass = true;
  single.weights.beta1 = lambda;
  single.weights.beta2 = 0.0;

  ModelState s1 = init_backbone(bc);
  ModelState s2 = init_backbone(bc);
  AdaptEngine e1(s1, two_pass);
  AdaptEngine e2(s2, single);
  e1.adapt_batch(batch);
  e2.adapt_batch(batch);

  auto p1 = s1.trainable_params(), p2 = s2.trainable_params();
  double max_diff = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i)
    max_diff = std::max(max_diff, (p1[i]->value - p2[i]->value).cwiseAbs().maxCoeff());
  CHECK(max_diff < 1e-12);
}

TEST_CASE("parameter restoration: rho > 0 with zero learning rates is a no-op") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  ModelState reference = init_backbone(bc);
  Rng rng(4);
  Batch batch = random_batch(rng, bc, 4);

  AdaptConfig cfg;
  cfg.groups.lr_norm = cfg.groups.lr_aan = cfg.groups.lr_psi = cfg.groups.lr_ladder = 0.0;
  cfg.sam.rho = 0.25;
  AdaptEngine engine(state, cfg);
  AdaptReport r = engine.adapt_batch(batch);
  CHECK(r.eps_norm == doctest::Approx(0.25).epsilon(1e-9));
  CHECK_FALSE(r.sam_degenerate);
  CHECK(params_bitwise_equal(state.all_params(), reference.all_params()));
}

TEST_CASE("recorded eps norm equals rho on non-degenerate steps") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  Rng rng(5);
  AdaptConfig cfg;
  AdaptEngine engine(state, cfg);
  for (int t = 0; t < 5; ++t) {
    AdaptReport r = engine.adapt_batch(random_batch(rng, bc, 4));
    if (!r.sam_degenerate) CHECK(std::abs(r.eps_norm - cfg.sam.rho) < 1e-9);
  }
}

TEST_CASE("determinism: same state, config and stream give bitwise identical reports") {
  BackboneConfig bc = small_backbone();
  Rng rng(6);
  std::vector<Batch> stream;
  for (int t = 0; t < 3; ++t) stream.push_back(random_batch(rng, bc, 4));

  auto run = [&]() {
    ModelState state = init_backbone(bc);
    AdaptEngine engine(state, AdaptConfig{});
    return engine.run_stream(stream);
  };
  auto ra = run(), rb = run();
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(reports_bitwise_equal(ra[i], rb[i]));
}

TEST_CASE("causality: mutating batch t+1 leaves report t unchanged") {
  BackboneConfig bc = small_backbone();
  Rng rng(7);
  std::vector<Batch> stream;
  for (int t = 0; t < 3; ++t) stream.push_back(random_batch(rng, bc, 4));

  auto run_first_two = [&](const std::vector<Batch>& s) {
    ModelState state = init_backbone(bc);
    AdaptEngine engine(state, AdaptConfig{});
    std::vector<AdaptReport> reports;
    for (const Batch& b : s) reports.push_back(engine.adapt_batch(b));
    return reports;
  };
  auto base = run_first_two(stream);

  std::vector<Batch> mutated = stream;
  mutated[2].tokens[0].setConstant(123.0);
  mutated[2].tokens[1] *= -2.0;
  auto changed = run_first_two(mutated);

  CHECK(reports_bitwise_equal(base[0], changed[0]));
  CHECK(reports_bitwise_equal(base[1], changed[1]));
  CHECK_FALSE(reports_bitwise_equal(base[2], changed[2]));
}

TEST_CASE("frozen invariance: backbone checksum constant across a stream") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  Rng rng(8);
  std::vector<Batch> stream;
  for (int t = 0; t < 5; ++t) stream.push_back(random_batch(rng, bc, 4));

  const std::uint64_t before = group_checksum(state, ParamGroup::Backbone);
  AdaptEngine engine(state, AdaptConfig{});
  engine.run_stream(stream);
  CHECK(group_checksum(state, ParamGroup::Backbone) == before);

  // And the trainable groups did move.
  ModelState reference = init_backbone(bc);
  CHECK_FALSE(params_bitwise_equal(state.trainable_params(), reference.trainable_params()));
}

TEST_CASE("non-finite loss: step skipped and parameters untouched") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  ModelState reference = init_backbone(bc);
  Batch bad;
  Mat huge = Mat::Constant(bc.patches, bc.dim, 1e308);
  huge(0, 0) = -1e308;
  bad.tokens = {huge};
  bad.labels = {0};
  bad.ood_flags = {0};

  AdaptEngine engine(state, AdaptConfig{});
  AdaptReport r = engine.adapt_batch(bad);
  CHECK(r.step_skipped);
  CHECK(params_bitwise_equal(state.all_params(), reference.all_params()));
}

TEST_CASE("run_stream: report counts and empty stream") {
  BackboneConfig bc = small_backbone();
  ModelState state = init_backbone(bc);
  Rng rng(9);
  AdaptEngine engine(state, AdaptConfig{});

  CHECK(engine.run_stream({}).empty());
  std::vector<Batch> stream;
  for (int t = 0; t < 4; ++t) stream.push_back(random_batch(rng, bc, 3));
  CHECK(engine.run_stream(stream).size() == 4);
  CHECK_THROWS_AS(engine.adapt_batch(Batch{}), std::invalid_argument);
}

TEST_CASE("ablation toggles: disabled adapters keep their groups fixed") {
  BackboneConfig bc = small_backbone();
  Rng rng(10);
  std::vector<Batch> stream;
  for (int t = 0; t < 3; ++t) stream.push_back(random_batch(rng, bc, 4));

  AdaptConfig cfg;
  cfg.enable_aan = false;
  cfg.enable_hln = false;
  ModelState state = init_backbone(bc);
  ModelState reference = init_backbone(bc);
  AdaptEngine engine(state, cfg);
  auto reports = engine.run_stream(stream);

  // AAN, Psi and ladder untouched; norm layers moved; scores fall back to
  // the base-path entropy with p_final = p_base.
  CHECK(params_bitwise_equal(state.group(ParamGroup::Aan), reference.group(ParamGroup::Aan)));
  CHECK(params_bitwise_equal(state.group(ParamGroup::Psi), reference.group(ParamGroup::Psi)));
  CHECK(params_bitwise_equal(state.group(ParamGroup::Ladder),
                             reference.group(ParamGroup::Ladder)));
  CHECK_FALSE(
      params_bitwise_equal(state.group(ParamGroup::Norm), reference.group(ParamGroup::Norm)));
  for (const auto& r : reports) {
    CHECK(r.loss_sim == 0.0);
    CHECK(r.loss_ood == 0.0);
    for (Eigen::Index i = 0; i < r.p_final.rows(); ++i)
      CHECK(std::abs(r.p_final.row(i).sum() - 1.0) < 1e-9);
  }
}
