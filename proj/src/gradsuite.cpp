#include "owtta/gradsuite.hpp"

#include "owtta/gradcheck.hpp"
#include "owtta/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace owtta {

double GradSuiteResult::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

GradSuiteResult run_gradient_suite(std::uint64_t seed, int batch_size, double h) {
  BackboneConfig bc;
  bc.layers = 2;
  bc.dim = 16;
  bc.heads = 2;
  bc.patches = 8;
  bc.classes = 4;
  bc.seed = seed;

  ModelState state = init_backbone(bc);
  Rng rng(seed + 1);
  // Identity-initialized Phi would stop gradient flow into the token net;
  // a small random Phi lets every group carry signal.
  state.aan.phi_w.value = randn(rng, bc.dim, 6 * bc.dim, 0.05);

  Batch batch;
  for (int i = 0; i < batch_size; ++i) {
    batch.tokens.push_back(randn(rng, bc.patches, bc.dim));
    batch.labels.push_back(0);
    batch.ood_flags.push_back(0);
  }

  AdaptConfig cfg;
  // Probe the base entropies, then put the threshold at their median so the
  // mask splits the batch.
  {
    Tape probe;
    TapedLosses probe_losses = build_losses(probe, state, batch, cfg);
    std::vector<double> hs = probe_losses.h_base;
    std::sort(hs.begin(), hs.end());
    cfg.fusion.h_thr_ood = hs[hs.size() / 2] - 1e-3;
  }

  GradSuiteResult result;
  {
    Tape t;
    TapedLosses l = build_losses(t, state, batch, cfg);
    result.mask_count = l.mask_count;
    result.mask_margin = std::numeric_limits<double>::infinity();
    for (double hv : l.h_base)
      result.mask_margin = std::min(result.mask_margin, std::abs(hv - l.threshold));
  }

  auto params = state.trainable_params();
  auto run_case = [&](const std::string& name, const AdaptConfig& c, auto pick) {
    const auto start = std::chrono::steady_clock::now();
    auto res = grad_check(
        [&](Tape& tape) {
          TapedLosses l = build_losses(tape, state, batch, c);
          return pick(l);
        },
        params, h);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    result.entries.push_back({name, res.max_rel_error, dt.count()});
  };

  run_case("entropy (stop-grad weights)", cfg, [](const TapedLosses& l) { return l.l_ent; });
  AdaptConfig diff_cfg = cfg;
  diff_cfg.differentiate_weights = true;
  run_case("entropy (differentiated weights)", diff_cfg,
           [](const TapedLosses& l) { return l.l_ent; });
  run_case("ood", cfg, [](const TapedLosses& l) { return l.l_ood; });
  run_case("sim", cfg, [](const TapedLosses& l) { return l.l_sim; });
  run_case("loss1", cfg, [](const TapedLosses& l) { return l.l1; });
  run_case("loss2", cfg, [](const TapedLosses& l) { return l.l2; });
  return result;
}

}  // namespace owtta
