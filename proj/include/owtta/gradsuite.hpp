#pragma once

// Finite-difference validation of every adaptation loss on a small toy
// model, over all trainable parameter groups.

#include "owtta/adapt.hpp"
#include "owtta/batch.hpp"

#include <string>
#include <vector>

namespace owtta {

/// Taped loss terms for one batch evaluation, plus the data needed to pin
/// the entropy mask during finite differencing.
struct TapedLosses {
  Var l_ent, l_ood, l_sim, l1, l2;
  std::vector<double> h_base;  // base-path entropies behind the mask
  double threshold = 0.0;
  int mask_count = 0;
  int batch = 0;
};

/// Records the full loss pipeline on one tape (forward, HLN branch, mask,
/// similarity, composite objectives).
TapedLosses build_losses(Tape& tape, ModelState& state, const Batch& batch,
                         const AdaptConfig& cfg);

struct GradSuiteEntry {
  std::string loss;
  double max_rel_error;
  double runtime_seconds;
};

struct GradSuiteResult {
  std::vector<GradSuiteEntry> entries;
  int mask_count = 0;
  double mask_margin = 0.0;  // min |H_i - thr|, guards against mask flips
  double worst() const;
};

/// Checks analytic gradients of L_entropy (both weight modes), L_OOD,
/// L_sim, L1 and L2 against central differences (default h = 1e-6) on a
/// 2-layer, d=16, P=8, C=4 model. The entropy threshold is placed at the
/// median base entropy so the mask is non-trivial.
GradSuiteResult run_gradient_suite(std::uint64_t seed = 2024, int batch_size = 3,
                                   double h = 1e-6);

}  // namespace owtta
