#pragma once

// Attention Affine Network: predicts per-feature scale/shift for the Q, K
// and V projections from patch-token features, and the patch similarity
// loss used to counter domain shift.

#include "owtta/rng.hpp"
#include "owtta/types.hpp"

#include <vector>

namespace owtta {

/// One token-feature layer (d -> d) and one affine net Phi (d -> 6d),
/// shared across transformer layers. Phi starts as the identity affine:
/// zero weights, bias [1 0 1 0 1 0] per d-block.
struct AanParams {
  Parameter token_w, token_b;
  Parameter phi_w, phi_b;

  std::vector<Parameter*> params() { return {&token_w, &token_b, &phi_w, &phi_b}; }
};

AanParams init_aan(int dim, Rng& rng);

/// Per-tape bindings of the AAN parameters.
struct AanVars {
  Var token_w, token_b, phi_w, phi_b;
};

AanVars bind_aan(Tape& tape, AanParams& p);

/// Scales and shifts for Q, K, V; six 1 x d row vectors.
struct AffineSet {
  Var gq, bq, gk, bk, gv, bv;
};

/// Mean over patch tokens, through the token-feature net, added to the
/// class token. patches is P x d, cls is 1 x d; result is 1 x d.
Var pool_and_combine(const AanVars& a, Var patches, Var cls);

/// Phi(feature) split into [gq | bq | gk | bk | gv | bv].
AffineSet affine_params(const AanVars& a, Var feature);

/// Q' = gq .* Q + bq (and likewise K, V), broadcast across token rows. The
/// d-vector lines up with the per-head column blocks, so this is the
/// per-head application.
void apply_affine(Var& q, Var& k, Var& v, const AffineSet& s);

struct SimLossResult {
  Var loss;             // scalar
  int zero_norm_pairs;  // pairs skipped because a member had zero norm
};

/// L_sim = -(1/P) sum_i sum_{j != i} cos(x_i, x_j), averaged over samples.
/// A pair with a zero-norm token contributes 0 and bumps the counter.
SimLossResult sim_loss(Tape& tape, const std::vector<Var>& per_sample_patches);

}  // namespace owtta
