#pragma once

// Hierarchical Ladder Network: per-layer OOD token extraction, ladder
// aggregation over all layers, OOD probabilities and entropy, the entropy
// mask, the OOD loss, probability fusion and the final OOD score.

#include "owtta/rng.hpp"
#include "owtta/types.hpp"

#include <cstdint>
#include <vector>

namespace owtta {

/// Psi (d -> d, shared across layers) and the ladder aggregator
/// (L*d -> d over the concatenated OOD tokens).
struct HlnParams {
  Parameter psi_w, psi_b;
  Parameter ladder_w, ladder_b;

  std::vector<Parameter*> psi_params() { return {&psi_w, &psi_b}; }
  std::vector<Parameter*> ladder_params() { return {&ladder_w, &ladder_b}; }
};

HlnParams init_hln(int layers, int dim, Rng& rng);

struct HlnVars {
  Var psi_w, psi_b, ladder_w, ladder_b;
};

HlnVars bind_hln(Tape& tape, HlnParams& p);

/// Fusion weight and entropy threshold. A negative threshold means "auto":
/// half the maximum entropy ln(C).
struct FusionConfig {
  double alpha = 0.7;
  double h_thr_ood = -1.0;

  double threshold(int classes) const;
  void validate(int classes) const;
};

/// o_l = Psi(c_cls_l); same Psi for every layer.
Var extract_ood_token(const HlnVars& h, Var cls_l);

/// o_hln = Ladder(concat(o_1 ... o_L)) in layer order.
Var aggregate(const HlnVars& h, const std::vector<Var>& ood_tokens);

/// softmax(C(o_hln)) through the shared classifier head.
Var ood_probs(Var o_hln, Var head_w, Var head_b);

/// m_i = 1 iff H_i > thr, over base-path prediction entropies.
std::vector<std::uint8_t> ood_mask(const std::vector<double>& entropies, double thr);

/// L_OOD = -(sum_i m_i H_i^OOD) / (sum_i m_i); 0 with no gradient when the
/// mask is empty.
Var ood_loss(Tape& tape, const std::vector<Var>& h_ood, const std::vector<std::uint8_t>& mask);

/// p_final = alpha * p_base + (1 - alpha) * p_ood. Rejects alpha outside [0,1].
Var fuse(Var p_base, Var p_ood, double alpha);

/// Entropy of the fused prediction; higher means more OOD.
Var ood_score(Var p_final);

}  // namespace owtta
