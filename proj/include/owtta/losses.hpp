#pragma once

// Entropy objectives: per-sample entropy, the self-weighted batch entropy,
// and the composite losses for the single-pass and two-pass updates.

#include "owtta/types.hpp"

#include <Eigen/Dense>

namespace owtta {

struct LossWeights {
  double beta1 = 1.0;     // OOD term, single-pass total
  double beta2 = 1.0;     // similarity term, single-pass total
  double lambda1 = 0.01;  // OOD term, first pass
  double lambda2 = 0.001; // OOD term, second pass

  void validate() const;
};

/// Shannon entropy of a probability vector with the 0*log(0)=0 convention.
/// Rejects inputs whose mass is off the simplex by more than 1e-6.
double entropy(const Eigen::VectorXd& p);

/// L = sum_i w_i H_i with w_i = N * exp(-H_i) / sum_j exp(-H_j). With
/// differentiate_weights off (the default) the weights are treated as
/// constants; otherwise the gradient flows through them too.
Var self_weighted_entropy(Tape& tape, Var h_row, bool differentiate_weights = false);

/// L = L_entropy + beta1 * L_OOD + beta2 * L_sim.
Var total_loss(Var l_entropy, Var l_ood, Var l_sim, const LossWeights& w);

/// First-pass objective: L_entropy + lambda1 * L_OOD + L_sim (similarity
/// term unweighted).
Var sam_loss_first(Var l_entropy, Var l_ood, Var l_sim, const LossWeights& w);

/// Second-pass objective at the perturbed parameters: L_entropy + lambda2 * L_OOD.
Var sam_loss_second(Var l_entropy, Var l_ood, const LossWeights& w);

}  // namespace owtta
