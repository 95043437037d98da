#include "owtta/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace owtta {

void LossWeights::validate() const {
  if (beta1 < 0 || beta2 < 0 || lambda1 < 0 || lambda2 < 0)
    throw std::invalid_argument("loss weights must be nonnegative");
}

double entropy(const Eigen::VectorXd& p) {
  if (p.size() == 0) throw std::invalid_argument("entropy: empty input");
  if (p.minCoeff() < 0.0 || std::abs(p.sum() - 1.0) > 1e-6)
    throw std::invalid_argument("entropy: input is not a probability vector");
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  return h;
}

Var self_weighted_entropy(Tape& tape, Var h_row, bool differentiate_weights) {
  if (h_row.rows() != 1 || h_row.cols() < 1)
    throw std::invalid_argument("self_weighted_entropy: expected a 1 x N entropy row");
  const double n = static_cast<double>(h_row.cols());
  Var neg_h = ad::scale(differentiate_weights ? h_row : ad::detach(h_row), -1.0);
  Var weights = ad::scale(ad::softmax_rows(neg_h), n);  // w_i = N e^{-H_i} / sum_j e^{-H_j}
  return ad::sum_axis(ad::mul(weights, h_row), 1);
}

Var total_loss(Var l_entropy, Var l_ood, Var l_sim, const LossWeights& w) {
  w.validate();
  return ad::add(l_entropy, ad::add(ad::scale(l_ood, w.beta1), ad::scale(l_sim, w.beta2)));
}

Var sam_loss_first(Var l_entropy, Var l_ood, Var l_sim, const LossWeights& w) {
  w.validate();
  return ad::add(l_entropy, ad::add(ad::scale(l_ood, w.lambda1), l_sim));
}

Var sam_loss_second(Var l_entropy, Var l_ood, const LossWeights& w) {
  w.validate();
  return ad::add(l_entropy, ad::scale(l_ood, w.lambda2));
}

}  // namespace owtta
