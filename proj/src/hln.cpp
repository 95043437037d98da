#include "owtta/hln.hpp"

#include <cmath>
#include <stdexcept>

namespace owtta {

HlnParams init_hln(int layers, int dim, Rng& rng) {
  (void)rng;
  // Pass-through initialization: Psi is the identity and the ladder
  // selects the final layer's OOD token, so o_hln starts as the last
  // class token and the branch prediction coincides with the base path.
  // Fusion is then exactly ranking-neutral before any adaptation, and the
  // masked-entropy objective shapes the branch away from that point. A
  // branch started at uniform output would sit on a stationary point of
  // the OOD loss instead and never train.
  HlnParams p;
  p.psi_w = Parameter("hln.psi_w", Mat::Identity(dim, dim));
  p.psi_b = Parameter("hln.psi_b", Mat::Zero(1, dim));
  Mat ladder = Mat::Zero(layers * dim, dim);
  ladder.bottomRows(dim) = Mat::Identity(dim, dim);
  p.ladder_w = Parameter("hln.ladder_w", std::move(ladder));
  p.ladder_b = Parameter("hln.ladder_b", Mat::Zero(1, dim));
  return p;
}

HlnVars bind_hln(Tape& tape, HlnParams& p) {
  return HlnVars{tape.param(p.psi_w), tape.param(p.psi_b), tape.param(p.ladder_w),
                 tape.param(p.ladder_b)};
}

double FusionConfig::threshold(int classes) const {
  return h_thr_ood < 0.0 ? 0.5 * std::log(static_cast<double>(classes)) : h_thr_ood;
}

void FusionConfig::validate(int classes) const {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("fusion alpha must be in [0,1]");
  const double thr = threshold(classes);
  const double max_h = std::log(static_cast<double>(classes));
  if (thr < 0.0 || thr > max_h)
    throw std::invalid_argument("OOD entropy threshold must be in [0, ln C]");
}

Var extract_ood_token(const HlnVars& h, Var cls_l) {
  if (cls_l.rows() != 1 || cls_l.cols() != h.psi_w.value().rows())
    throw std::invalid_argument("extract_ood_token: dimension mismatch");
  return ad::affine(cls_l, h.psi_w, h.psi_b);
}

Var aggregate(const HlnVars& h, const std::vector<Var>& ood_tokens) {
  const Eigen::Index want = h.ladder_w.value().rows();
  Eigen::Index got = 0;
  for (Var t : ood_tokens) got += t.cols();
  if (ood_tokens.empty() || got != want)
    throw std::invalid_argument("aggregate: expected concatenated extent " +
                                std::to_string(want) + ", got " + std::to_string(got));
  Var cat = ad::concat(ood_tokens, 1);
  return ad::affine(cat, h.ladder_w, h.ladder_b);
}

Var ood_probs(Var o_hln, Var head_w, Var head_b) {
  return ad::softmax_rows(ad::affine(o_hln, head_w, head_b));
}

std::vector<std::uint8_t> ood_mask(const std::vector<double>& entropies, double thr) {
  std::vector<std::uint8_t> m(entropies.size());
  for (std::size_t i = 0; i < entropies.size(); ++i) m[i] = entropies[i] > thr ? 1 : 0;
  return m;
}

Var ood_loss(Tape& tape, const std::vector<Var>& h_ood, const std::vector<std::uint8_t>& mask) {
  if (h_ood.size() != mask.size()) throw std::invalid_argument("ood_loss: length mismatch");
  std::vector<Var> selected;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) selected.push_back(h_ood[i]);
  if (selected.empty()) return tape.constant_scalar(0.0);
  return ad::scale(ad::mean_axis(ad::concat(selected, 1), 1), -1.0);
}

Var fuse(Var p_base, Var p_ood, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("fuse: alpha must be in [0,1]");
  ad::detail::require_same_shape(p_base.value(), p_ood.value(), "fuse");
  return ad::add(ad::scale(p_base, alpha), ad::scale(p_ood, 1.0 - alpha));
}

Var ood_score(Var p_final) {
  if (p_final.rows() != 1) throw std::invalid_argument("ood_score: expected a probability row");
  return ad::entropy_rows(p_final);
}

}  // namespace owtta
