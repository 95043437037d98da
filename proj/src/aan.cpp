#include "owtta/aan.hpp"

#include <stdexcept>

namespace owtta {

AanParams init_aan(int dim, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  AanParams p;
  p.token_w = Parameter("aan.token_w", randn(rng, dim, dim, s));
  p.token_b = Parameter("aan.token_b", Mat::Zero(1, dim));
  p.phi_w = Parameter("aan.phi_w", Mat::Zero(dim, 6 * dim));
  Mat phi_b = Mat::Zero(1, 6 * dim);
  for (int k = 0; k < 6; k += 2) phi_b.middleCols(k * dim, dim).setOnes();  // gamma blocks
  p.phi_b = Parameter("aan.phi_b", std::move(phi_b));
  return p;
}

AanVars bind_aan(Tape& tape, AanParams& p) {
  return AanVars{tape.param(p.token_w), tape.param(p.token_b), tape.param(p.phi_w),
                 tape.param(p.phi_b)};
}

Var pool_and_combine(const AanVars& a, Var patches, Var cls) {
  if (patches.rows() < 1) throw std::invalid_argument("pool_and_combine: no patch tokens");
  if (patches.cols() != cls.cols() || cls.rows() != 1)
    throw std::invalid_argument("pool_and_combine: dimension mismatch");
  Var pooled = ad::mean_axis(patches, 0);  // 1 x d
  Var feat = ad::affine(pooled, a.token_w, a.token_b);
  return ad::add(feat, cls);
}

AffineSet affine_params(const AanVars& a, Var feature) {
  if (feature.rows() != 1 || feature.cols() != a.phi_w.value().rows())
    throw std::invalid_argument("affine_params: feature dimension mismatch");
  const Eigen::Index d = feature.cols();
  Var out = ad::affine(feature, a.phi_w, a.phi_b);  // 1 x 6d
  return AffineSet{ad::col_block(out, 0 * d, d), ad::col_block(out, 1 * d, d),
                   ad::col_block(out, 2 * d, d), ad::col_block(out, 3 * d, d),
                   ad::col_block(out, 4 * d, d), ad::col_block(out, 5 * d, d)};
}

void apply_affine(Var& q, Var& k, Var& v, const AffineSet& s) {
  if (q.cols() != s.gq.cols() || k.cols() != s.gk.cols() || v.cols() != s.gv.cols())
    throw std::invalid_argument("apply_affine: feature extent mismatch");
  q = ad::add(ad::rowwise_mul(q, s.gq), ad::broadcast_rows(s.bq, q.rows()));
  k = ad::add(ad::rowwise_mul(k, s.gk), ad::broadcast_rows(s.bk, k.rows()));
  v = ad::add(ad::rowwise_mul(v, s.gv), ad::broadcast_rows(s.bv, v.rows()));
}

SimLossResult sim_loss(Tape& tape, const std::vector<Var>& per_sample_patches) {
  if (per_sample_patches.empty()) throw std::invalid_argument("sim_loss: empty batch");
  int skipped = 0;
  std::vector<Var> per_sample;
  per_sample.reserve(per_sample_patches.size());
  for (Var patches : per_sample_patches) {
    const Eigen::Index p = patches.rows();
    if (p < 2) throw std::invalid_argument("sim_loss: needs at least two patch tokens");
    std::vector<Var> rows;
    rows.reserve(p);
    for (Eigen::Index i = 0; i < p; ++i) rows.push_back(ad::row(patches, i));
    std::vector<Var> pair_terms;
    pair_terms.reserve(p * (p - 1) / 2);
    for (Eigen::Index i = 0; i < p; ++i) {
      for (Eigen::Index j = i + 1; j < p; ++j) {
        if (rows[i].value().norm() == 0.0 || rows[j].value().norm() == 0.0) {
          skipped += 2;  // both ordered pairs of the sum
          continue;
        }
        pair_terms.push_back(ad::cosine_similarity(rows[i], rows[j]));
      }
    }
    Var sum = pair_terms.empty() ? tape.constant_scalar(0.0)
                                 : ad::sum_axis(ad::concat(pair_terms, 1), 1);
    // Each unordered pair appears twice in the double sum.
    per_sample.push_back(ad::scale(sum, -2.0 / static_cast<double>(p)));
  }
  Var loss = ad::mean_axis(ad::concat(per_sample, 1), 1);
  return SimLossResult{loss, skipped};
}

}  // namespace owtta
