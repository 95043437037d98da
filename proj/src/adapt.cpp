#include "owtta/adapt.hpp"

#include "owtta/gradsuite.hpp"

#include <cmath>
#include <stdexcept>

namespace owtta {

void ParamGroupsConfig::validate() const {
  if (lr_norm < 0 || lr_aan < 0 || lr_psi < 0 || lr_ladder < 0)
    throw std::invalid_argument("learning rates must be nonnegative");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0) throw std::invalid_argument("weight decay must be nonnegative");
}

void SamConfig::validate() const {
  if (rho < 0) throw std::invalid_argument("sam rho must be nonnegative");
}

void AdaptConfig::validate(int classes) const {
  groups.validate();
  sam.validate();
  weights.validate();
  fusion.validate(classes);
}

Eigen::VectorXd sam_perturbation(const Eigen::VectorXd& grads, double rho) {
  const double norm = grads.norm();
  if (norm < 1e-12) return Eigen::VectorXd::Zero(grads.size());
  return (rho / norm) * grads;
}

namespace {

Eigen::VectorXd flatten_grads(const std::vector<Parameter*>& params) {
  Eigen::Index total = 0;
  for (Parameter* p : params) total += p->value.size();
  Eigen::VectorXd out(total);
  Eigen::Index off = 0;
  for (Parameter* p : params) {
    out.segment(off, p->grad.size()) = Eigen::Map<const Eigen::VectorXd>(p->grad.data(), p->grad.size());
    off += p->grad.size();
  }
  return out;
}

void add_to_values(const std::vector<Parameter*>& params, const Eigen::VectorXd& delta) {
  Eigen::Index off = 0;
  for (Parameter* p : params) {
    Eigen::Map<Eigen::VectorXd>(p->value.data(), p->value.size()) +=
        delta.segment(off, p->value.size());
    off += p->value.size();
  }
}

// Everything one tape evaluation produces: base path, OOD branch, losses.
struct BatchEval {
  ForwardResult fwd;
  std::vector<Var> p_base;  // per sample, 1 x C
  std::vector<Var> h_base;  // per sample, 1 x 1
  std::vector<Var> p_ood;
  std::vector<Var> h_ood;
  std::vector<std::uint8_t> mask;
  Var l_ent, l_ood, l_sim;
  int zero_norm_pairs = 0;
};

BatchEval evaluate(Tape& tape, ModelState& state, const Batch& batch, const AdaptConfig& cfg) {
  BatchEval ev;
  ev.fwd = forward_collect(tape, state, batch.tokens, cfg.enable_aan);
  const std::size_t n = batch.size();

  std::vector<Var> h_items;
  h_items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var p = ad::softmax_rows(ev.fwd.samples[i].logits);
    ev.p_base.push_back(p);
    Var h = ad::entropy_rows(p);
    ev.h_base.push_back(h);
    h_items.push_back(h);
  }
  Var h_row = ad::concat(h_items, 1);
  ev.l_ent = self_weighted_entropy(tape, h_row, cfg.differentiate_weights);

  if (cfg.enable_hln) {
    const int layers = state.cfg.layers;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Var> ood_tokens;
      ood_tokens.reserve(layers);
      for (int l = 0; l < layers; ++l)
        ood_tokens.push_back(extract_ood_token(ev.fwd.hln, ev.fwd.samples[i].layers[l].cls));
      Var o_hln = aggregate(ev.fwd.hln, ood_tokens);
      Var p = ood_probs(o_hln, ev.fwd.head_w, ev.fwd.head_b);
      ev.p_ood.push_back(p);
      ev.h_ood.push_back(ad::entropy_rows(p));
    }
    std::vector<double> h_values(n);
    for (std::size_t i = 0; i < n; ++i) h_values[i] = ev.h_base[i].scalar();
    ev.mask = ood_mask(h_values, cfg.fusion.threshold(state.cfg.classes));
    ev.l_ood = ood_loss(tape, ev.h_ood, ev.mask);
  } else {
    ev.mask.assign(n, 0);
    ev.l_ood = tape.constant_scalar(0.0);
  }

  if (cfg.enable_aan) {
    std::vector<Var> final_patches;
    final_patches.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      final_patches.push_back(ev.fwd.samples[i].layers.back().patch_tokens);
    SimLossResult sim = sim_loss(tape, final_patches);
    ev.l_sim = sim.loss;
    ev.zero_norm_pairs = sim.zero_norm_pairs;
  } else {
    ev.l_sim = tape.constant_scalar(0.0);
  }
  return ev;
}

void fill_predictions(const BatchEval& ev, const AdaptConfig& cfg, int classes,
                      AdaptReport& report) {
  const std::size_t n = ev.p_base.size();
  report.p_final = Mat(n, classes);
  report.scores.resize(n);
  report.predictions.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var p_final = cfg.enable_hln ? fuse(ev.p_base[i], ev.p_ood[i], cfg.fusion.alpha)
                                 : ev.p_base[i];
    report.p_final.row(i) = p_final.value().row(0);
    Eigen::VectorXd row = p_final.value().row(0).transpose();
    report.scores[i] = entropy(row);
    Eigen::Index arg = 0;
    row.maxCoeff(&arg);
    report.predictions[i] = static_cast<int>(arg);
  }
  report.mask_count = 0;
  for (auto m : ev.mask) report.mask_count += m;
  report.sim_zero_norm_pairs = ev.zero_norm_pairs;
}

}  // namespace

TapedLosses build_losses(Tape& tape, ModelState& state, const Batch& batch,
                         const AdaptConfig& cfg) {
  BatchEval ev = evaluate(tape, state, batch, cfg);
  TapedLosses out;
  out.l_ent = ev.l_ent;
  out.l_ood = ev.l_ood;
  out.l_sim = ev.l_sim;
  out.l1 = sam_loss_first(ev.l_ent, ev.l_ood, ev.l_sim, cfg.weights);
  out.l2 = sam_loss_second(ev.l_ent, ev.l_ood, cfg.weights);
  out.h_base.resize(ev.h_base.size());
  for (std::size_t i = 0; i < ev.h_base.size(); ++i) out.h_base[i] = ev.h_base[i].scalar();
  out.threshold = cfg.fusion.threshold(state.cfg.classes);
  for (auto m : ev.mask) out.mask_count += m;
  out.batch = static_cast<int>(batch.size());
  return out;
}

AdaptEngine::AdaptEngine(ModelState& state, AdaptConfig cfg) : state_(state), cfg_(cfg) {
  cfg_.validate(state.cfg.classes);
  if (cfg_.groups.adapt_norm_layers)
    active_.push_back({ParamGroup::Norm, cfg_.groups.lr_norm, state_.group(ParamGroup::Norm)});
  if (cfg_.enable_aan)
    active_.push_back({ParamGroup::Aan, cfg_.groups.lr_aan, state_.group(ParamGroup::Aan)});
  if (cfg_.enable_hln) {
    active_.push_back({ParamGroup::Psi, cfg_.groups.lr_psi, state_.group(ParamGroup::Psi)});
    active_.push_back(
        {ParamGroup::Ladder, cfg_.groups.lr_ladder, state_.group(ParamGroup::Ladder)});
  }
  for (const GroupRef& g : active_)
    for (Parameter* p : g.params)
      velocity_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
}

void AdaptEngine::zero_grads() {
  for (const GroupRef& g : active_)
    for (Parameter* p : g.params) p->zero_grad();
}

void AdaptEngine::apply_update(AdaptReport& report) {
  std::size_t vi = 0;
  for (const GroupRef& g : active_) {
    double sq = 0.0;
    for (Parameter* p : g.params) {
      Mat delta = g.lr * (p->grad + cfg_.groups.weight_decay * p->value);
      if (cfg_.groups.momentum > 0.0) {
        velocity_[vi] = cfg_.groups.momentum * velocity_[vi] + delta;
        delta = velocity_[vi];
      }
      p->value -= delta;
      sq += delta.squaredNorm();
      ++vi;
    }
    const double norm = std::sqrt(sq);
    switch (g.group) {
      case ParamGroup::Norm: report.update_norm_norm = norm; break;
      case ParamGroup::Aan: report.update_norm_aan = norm; break;
      case ParamGroup::Psi: report.update_norm_psi = norm; break;
      case ParamGroup::Ladder: report.update_norm_ladder = norm; break;
      default: break;
    }
  }
}

AdaptReport AdaptEngine::adapt_batch(const Batch& batch) {
  if (batch.size() < 1) throw std::invalid_argument("adapt_batch: empty batch");
  AdaptReport report;

  std::vector<Parameter*> flat_active;
  for (const GroupRef& g : active_)
    for (Parameter* p : g.params) flat_active.push_back(p);

  // Pass one: forward, losses, predictions (pre-update by default).
  zero_grads();
  Tape tape1;
  BatchEval ev1 = evaluate(tape1, state_, batch, cfg_);
  fill_predictions(ev1, cfg_, state_.cfg.classes, report);
  report.loss_entropy = ev1.l_ent.scalar();
  report.loss_ood = ev1.l_ood.scalar();
  report.loss_sim = ev1.l_sim.scalar();

  if (cfg_.single_pass) {
    Var total = total_loss(ev1.l_ent, ev1.l_ood, ev1.l_sim, cfg_.weights);
    report.loss1 = total.scalar();
    report.loss2 = report.loss1;
    if (!std::isfinite(report.loss1)) {
      report.step_skipped = true;
      return report;
    }
    tape1.backward(total);
    apply_update(report);
  } else {
    Var l1 = sam_loss_first(ev1.l_ent, ev1.l_ood, ev1.l_sim, cfg_.weights);
    report.loss1 = l1.scalar();
    if (!std::isfinite(report.loss1)) {
      report.step_skipped = true;
      return report;
    }
    tape1.backward(l1);

    Eigen::VectorXd g1 = flatten_grads(flat_active);
    Eigen::VectorXd eps = sam_perturbation(g1, cfg_.sam.rho);
    report.eps_norm = eps.norm();
    report.sam_degenerate = g1.norm() < 1e-12;
    if (!eps.allFinite()) {
      report.step_skipped = true;
      return report;
    }

    // Virtual ascent; snapshot for bitwise restoration.
    std::vector<Mat> snapshot;
    snapshot.reserve(flat_active.size());
    for (Parameter* p : flat_active) snapshot.push_back(p->value);
    add_to_values(flat_active, eps);

    zero_grads();
    Tape tape2;
    BatchEval ev2 = evaluate(tape2, state_, batch, cfg_);
    Var l2 = sam_loss_second(ev2.l_ent, ev2.l_ood, cfg_.weights);
    report.loss2 = l2.scalar();
    if (!std::isfinite(report.loss2)) {
      for (std::size_t i = 0; i < flat_active.size(); ++i) flat_active[i]->value = snapshot[i];
      report.step_skipped = true;
      return report;
    }
    tape2.backward(l2);

    for (std::size_t i = 0; i < flat_active.size(); ++i) flat_active[i]->value = snapshot[i];
    apply_update(report);
  }

  if (cfg_.predict_after_update) {
    Tape tape3;
    BatchEval ev3 = evaluate(tape3, state_, batch, cfg_);
    fill_predictions(ev3, cfg_, state_.cfg.classes, report);
  }
  return report;
}

std::vector<AdaptReport> AdaptEngine::run_stream(const std::vector<Batch>& stream) {
  std::vector<AdaptReport> reports;
  reports.reserve(stream.size());
  for (const Batch& b : stream) reports.push_back(adapt_batch(b));
  return reports;
}

}  // namespace owtta
