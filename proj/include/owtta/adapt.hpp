#pragma once

// Test-time adaptation loop: per batch, a first forward/backward on the
// pass-one objective, a virtual ascent to the SAM perturbation, a second
// forward/backward on the pass-two objective, exact parameter restoration
// and a per-group SGD step. Predictions come from the pre-update forward
// unless predict_after_update is set.

#include "owtta/backbone.hpp"
#include "owtta/batch.hpp"
#include "owtta/losses.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

namespace owtta {

struct ParamGroupsConfig {
  double lr_norm = 0.01;
  double lr_aan = 0.0005;
  double lr_psi = 0.1;
  double lr_ladder = 0.001;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool adapt_norm_layers = true;

  void validate() const;
};

struct SamConfig {
  double rho = 0.05;

  void validate() const;
};

struct AdaptConfig {
  ParamGroupsConfig groups;
  SamConfig sam;
  LossWeights weights;
  FusionConfig fusion;
  bool enable_aan = true;
  bool enable_hln = true;
  bool differentiate_weights = false;
  bool predict_after_update = false;
  bool single_pass = false;  // one backward on the beta-weighted total loss

  void validate(int classes) const;
};

struct AdaptReport {
  Mat p_final;                   // N x C fused probabilities
  std::vector<double> scores;    // final OOD scores (entropy of p_final)
  std::vector<int> predictions;  // argmax of p_final
  int mask_count = 0;
  double loss_entropy = 0.0;
  double loss_ood = 0.0;
  double loss_sim = 0.0;
  double loss1 = 0.0;
  double loss2 = 0.0;
  double eps_norm = 0.0;       // recorded ||eps_hat||
  bool sam_degenerate = false; // first-pass gradient below threshold
  bool step_skipped = false;   // non-finite loss, parameters left untouched
  int sim_zero_norm_pairs = 0;
  double update_norm_norm = 0.0;
  double update_norm_aan = 0.0;
  double update_norm_psi = 0.0;
  double update_norm_ladder = 0.0;
};

/// eps_hat = rho * g / ||g||2; the zero vector when ||g||2 < 1e-12.
Eigen::VectorXd sam_perturbation(const Eigen::VectorXd& grads, double rho);

struct TapedLosses;

/// Records the full per-batch loss pipeline on one tape; used by the
/// gradient-check suite and tests.
TapedLosses build_losses(Tape& tape, ModelState& state, const Batch& batch,
                         const AdaptConfig& cfg);

class AdaptEngine {
 public:
  AdaptEngine(ModelState& state, AdaptConfig cfg);

  AdaptReport adapt_batch(const Batch& batch);
  std::vector<AdaptReport> run_stream(const std::vector<Batch>& stream);

  const AdaptConfig& config() const { return cfg_; }

 private:
  struct GroupRef {
    ParamGroup group;
    double lr;
    std::vector<Parameter*> params;
  };

  void zero_grads();
  void apply_update(AdaptReport& report);

  ModelState& state_;
  AdaptConfig cfg_;
  std::vector<GroupRef> active_;
  std::vector<Mat> velocity_;  // per active parameter, used when momentum > 0
};

}  // namespace owtta
