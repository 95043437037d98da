#pragma once

// Stream-level evaluation metrics: ID-only accuracy, rank-based AUROC with
// midrank tie handling, and the harmonic-mean H-score.

#include <cstdint>
#include <optional>
#include <vector>

namespace owtta {

/// Top-1 accuracy over ID-flagged samples only. Empty when the batch holds
/// no ID samples (undefined rather than zero).
std::optional<double> accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                               const std::vector<std::uint8_t>& ood_flags);

/// P(score_ood > score_id) with ties counted 1/2 (Mann-Whitney convention),
/// OOD as the positive class. Empty unless both classes are present.
std::optional<double> auroc(const std::vector<double>& scores,
                            const std::vector<std::uint8_t>& ood_flags);

/// O(M^2) pairwise oracle for auroc(); test/diagnostic reference path.
std::optional<double> auroc_bruteforce(const std::vector<double>& scores,
                                       const std::vector<std::uint8_t>& ood_flags);

/// 2ab/(a+b), 0 when both inputs are 0. Scale-invariant, so it accepts
/// fractions or percentages alike.
double h_score(double acc, double auc);

struct MetricsSummary {
  std::optional<double> acc;
  std::optional<double> auc;
  std::optional<double> h;
};

MetricsSummary summarize(const std::vector<int>& preds, const std::vector<int>& labels,
                         const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& ood_flags);

}  // namespace owtta
