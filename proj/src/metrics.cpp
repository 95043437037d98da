#include "owtta/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace owtta {

std::optional<double> accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                               const std::vector<std::uint8_t>& ood_flags) {
  if (preds.size() != labels.size() || preds.size() != ood_flags.size())
    throw std::invalid_argument("accuracy: length mismatch");
  std::size_t id_total = 0, correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (ood_flags[i]) continue;
    ++id_total;
    if (preds[i] == labels[i]) ++correct;
  }
  if (id_total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(id_total);
}

std::optional<double> auroc(const std::vector<double>& scores,
                            const std::vector<std::uint8_t>& ood_flags) {
  if (scores.size() != ood_flags.size()) throw std::invalid_argument("auroc: length mismatch");
  const std::size_t m = scores.size();
  std::size_t n_pos = 0;
  for (auto f : ood_flags) n_pos += f ? 1 : 0;
  const std::size_t n_neg = m - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks over tie groups, then the normalized Mann-Whitney U statistic.
  std::vector<double> rank(m);
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i;
    while (j + 1 < m && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t k = 0; k < m; ++k)
    if (ood_flags[k]) rank_sum_pos += rank[k];
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::optional<double> auroc_bruteforce(const std::vector<double>& scores,
                                       const std::vector<std::uint8_t>& ood_flags) {
  if (scores.size() != ood_flags.size())
    throw std::invalid_argument("auroc_bruteforce: length mismatch");
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!ood_flags[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (ood_flags[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

double h_score(double acc, double auc) {
  if (acc + auc <= 0.0) return 0.0;
  return 2.0 * acc * auc / (acc + auc);
}

MetricsSummary summarize(const std::vector<int>& preds, const std::vector<int>& labels,
                         const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& ood_flags) {
  MetricsSummary s;
  s.acc = accuracy(preds, labels, ood_flags);
  s.auc = auroc(scores, ood_flags);
  if (s.acc && s.auc) s.h = h_score(*s.acc, *s.auc);
  return s;
}

}  // namespace owtta
