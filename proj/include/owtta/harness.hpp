#pragma once

// Run orchestration and report emission: adaptation over a stream with
// stream-level metrics, the per-batch CSV behind AUROC-over-stream curves,
// and the JSON run summary.

#include "owtta/adapt.hpp"
#include "owtta/config.hpp"
#include "owtta/metrics.hpp"
#include "owtta/stream.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace owtta {

struct RunCounters {
  long mask_total = 0;
  int skipped_steps = 0;
  int sam_degenerate_steps = 0;
  long sim_zero_norm_pairs = 0;
};

struct RunOutcome {
  std::vector<AdaptReport> reports;
  MetricsSummary metrics;
  RunCounters counters;
  std::uint64_t backbone_checksum_before = 0;
  std::uint64_t backbone_checksum_after = 0;
};

RunOutcome run_adaptation(ModelState& state, const std::vector<Batch>& stream,
                          const AdaptConfig& cfg);

/// Metrics over the batch range [from, to).
MetricsSummary metrics_over_range(const std::vector<AdaptReport>& reports,
                                  const std::vector<Batch>& stream, std::size_t from,
                                  std::size_t to);

/// One comment-header line plus one data row per batch with running
/// metrics, mask counts and loss values.
void write_reports_csv(const std::string& path, const std::vector<AdaptReport>& reports,
                       const std::vector<Batch>& stream);

/// Versioned JSON summary: config echo (including seeds), final metrics,
/// counters and frozen-group checksums.
void write_summary_json(const std::string& path, const FullConfig& cfg,
                        const RunOutcome& outcome);

std::string summary_json_text(const FullConfig& cfg, const RunOutcome& outcome);

}  // namespace owtta
