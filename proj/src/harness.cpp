#include "owtta/harness.hpp"

#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace owtta {

namespace {

void collect(const std::vector<AdaptReport>& reports, const std::vector<Batch>& stream,
             std::size_t from, std::size_t to, std::vector<int>& preds, std::vector<int>& labels,
             std::vector<double>& scores, std::vector<std::uint8_t>& flags) {
  for (std::size_t t = from; t < to; ++t) {
    const AdaptReport& r = reports[t];
    const Batch& b = stream[t];
    preds.insert(preds.end(), r.predictions.begin(), r.predictions.end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    scores.insert(scores.end(), r.scores.begin(), r.scores.end());
    flags.insert(flags.end(), b.ood_flags.begin(), b.ood_flags.end());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "nan"; }

std::string hex_u64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

MetricsSummary metrics_over_range(const std::vector<AdaptReport>& reports,
                                  const std::vector<Batch>& stream, std::size_t from,
                                  std::size_t to) {
  if (to > reports.size() || reports.size() != stream.size() || from > to)
    throw std::invalid_argument("metrics_over_range: bad range");
  std::vector<int> preds, labels;
  std::vector<double> scores;
  std::vector<std::uint8_t> flags;
  collect(reports, stream, from, to, preds, labels, scores, flags);
  return summarize(preds, labels, scores, flags);
}

RunOutcome run_adaptation(ModelState& state, const std::vector<Batch>& stream,
                          const AdaptConfig& cfg) {
  RunOutcome out;
  out.backbone_checksum_before = group_checksum(state, ParamGroup::Backbone);
  AdaptEngine engine(state, cfg);
  out.reports = engine.run_stream(stream);
  out.backbone_checksum_after = group_checksum(state, ParamGroup::Backbone);
  out.metrics = metrics_over_range(out.reports, stream, 0, stream.size());
  for (const AdaptReport& r : out.reports) {
    out.counters.mask_total += r.mask_count;
    out.counters.skipped_steps += r.step_skipped ? 1 : 0;
    out.counters.sam_degenerate_steps += r.sam_degenerate ? 1 : 0;
    out.counters.sim_zero_norm_pairs += r.sim_zero_norm_pairs;
  }
  return out;
}

void write_reports_csv(const std::string& path, const std::vector<AdaptReport>& reports,
                       const std::vector<Batch>& stream) {
  if (reports.size() != stream.size())
    throw std::invalid_argument("write_reports_csv: reports/stream length mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "# batch,running_acc,running_auroc,mask_count,loss_entropy,loss_ood,loss_sim,"
        "loss1,loss2,eps_norm\n";
  for (std::size_t t = 0; t < reports.size(); ++t) {
    const MetricsSummary running = metrics_over_range(reports, stream, 0, t + 1);
    const AdaptReport& r = reports[t];
    os << t << ',' << fmt_opt(running.acc) << ',' << fmt_opt(running.auc) << ','
       << r.mask_count << ',' << fmt(r.loss_entropy) << ',' << fmt(r.loss_ood) << ','
       << fmt(r.loss_sim) << ',' << fmt(r.loss1) << ',' << fmt(r.loss2) << ','
       << fmt(r.eps_norm) << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::string summary_json_text(const FullConfig& cfg, const RunOutcome& outcome) {
  nlohmann::json j;
  j["spec_version"] = 1;
  j["config"]["backbone"] = {{"layers", cfg.backbone.layers}, {"dim", cfg.backbone.dim},
                             {"heads", cfg.backbone.heads},   {"patches", cfg.backbone.patches},
                             {"classes", cfg.backbone.classes}, {"seed", cfg.backbone.seed}};
  j["config"]["stream"] = {{"id_classes", cfg.stream.id_classes},
                           {"ood_classes", cfg.stream.ood_classes},
                           {"ood_ratio", cfg.stream.ood_ratio},
                           {"shift_strength", cfg.stream.shift_strength},
                           {"batches", cfg.stream.batches},
                           {"batch_size", cfg.stream.batch_size},
                           {"seed", cfg.stream.seed},
                           {"proto_jitter", cfg.stream.proto_jitter},
                           {"proto_candidates", cfg.stream.proto_candidates},
                           {"ood_quantile", cfg.stream.ood_quantile},
                           {"rotation_scale", cfg.stream.rotation_scale},
                           {"noise_scale", cfg.stream.noise_scale}};
  const AdaptConfig& a = cfg.adapt;
  j["config"]["adapt"] = {{"lr_norm", a.groups.lr_norm},
                          {"lr_aan", a.groups.lr_aan},
                          {"lr_psi", a.groups.lr_psi},
                          {"lr_ladder", a.groups.lr_ladder},
                          {"momentum", a.groups.momentum},
                          {"weight_decay", a.groups.weight_decay},
                          {"adapt_norm_layers", a.groups.adapt_norm_layers},
                          {"rho", a.sam.rho},
                          {"lambda1", a.weights.lambda1},
                          {"lambda2", a.weights.lambda2},
                          {"beta1", a.weights.beta1},
                          {"beta2", a.weights.beta2},
                          {"fusion_alpha", a.fusion.alpha},
                          {"ood_entropy_threshold", a.fusion.h_thr_ood},
                          {"enable_aan", a.enable_aan},
                          {"enable_hln", a.enable_hln},
                          {"differentiate_weights", a.differentiate_weights},
                          {"predict_after_update", a.predict_after_update},
                          {"single_pass", a.single_pass}};
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j["metrics"] = {{"acc", opt(outcome.metrics.acc)},
                  {"auroc", opt(outcome.metrics.auc)},
                  {"h_score", opt(outcome.metrics.h)}};
  j["counters"] = {{"mask_total", outcome.counters.mask_total},
                   {"skipped_steps", outcome.counters.skipped_steps},
                   {"sam_degenerate_steps", outcome.counters.sam_degenerate_steps},
                   {"sim_zero_norm_pairs", outcome.counters.sim_zero_norm_pairs}};
  j["frozen"] = {{"backbone_checksum_before", hex_u64(outcome.backbone_checksum_before)},
                 {"backbone_checksum_after", hex_u64(outcome.backbone_checksum_after)}};
  return j.dump(2) + "\n";
}

void write_summary_json(const std::string& path, const FullConfig& cfg,
                        const RunOutcome& outcome) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << summary_json_text(cfg, outcome);
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace owtta
