// Command-line front end: run an adaptation stream, check gradients,
// sweep hyperparameters, or cross-check the metric oracles.

#include "CLI11.hpp"

#include "owtta/checkpoint.hpp"
#include "owtta/gradsuite.hpp"
#include "owtta/harness.hpp"
#include "owtta/rng.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace {

using namespace owtta;

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            std::optional<int> batches, const std::string& out_dir,
            const std::string& load_path, const std::string& save_path) {
  FullConfig cfg = parse_config_file(config_path);
  if (seed) cfg.stream.seed = *seed;
  if (batches) cfg.stream.batches = *batches;
  cfg.validate();

  ModelState state = [&] {
    if (load_path.empty()) return init_backbone(cfg.backbone);
    ModelState loaded = load_state(load_path);
    if (loaded.cfg.layers != cfg.backbone.layers || loaded.cfg.dim != cfg.backbone.dim ||
        loaded.cfg.heads != cfg.backbone.heads || loaded.cfg.patches != cfg.backbone.patches ||
        loaded.cfg.classes != cfg.backbone.classes)
      throw std::runtime_error("loaded checkpoint extents do not match [backbone] config");
    return loaded;
  }();

  std::vector<Batch> stream = gen_stream(cfg.stream, cfg.backbone);
  RunOutcome outcome = run_adaptation(state, stream, cfg.adapt);

  std::filesystem::create_directories(out_dir);
  const std::string csv = (std::filesystem::path(out_dir) / "report.csv").string();
  const std::string json = (std::filesystem::path(out_dir) / "summary.json").string();
  write_reports_csv(csv, outcome.reports, stream);
  write_summary_json(json, cfg, outcome);
  if (!save_path.empty()) save_state(save_path, state);

  std::printf("batches=%d N=%d seed=%llu\n", cfg.stream.batches, cfg.stream.batch_size,
              static_cast<unsigned long long>(cfg.stream.seed));
  std::printf("ACC=%s AUROC=%s H-score=%s\n", opt_str(outcome.metrics.acc).c_str(),
              opt_str(outcome.metrics.auc).c_str(), opt_str(outcome.metrics.h).c_str());
  std::printf("mask_total=%ld skipped=%d degenerate=%d\n", outcome.counters.mask_total,
              outcome.counters.skipped_steps, outcome.counters.sam_degenerate_steps);
  std::printf("wrote %s and %s\n", csv.c_str(), json.c_str());
  if (outcome.backbone_checksum_before != outcome.backbone_checksum_after) {
    std::fprintf(stderr, "error: frozen backbone changed during the run\n");
    return 2;
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int batch_size, double step) {
  GradSuiteResult res = run_gradient_suite(seed, batch_size, step);
  std::printf("toy model: 2 layers, d=16, P=8, C=4, N=%d, h=%g\n", batch_size, step);
  std::printf("mask: %d of %d selected, margin to threshold %.3g\n", res.mask_count, batch_size,
              res.mask_margin);
  for (const auto& e : res.entries)
    std::printf("  %-34s max rel err %.3e  (%.2fs)\n", e.loss.c_str(), e.max_rel_error,
                e.runtime_seconds);
  const double worst = res.worst();
  std::printf("worst: %.3e (tolerance 1e-4)\n", worst);
  return worst < 1e-4 ? 0 : 1;
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              std::vector<double> values, const std::string& out_dir) {
  FullConfig base = parse_config_file(config_path);
  if (values.empty()) {
    if (param == "fusion_alpha") values = {0.0, 0.3, 0.5, 0.7, 1.0};
    else if (param == "lambda1") values = {0.0, 0.001, 0.01, 0.1};
    else if (param == "lambda2") values = {0.0, 0.0001, 0.001, 0.01};
  }

  std::filesystem::create_directories(out_dir);
  const std::string csv_path =
      (std::filesystem::path(out_dir) / ("sweep_" + param + ".csv")).string();
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open " + csv_path);
  csv << "# " << param << ",acc,auroc,h_score\n";

  std::printf("%-12s %8s %8s %8s\n", param.c_str(), "ACC", "AUROC", "H-score");
  for (double v : values) {
    FullConfig cfg = base;
    if (param == "fusion_alpha") cfg.adapt.fusion.alpha = v;
    else if (param == "lambda1") cfg.adapt.weights.lambda1 = v;
    else if (param == "lambda2") cfg.adapt.weights.lambda2 = v;
    else throw std::runtime_error("sweep: unknown parameter " + param);
    cfg.validate();

    ModelState state = init_backbone(cfg.backbone);
    std::vector<Batch> stream = gen_stream(cfg.stream, cfg.backbone);
    RunOutcome outcome = run_adaptation(state, stream, cfg.adapt);
    std::printf("%-12g %8s %8s %8s\n", v, opt_str(outcome.metrics.acc).c_str(),
                opt_str(outcome.metrics.auc).c_str(), opt_str(outcome.metrics.h).c_str());
    csv << v << ',' << (outcome.metrics.acc ? std::to_string(*outcome.metrics.acc) : "nan")
        << ',' << (outcome.metrics.auc ? std::to_string(*outcome.metrics.auc) : "nan") << ','
        << (outcome.metrics.h ? std::to_string(*outcome.metrics.h) : "nan") << '\n';
  }
  std::printf("wrote %s\n", csv_path.c_str());
  return 0;
}

int cmd_oracle(int instances) {
  std::mt19937_64 rng(12345);

  // AUROC: rank-based implementation against the O(M^2) pairwise count.
  double max_auroc_diff = 0.0;
  int compared = 0;
  while (compared < instances) {
    const int m = 2 + static_cast<int>(rng() % 63);
    std::vector<double> scores(m);
    std::vector<std::uint8_t> flags(m);
    bool has0 = false, has1 = false;
    for (int i = 0; i < m; ++i) {
      scores[i] = static_cast<double>(rng() % 16) / 8.0;  // coarse grid forces ties
      flags[i] = rng() % 2;
      (flags[i] ? has1 : has0) = true;
    }
    if (!has0 || !has1) continue;
    ++compared;
    max_auroc_diff =
        std::max(max_auroc_diff, std::abs(*auroc(scores, flags) - *auroc_bruteforce(scores, flags)));
  }
  std::printf("auroc: %d instances, max |fast - brute| = %.3e\n", compared, max_auroc_diff);

  // Patch similarity: taped loss against a plain double-loop recomputation.
  Rng trng(999);
  double max_sim_diff = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int p = 2 + static_cast<int>(trng() % 7);
    const int d = 3 + static_cast<int>(trng() % 6);
    Mat tokens = randn(trng, p, d);
    Tape tape;
    SimLossResult r = sim_loss(tape, {tape.constant(tokens)});
    double brute = 0.0;
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) {
        if (i == j) continue;
        brute += tokens.row(i).dot(tokens.row(j)) /
                 (tokens.row(i).norm() * tokens.row(j).norm());
      }
    brute *= -1.0 / p;
    max_sim_diff = std::max(max_sim_diff, std::abs(r.loss.scalar() - brute));
  }
  std::printf("sim loss: 100 instances, max |taped - brute| = %.3e\n", max_sim_diff);

  const bool ok = max_auroc_diff < 1e-12 && max_sim_diff < 1e-12;
  std::printf("%s (tolerance 1e-12)\n", ok ? "OK" : "FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"open-world test-time adaptation engine"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", load_path, save_path, sweep_param = "fusion_alpha";
  std::optional<std::uint64_t> seed;
  std::optional<int> batches;
  std::uint64_t gc_seed = 2024;
  int gc_batch = 3, oracle_instances = 200;
  double gc_step = 1e-6;
  std::vector<double> sweep_values;

  CLI::App* run = app.add_subcommand("run", "adapt over a synthetic stream and emit reports");
  run->add_option("config", config_path, "config file")->required();
  run->add_option("--seed", seed, "override the stream seed");
  run->add_option("--batches", batches, "override the batch count");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--load-state", load_path, "start from a checkpoint");
  run->add_option("--save-state", save_path, "write the adapted state");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seed", gc_seed, "toy model seed");
  gradcheck->add_option("--batch-size", gc_batch, "toy batch size");
  gradcheck->add_option("--step", gc_step, "central difference step");

  CLI::App* sweep = app.add_subcommand("sweep", "grid over fusion alpha / lambda1 / lambda2");
  sweep->add_option("config", config_path, "config file")->required();
  sweep->add_option("--param", sweep_param, "fusion_alpha | lambda1 | lambda2");
  sweep->add_option("--values", sweep_values, "grid values")->delimiter(',');
  sweep->add_option("--out", out_dir, "output directory");

  CLI::App* oracle = app.add_subcommand("oracle", "brute-force metric cross-checks");
  oracle->add_option("--instances", oracle_instances, "AUROC instance count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, seed, batches, out_dir, load_path, save_path);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_batch, gc_step);
    if (sweep->parsed()) return cmd_sweep(config_path, sweep_param, sweep_values, out_dir);
    if (oracle->parsed()) return cmd_oracle(oracle_instances);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
