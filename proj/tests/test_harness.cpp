#include "doctest.h"

#include "owtta/harness.hpp"
#include "owtta/metrics.hpp"
#include "owtta/rng.hpp"

#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

using namespace owtta;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.layers = 2;
  b.dim = 8;
  b.heads = 2;
  b.patches = 4;
  b.classes = 4;
  b.seed = 3;
  return b;
}

StreamConfig tiny_stream() {
  StreamConfig s;
  s.id_classes = 4;
  s.ood_classes = 2;
  s.ood_ratio = 0.25;
  s.shift_strength = 0.4;
  s.batches = 4;
  s.batch_size = 8;
  s.seed = 77;
  s.proto_candidates = 64;
  return s;
}

}  // namespace

TEST_CASE("accuracy: ID-only denominator") {
  CHECK(*accuracy({1, 2, 3}, {1, 2, 3}, {0, 0, 0}) == 1.0);
  CHECK(*accuracy({1, 0, 3, 9, 7}, {1, 2, 3, 9, 9}, {0, 0, 1, 1, 0}) ==
        doctest::Approx(1.0 / 3.0));
  CHECK(!accuracy({1, 2}, {1, 2}, {1, 1}).has_value());
  // The spec's 4-ID/1-correct case.
  CHECK(*accuracy({0, 0, 0, 0}, {0, 1, 2, 3}, {0, 0, 0, 0}) == doctest::Approx(0.25));
  CHECK_THROWS_AS(accuracy({1}, {1, 2}, {0, 0}), std::invalid_argument);
}

TEST_CASE("auroc: separation, ties, worked example, degenerate input") {
  CHECK(*auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(*auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK(*auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(!auroc({0.3, 0.4}, {0, 0}).has_value());
  CHECK(!auroc({0.3, 0.4}, {1, 1}).has_value());
}

TEST_CASE("auroc: fast path equals the pairwise oracle on 200 random tied instances") {
  std::mt19937_64 rng(2024);
  double max_diff = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const int m = 2 + static_cast<int>(rng() % 63);
    std::vector<double> scores(m);
    std::vector<std::uint8_t> flags(m);
    bool has0 = false, has1 = false;
    for (int i = 0; i < m; ++i) {
      // Coarse grid so ties actually happen.
      scores[i] = static_cast<double>(rng() % 8) / 4.0;
      flags[i] = rng() % 2;
      (flags[i] ? has1 : has0) = true;
    }
    if (!has0 || !has1) {
      CHECK(!auroc(scores, flags).has_value());
      continue;
    }
    const double fast = *auroc(scores, flags);
    const double brute = *auroc_bruteforce(scores, flags);
    max_diff = std::max(max_diff, std::abs(fast - brute));
  }
  CHECK(max_diff < 1e-12);
}

TEST_CASE("auroc: negating scores maps a to 1-a") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int rep = 0; rep < 30; ++rep) {
    const int m = 10 + static_cast<int>(rng() % 20);
    std::vector<double> scores(m);
    std::vector<std::uint8_t> flags(m);
    for (int i = 0; i < m; ++i) {
      scores[i] = dist(rng);
      flags[i] = rng() % 2;
    }
    flags[0] = 0;
    flags[1] = 1;
    std::vector<double> neg(m);
    for (int i = 0; i < m; ++i) neg[i] = -scores[i];
    CHECK(*auroc(neg, flags) == doctest::Approx(1.0 - *auroc(scores, flags)).epsilon(1e-12));
  }
}

TEST_CASE("h_score: harmonic mean identities, paper-table anchors") {
  CHECK(h_score(0.0, 0.0) == 0.0);
  CHECK(h_score(0.5, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(h_score(65.2, 85.1) == doctest::Approx(73.7).epsilon(0.01));
  CHECK(h_score(64.7, 82.9) == doctest::Approx(72.3).epsilon(0.01));
  CHECK(h_score(63.5, 75.3) == doctest::Approx(69.2).epsilon(0.01));
  // Harmonic-mean bounds.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const double a = u(rng), b = u(rng);
    const double h = h_score(a, b);
    CHECK(h <= (a + b) / 2.0 + 1e-12);
    CHECK(h <= 2.0 * std::min(a, b) + 1e-12);
  }
}

TEST_CASE("summary metrics are invariant to within-batch permutation") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist(0.0, 1.0);
  const int n = 24;
  std::vector<int> preds(n), labels(n);
  std::vector<double> scores(n);
  std::vector<std::uint8_t> flags(n);
  for (int i = 0; i < n; ++i) {
    preds[i] = static_cast<int>(rng() % 4);
    labels[i] = static_cast<int>(rng() % 4);
    scores[i] = dist(rng);
    flags[i] = (i % 4 == 0) ? 1 : 0;
  }
  MetricsSummary a = summarize(preds, labels, scores, flags);
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = (i * 7 + 3) % n;  // a permutation of 0..n-1
  std::vector<int> p2(n), l2(n);
  std::vector<double> s2(n);
  std::vector<std::uint8_t> f2(n);
  for (int i = 0; i < n; ++i) {
    p2[i] = preds[idx[i]];
    l2[i] = labels[idx[i]];
    s2[i] = scores[idx[i]];
    f2[i] = flags[idx[i]];
  }
  MetricsSummary b = summarize(p2, l2, s2, f2);
  CHECK(*a.acc == doctest::Approx(*b.acc).epsilon(1e-14));
  CHECK(*a.auc == doctest::Approx(*b.auc).epsilon(1e-14));
}

TEST_CASE("gen_stream: flags, determinism, deterministic OOD counts, validation") {
  BackboneConfig bc = tiny_backbone();
  StreamConfig sc = tiny_stream();

  auto s1 = gen_stream(sc, bc);
  auto s2 = gen_stream(sc, bc);
  REQUIRE(s1.size() == static_cast<std::size_t>(sc.batches));
  for (std::size_t t = 0; t < s1.size(); ++t) {
    int n_ood = 0;
    for (auto f : s1[t].ood_flags) n_ood += f;
    CHECK(n_ood == 2);  // floor(0.25 * 8)
    CHECK(s1[t].labels == s2[t].labels);
    CHECK(s1[t].ood_flags == s2[t].ood_flags);
    for (std::size_t i = 0; i < s1[t].tokens.size(); ++i)
      CHECK((s1[t].tokens[i] - s2[t].tokens[i]).cwiseAbs().maxCoeff() == 0.0);
  }

  StreamConfig no_ood = sc;
  no_ood.ood_ratio = 0.0;
  for (const Batch& b : gen_stream(no_ood, bc))
    for (auto f : b.ood_flags) CHECK(f == 0);

  StreamConfig other_seed = sc;
  other_seed.seed = 78;
  auto s3 = gen_stream(other_seed, bc);
  CHECK((s3[0].tokens[0] - s1[0].tokens[0]).cwiseAbs().maxCoeff() > 0.0);

  StreamConfig bad = sc;
  bad.ood_ratio = 1.0;
  CHECK_THROWS_AS(gen_stream(bad, bc), std::invalid_argument);
  bad = sc;
  bad.ood_ratio = 0.25;
  bad.ood_classes = 0;
  CHECK_THROWS_AS(gen_stream(bad, bc), std::invalid_argument);
  bad = sc;
  bad.id_classes = bc.classes + 1;
  CHECK_THROWS_AS(gen_stream(bad, bc), std::invalid_argument);
}

TEST_CASE("gen_stream: hidden OOD labels sit outside the classifier range") {
  BackboneConfig bc = tiny_backbone();
  StreamConfig sc = tiny_stream();
  for (const Batch& b : gen_stream(sc, bc))
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (b.ood_flags[i])
        CHECK(b.labels[i] >= sc.id_classes);
      else
        CHECK(b.labels[i] < sc.id_classes);
    }
}

TEST_CASE("CSV emission: header plus T rows, rerun byte-identical") {
  BackboneConfig bc = tiny_backbone();
  StreamConfig sc = tiny_stream();
  FullConfig cfg;
  cfg.backbone = bc;
  cfg.stream = sc;
  cfg.stream.id_classes = 4;

  auto stream = gen_stream(cfg.stream, bc);
  auto run_once = [&](const std::string& csv, const std::string& json) {
    ModelState state = init_backbone(bc);
    RunOutcome out = run_adaptation(state, stream, cfg.adapt);
    write_reports_csv(csv, out.reports, stream);
    write_summary_json(json, cfg, out);
  };
  run_once("run_a.csv", "run_a.json");
  run_once("run_b.csv", "run_b.json");

  const std::string a = slurp("run_a.csv");
  CHECK(a == slurp("run_b.csv"));
  CHECK(slurp("run_a.json") == slurp("run_b.json"));

  int lines = 0;
  for (char c : a) lines += (c == '\n');
  CHECK(lines == sc.batches + 1);
  CHECK(a.rfind("# batch,", 0) == 0);

  // JSON summary round-trips through the parser.
  auto parsed = nlohmann::json::parse(slurp("run_a.json"));
  CHECK(parsed["spec_version"] == 1);
  CHECK(parsed["config"]["stream"]["seed"] == 77);
  CHECK(parsed["frozen"]["backbone_checksum_before"] ==
        parsed["frozen"]["backbone_checksum_after"]);
  CHECK(nlohmann::json::parse(parsed.dump(2)) == parsed);

  std::remove("run_a.csv");
  std::remove("run_b.csv");
  std::remove("run_a.json");
  std::remove("run_b.json");
}

TEST_CASE("config: parse, round trip, rejection of unknown keys") {
  FullConfig def;
  const std::string text = config_to_text(def);
  FullConfig parsed = parse_config_text(text);
  CHECK(config_to_text(parsed) == text);
  CHECK(parsed.adapt.fusion.h_thr_ood == -1.0);
  CHECK(parsed.stream.batches == def.stream.batches);

  CHECK_THROWS_AS(parse_config_text("[nope]\nx = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[adapt]\nbogus_key = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("key_without_section = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[adapt]\nrho = not_a_number\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[adapt]\nfusion_alpha = 1.5\n"), std::invalid_argument);

  FullConfig commented = parse_config_text("# comment\n[adapt]\nrho = 0.1 ; inline\n");
  CHECK(commented.adapt.sam.rho == 0.1);
}

TEST_CASE("metrics_over_range: quarters partition the stream") {
  BackboneConfig bc = tiny_backbone();
  StreamConfig sc = tiny_stream();
  auto stream = gen_stream(sc, bc);
  ModelState state = init_backbone(bc);
  RunOutcome out = run_adaptation(state, stream, AdaptConfig{});
  MetricsSummary full = metrics_over_range(out.reports, stream, 0, stream.size());
  CHECK(full.acc.has_value());
  CHECK(full.auc.has_value());
  MetricsSummary first = metrics_over_range(out.reports, stream, 0, 2);
  MetricsSummary last = metrics_over_range(out.reports, stream, 2, 4);
  CHECK(first.acc.has_value());
  CHECK(last.acc.has_value());
  CHECK_THROWS_AS(metrics_over_range(out.reports, stream, 3, 99), std::invalid_argument);
}
