#include "owtta/stream.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace owtta {

namespace {

// Explicit Fisher-Yates so stream bytes do not depend on library internals.
template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

// Product of disjoint Givens rotations over seeded coordinate pairs.
Mat token_rotation(int dim, double angle, Rng& rng) {
  Mat r = Mat::Identity(dim, dim);
  std::vector<int> idx(dim);
  std::iota(idx.begin(), idx.end(), 0);
  shuffle_in_place(idx, rng);
  for (int k = 0; k + 1 < dim; k += 2) {
    const int a = idx[k], b = idx[k + 1];
    const double theta = (rng() % 2 == 0 ? 1.0 : -1.0) * angle;
    Mat g = Mat::Identity(dim, dim);
    g(a, a) = std::cos(theta);
    g(b, b) = std::cos(theta);
    g(a, b) = -std::sin(theta);
    g(b, a) = std::sin(theta);
    r = g * r;
  }
  return r;
}

// Frozen-model class probabilities for one clean token grid.
Eigen::VectorXd frozen_probs(ModelState& state, const Mat& tokens) {
  Tape tape;
  ForwardResult fwd = forward_collect(tape, state, {tokens}, /*use_aan=*/false);
  Var p = ad::softmax_rows(fwd.logits);
  return p.value().row(0).transpose();
}

}  // namespace

void StreamConfig::validate(const BackboneConfig& backbone) const {
  if (id_classes < 1 || id_classes > backbone.classes)
    throw std::invalid_argument("stream: id_classes must be in [1, backbone classes]");
  if (ood_ratio < 0.0 || ood_ratio >= 1.0)
    throw std::invalid_argument("stream: ood_ratio must be in [0,1)");
  if (ood_ratio > 0.0 && ood_classes < 1)
    throw std::invalid_argument("stream: ood_ratio > 0 needs at least one OOD class");
  if (ood_classes < 0) throw std::invalid_argument("stream: ood_classes must be nonnegative");
  if (batches < 1 || batch_size < 1)
    throw std::invalid_argument("stream: batches and batch_size must be >= 1");
  if (shift_strength < 0.0) throw std::invalid_argument("stream: shift_strength must be >= 0");
  if (proto_jitter < 0.0 || proto_candidates < 1 || rotation_scale < 0.0 || noise_scale < 0.0 ||
      ood_quantile < 0.0 || ood_quantile >= 1.0)
    throw std::invalid_argument("stream: invalid geometry settings");
}

std::vector<Batch> gen_stream(const StreamConfig& cfg, const BackboneConfig& backbone_cfg) {
  cfg.validate(backbone_cfg);
  const int p = backbone_cfg.patches;
  const int d = backbone_cfg.dim;
  Rng rng(cfg.seed);

  const double angle = cfg.shift_strength * cfg.rotation_scale;
  const Mat rotation_t = token_rotation(d, angle, rng).transpose();
  const double noise_std = cfg.shift_strength * cfg.noise_scale;

  ModelState frozen = init_backbone(backbone_cfg);

  // Prototype candidates are scored on corrupted probe samples, since the
  // stream the model will actually see is corrupted.
  auto corrupt = [&](const Mat& x, Rng& r) {
    Mat y = x * rotation_t;
    if (noise_std > 0.0) y += randn(r, p, d, noise_std);
    return y;
  };
  constexpr int kProbes = 3;
  struct Scored {
    Mat proto;
    Eigen::VectorXd mean_probs;  // frozen-model probabilities, corrupted
    double mean_entropy;
  };
  auto score = [&](Mat proto) {
    Scored s;
    s.mean_probs = Eigen::VectorXd::Zero(backbone_cfg.classes);
    for (int k = 0; k < kProbes; ++k) {
      Mat sample = corrupt(proto + randn(rng, p, d, cfg.proto_jitter), rng);
      s.mean_probs += frozen_probs(frozen, sample);
    }
    s.mean_probs /= kProbes;
    s.mean_entropy = 0.0;
    for (Eigen::Index c = 0; c < s.mean_probs.size(); ++c)
      if (s.mean_probs(c) > 0.0) s.mean_entropy -= s.mean_probs(c) * std::log(s.mean_probs(c));
    s.proto = std::move(proto);
    return s;
  };

  // ID prototypes: per class, the candidate the frozen model assigns to
  // that class with the highest corrupted confidence. If a class never
  // wins an argmax, fall back to the candidate with the largest
  // probability for it.
  std::vector<Scored> candidates;
  candidates.reserve(cfg.proto_candidates);
  for (int i = 0; i < cfg.proto_candidates; ++i) candidates.push_back(score(randn(rng, p, d)));
  std::vector<Mat> id_protos(cfg.id_classes);
  for (int c = 0; c < cfg.id_classes; ++c) {
    int best = -1;
    double best_conf = -1.0;
    for (int i = 0; i < cfg.proto_candidates; ++i) {
      Eigen::Index arg = 0;
      const double conf = candidates[i].mean_probs.maxCoeff(&arg);
      if (static_cast<int>(arg) == c && conf > best_conf) {
        best_conf = conf;
        best = i;
      }
    }
    if (best < 0) {
      for (int i = 0; i < cfg.proto_candidates; ++i) {
        if (candidates[i].mean_probs(c) > best_conf) {
          best_conf = candidates[i].mean_probs(c);
          best = i;
        }
      }
    }
    id_protos[c] = candidates[best].proto;
  }

  // OOD prototypes: fresh draws at the same radius, taken from the
  // less-confident side of a candidate pool (evenly spaced above the
  // ood_quantile of corrupted frozen-model entropy) so they act like
  // genuinely novel classes without being trivially separable.
  std::vector<Mat> ood_protos;
  if (cfg.ood_classes > 0) {
    const int pool = std::max(64, 16 * cfg.ood_classes);
    std::vector<Scored> ood_cands;
    ood_cands.reserve(pool);
    for (int i = 0; i < pool; ++i) ood_cands.push_back(score(randn(rng, p, d)));
    std::vector<int> order(pool);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return ood_cands[a].mean_entropy < ood_cands[b].mean_entropy;
    });
    ood_protos.reserve(cfg.ood_classes);
    for (int k = 0; k < cfg.ood_classes; ++k) {
      const double frac =
          cfg.ood_quantile + (1.0 - cfg.ood_quantile) * (k + 0.5) / cfg.ood_classes;
      const int idx = std::min(pool - 1, static_cast<int>(frac * pool));
      ood_protos.push_back(ood_cands[order[idx]].proto);
    }
  }

  const int n = cfg.batch_size;
  const int n_ood = static_cast<int>(std::floor(cfg.ood_ratio * n));

  std::vector<Batch> stream;
  stream.reserve(cfg.batches);
  for (int t = 0; t < cfg.batches; ++t) {
    Batch batch;
    batch.tokens.reserve(n);
    batch.labels.resize(n);
    batch.ood_flags.assign(n, 0);

    std::vector<std::uint8_t> flags(n, 0);
    for (int i = 0; i < n_ood; ++i) flags[i] = 1;
    shuffle_in_place(flags, rng);

    for (int i = 0; i < n; ++i) {
      Mat base;
      if (flags[i]) {
        const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.ood_classes));
        base = ood_protos[k];
        batch.labels[i] = cfg.id_classes + k;  // outside the classifier's label set
        batch.ood_flags[i] = 1;
      } else {
        const int c = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.id_classes));
        base = id_protos[c];
        batch.labels[i] = c;
      }
      Mat x = base + randn(rng, p, d, cfg.proto_jitter);
      x = x * rotation_t;
      if (noise_std > 0.0) x += randn(rng, p, d, noise_std);
      batch.tokens.push_back(std::move(x));
    }
    stream.push_back(std::move(batch));
  }
  return stream;
}

}  // namespace owtta
