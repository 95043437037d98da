#pragma once

// Frozen toy vision transformer. Pre-norm blocks with MLP ratio 2, a class
// token prepended at the input, per-layer class/patch-token traces and a
// classifier head shared between the class-token path and the OOD branch.
// Backbone weights and the head are frozen; only the normalization affines
// (plus the adapter networks) are trainable.

#include "owtta/aan.hpp"
#include "owtta/hln.hpp"
#include "owtta/types.hpp"

#include <cstdint>
#include <vector>

namespace owtta {

struct BackboneConfig {
  int layers = 4;
  int dim = 32;
  int heads = 2;
  int patches = 16;
  int classes = 8;
  std::uint64_t seed = 7;

  void validate() const;
  int head_dim() const { return dim / heads; }
};

struct BlockParams {
  Parameter ln1_gamma, ln1_beta;  // trainable
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gamma, ln2_beta;  // trainable
  Parameter w1, b1, w2, b2;
};

enum class ParamGroup { Backbone, Norm, Aan, Psi, Ladder };

/// Frozen backbone plus the four trainable adapter groups.
struct ModelState {
  BackboneConfig cfg;

  Parameter patch_w, patch_b;  // patch embedding, frozen
  Parameter cls_token;         // 1 x d, frozen
  Parameter pos_embed;         // (P+1) x d, frozen
  std::vector<BlockParams> blocks;
  Parameter ln_f_gamma, ln_f_beta;  // final norm, trainable
  Parameter head_w, head_b;         // shared classifier, frozen

  AanParams aan;
  HlnParams hln;

  std::vector<Parameter*> group(ParamGroup g);
  std::vector<Parameter*> trainable_params();  // norm + aan + psi + ladder, fixed order
  std::vector<Parameter*> all_params();        // checkpoint order
};

/// Deterministic seeded initialization; frozen groups are marked
/// non-trainable so no gradient ever accumulates into them.
ModelState init_backbone(const BackboneConfig& cfg);

/// FNV-1a over the raw bytes of a parameter group's values.
std::uint64_t group_checksum(ModelState& state, ParamGroup g);

/// Per-layer trace of one sample. The final entry holds the tokens the
/// classifier consumes (after the final layer norm).
struct LayerEntry {
  Var cls;               // 1 x d
  Var patch_tokens;      // P x d
  Var q, k, v;           // pre-affine projections, (P+1) x d
  std::vector<Var> attn;  // post-softmax attention rows, one per head
};

struct SampleTrace {
  std::vector<LayerEntry> layers;
  Var logits;  // 1 x C, classifier on the final class token
};

struct ForwardResult {
  std::vector<SampleTrace> samples;
  Var logits;        // N x C
  Var head_w, head_b;  // bound classifier vars for the shared-head OOD path
  HlnVars hln;
};

/// Runs the backbone over a batch of raw token grids (each P x d). With
/// use_aan the Q/K/V of every layer are replaced by their affined versions
/// before attention.
ForwardResult forward_collect(Tape& tape, ModelState& state, const std::vector<Mat>& tokens,
                              bool use_aan);

/// The shared affine head applied to any d-dim token.
Var classify_token(Var token, Var head_w, Var head_b);

}  // namespace owtta
