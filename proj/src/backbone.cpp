#include "owtta/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace owtta {

void BackboneConfig::validate() const {
  if (layers < 1 || dim < 1 || heads < 1 || patches < 1 || classes < 1)
    throw std::invalid_argument("backbone config: all extents must be >= 1");
  if (dim % heads != 0) throw std::invalid_argument("backbone config: dim % heads != 0");
}

namespace {

Parameter frozen(const char* name, Mat v) { return Parameter(name, std::move(v), false); }

}  // namespace

ModelState init_backbone(const BackboneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int d = cfg.dim;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(2 * d));

  ModelState m;
  m.cfg = cfg;
  m.patch_w = frozen("patch_w", randn(rng, d, d, s));
  m.patch_b = frozen("patch_b", Mat::Zero(1, d));
  m.cls_token = frozen("cls_token", randn(rng, 1, d, 0.5));
  m.pos_embed = frozen("pos_embed", randn(rng, cfg.patches + 1, d, 0.1));

  m.blocks.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    BlockParams& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    b.ln1_gamma = Parameter(p + "ln1_gamma", Mat::Ones(1, d));
    b.ln1_beta = Parameter(p + "ln1_beta", Mat::Zero(1, d));
    b.wq = frozen((p + "wq").c_str(), randn(rng, d, d, s));
    b.bq = frozen((p + "bq").c_str(), Mat::Zero(1, d));
    b.wk = frozen((p + "wk").c_str(), randn(rng, d, d, s));
    b.bk = frozen((p + "bk").c_str(), Mat::Zero(1, d));
    b.wv = frozen((p + "wv").c_str(), randn(rng, d, d, s));
    b.bv = frozen((p + "bv").c_str(), Mat::Zero(1, d));
    b.wo = frozen((p + "wo").c_str(), randn(rng, d, d, s));
    b.bo = frozen((p + "bo").c_str(), Mat::Zero(1, d));
    b.ln2_gamma = Parameter(p + "ln2_gamma", Mat::Ones(1, d));
    b.ln2_beta = Parameter(p + "ln2_beta", Mat::Zero(1, d));
    b.w1 = frozen((p + "w1").c_str(), randn(rng, d, 2 * d, s));
    b.b1 = frozen((p + "b1").c_str(), Mat::Zero(1, 2 * d));
    b.w2 = frozen((p + "w2").c_str(), randn(rng, 2 * d, d, s2));
    b.b2 = frozen((p + "b2").c_str(), Mat::Zero(1, d));
  }
  m.ln_f_gamma = Parameter("ln_f_gamma", Mat::Ones(1, d));
  m.ln_f_beta = Parameter("ln_f_beta", Mat::Zero(1, d));
  // Sharper head than the hidden layers: logits spread over a few units,
  // like a trained classifier, so confident predictions reach low entropy.
  m.head_w = frozen("head_w", randn(rng, d, cfg.classes, 3.0 * s));
  m.head_b = frozen("head_b", Mat::Zero(1, cfg.classes));

  m.aan = init_aan(d, rng);
  m.hln = init_hln(cfg.layers, d, rng);
  return m;
}

std::vector<Parameter*> ModelState::group(ParamGroup g) {
  std::vector<Parameter*> out;
  switch (g) {
    case ParamGroup::Backbone:
      out = {&patch_w, &patch_b, &cls_token, &pos_embed};
      for (BlockParams& b : blocks)
        for (Parameter* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.w1,
                             &b.b1, &b.w2, &b.b2})
          out.push_back(p);
      out.push_back(&head_w);
      out.push_back(&head_b);
      break;
    case ParamGroup::Norm:
      for (BlockParams& b : blocks)
        for (Parameter* p : {&b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta})
          out.push_back(p);
      out.push_back(&ln_f_gamma);
      out.push_back(&ln_f_beta);
      break;
    case ParamGroup::Aan:
      out = aan.params();
      break;
    case ParamGroup::Psi:
      out = hln.psi_params();
      break;
    case ParamGroup::Ladder:
      out = hln.ladder_params();
      break;
  }
  return out;
}

std::vector<Parameter*> ModelState::trainable_params() {
  std::vector<Parameter*> out;
  for (ParamGroup g : {ParamGroup::Norm, ParamGroup::Aan, ParamGroup::Psi, ParamGroup::Ladder})
    for (Parameter* p : group(g)) out.push_back(p);
  return out;
}

std::vector<Parameter*> ModelState::all_params() {
  std::vector<Parameter*> out;
  for (ParamGroup g : {ParamGroup::Backbone, ParamGroup::Norm, ParamGroup::Aan, ParamGroup::Psi,
                       ParamGroup::Ladder})
    for (Parameter* p : group(g)) out.push_back(p);
  return out;
}

std::uint64_t group_checksum(ModelState& state, ParamGroup g) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (Parameter* p : state.group(g)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = sizeof(double) * static_cast<std::size_t>(p->value.size());
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

Var classify_token(Var token, Var head_w, Var head_b) {
  if (token.cols() != head_w.rows())
    throw std::invalid_argument("classify_token: dimension mismatch");
  return ad::affine(token, head_w, head_b);
}

ForwardResult forward_collect(Tape& tape, ModelState& state, const std::vector<Mat>& tokens,
                              bool use_aan) {
  const BackboneConfig& cfg = state.cfg;
  const int d = cfg.dim;
  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (tokens.empty()) throw std::invalid_argument("forward_collect: empty batch");
  for (const Mat& t : tokens)
    if (t.rows() != cfg.patches || t.cols() != d)
      throw std::invalid_argument("forward_collect: token grid must be P x d");

  // One binding per parameter per tape, shared by all samples.
  Var patch_w = tape.param(state.patch_w), patch_b = tape.param(state.patch_b);
  Var cls_tok = tape.param(state.cls_token), pos = tape.param(state.pos_embed);
  struct BlockVars {
    Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<BlockVars> bv(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    BlockParams& b = state.blocks[l];
    bv[l] = BlockVars{tape.param(b.ln1_gamma), tape.param(b.ln1_beta), tape.param(b.wq),
                      tape.param(b.bq),        tape.param(b.wk),       tape.param(b.bk),
                      tape.param(b.wv),        tape.param(b.bv),       tape.param(b.wo),
                      tape.param(b.bo),        tape.param(b.ln2_gamma), tape.param(b.ln2_beta),
                      tape.param(b.w1),        tape.param(b.b1),       tape.param(b.w2),
                      tape.param(b.b2)};
  }
  Var ln_f_g = tape.param(state.ln_f_gamma), ln_f_b = tape.param(state.ln_f_beta);
  Var head_w = tape.param(state.head_w), head_b = tape.param(state.head_b);
  AanVars aan{};
  if (use_aan) aan = bind_aan(tape, state.aan);
  HlnVars hln = bind_hln(tape, state.hln);

  ForwardResult res;
  res.head_w = head_w;
  res.head_b = head_b;
  res.hln = hln;
  res.samples.reserve(tokens.size());
  std::vector<Var> logit_rows;
  logit_rows.reserve(tokens.size());

  for (const Mat& raw : tokens) {
    SampleTrace trace;
    trace.layers.reserve(cfg.layers);
    Var embedded = ad::affine(tape.constant(raw), patch_w, patch_b);  // P x d
    Var x = ad::add(ad::concat<Scalar>({cls_tok, embedded}, 0), pos); // (P+1) x d

    for (int l = 0; l < cfg.layers; ++l) {
      const BlockVars& w = bv[l];
      Var cls_in = ad::row(x, 0);
      Var patches_in = ad::rows_block(x, 1, cfg.patches);

      Var h = ad::layer_norm_rows(x, w.ln1_g, w.ln1_b);
      Var q = ad::affine(h, w.wq, w.bq);
      Var k = ad::affine(h, w.wk, w.bk);
      Var v = ad::affine(h, w.wv, w.bv);

      LayerEntry entry;
      entry.q = q;
      entry.k = k;
      entry.v = v;

      Var qa = q, ka = k, va = v;
      if (use_aan) {
        Var feature = pool_and_combine(aan, patches_in, cls_in);
        AffineSet aset = affine_params(aan, feature);
        apply_affine(qa, ka, va, aset);
      }

      std::vector<Var> head_outputs;
      head_outputs.reserve(cfg.heads);
      for (int hh = 0; hh < cfg.heads; ++hh) {
        Var qh = ad::col_block(qa, hh * hd, hd);
        Var kh = ad::col_block(ka, hh * hd, hd);
        Var vh = ad::col_block(va, hh * hd, hd);
        Var attn = ad::softmax_rows(ad::scale(ad::matmul(qh, kh, false, true), att_scale));
        entry.attn.push_back(attn);
        head_outputs.push_back(ad::matmul(attn, vh));
      }
      Var attn_cat = ad::concat(head_outputs, 1);
      x = ad::add(x, ad::affine(attn_cat, w.wo, w.bo));

      Var h2 = ad::layer_norm_rows(x, w.ln2_g, w.ln2_b);
      Var mlp = ad::affine(ad::gelu(ad::affine(h2, w.w1, w.b1)), w.w2, w.b2);
      x = ad::add(x, mlp);

      if (l == cfg.layers - 1) x = ad::layer_norm_rows(x, ln_f_g, ln_f_b);
      entry.cls = ad::row(x, 0);
      entry.patch_tokens = ad::rows_block(x, 1, cfg.patches);
      trace.layers.push_back(std::move(entry));
    }

    trace.logits = classify_token(trace.layers.back().cls, head_w, head_b);
    logit_rows.push_back(trace.logits);
    res.samples.push_back(std::move(trace));
  }

  res.logits = ad::concat(logit_rows, 0);
  return res;
}

}  // namespace owtta
