#pragma once

// Numerical reference of the bilayer mask decoder: an occluder pass over
// (tokens, grid), residual guidance onto the embeddings, and an occludee pass
// over the guided bundle. Kernels are pluggable; identity and one-block
// attention kernels ship here.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "occuray/losses.hpp"
#include "occuray/rng.hpp"
#include "occuray/tensor.hpp"

namespace occuray {

using autodiff::Matrix;
using autodiff::Tape;
using autodiff::Var;

struct EmbeddingBundle {
  Matrix image_embedding;  // (g·g) × d
  Matrix sparse_prompt;    // p × d

  bool operator==(const EmbeddingBundle&) const = default;

  int width() const { return image_embedding.cols; }
  int grid_cells() const { return image_embedding.rows; }
  int grid_side() const {
    const int g = static_cast<int>(std::lround(std::sqrt(double(grid_cells()))));
    if (g * g != grid_cells()) throw Error("EmbeddingBundle: grid is not square");
    return g;
  }
};

struct LearnableTokens {
  Matrix mask_token;  // 1 × d
  Matrix iou_token;   // 1 × d

  bool operator==(const LearnableTokens&) const = default;
};

// One kernel application on a tape: refined tokens/grid plus the Var handles
// of the parameters it registered (for reading their gradients later).
struct KernelApplication {
  Var tokens;
  Var grid;
  std::vector<std::pair<std::string, Var>> params;
};

class DecoderKernel {
 public:
  virtual ~DecoderKernel() = default;
  virtual int width() const = 0;
  virtual KernelApplication apply(Tape& t, Var tokens, Var grid) const = 0;
  // live parameter storage, for perturbation in finite-difference checks
  virtual std::vector<std::pair<std::string, Matrix*>> parameters() = 0;
};

// Passes tokens and grid through untouched.
class IdentityKernel final : public DecoderKernel {
 public:
  explicit IdentityKernel(int d) : d_(d) {}
  int width() const override { return d_; }
  KernelApplication apply(Tape&, Var tokens, Var grid) const override {
    return {tokens, grid, {}};
  }
  std::vector<std::pair<std::string, Matrix*>> parameters() override { return {}; }

 private:
  int d_;
};

// Minimal one-block transformer: token self-attention, token→grid cross
// attention, a two-layer tanh MLP on the tokens, then grid→token cross
// attention; every stage is residual. Single head, hidden width 2d.
class AttentionKernel final : public DecoderKernel {
 public:
  AttentionKernel(int d, std::uint64_t seed) : d_(d) {
    SplitMix64 rng(seed);
    auto gauss = [&](int r, int c) {
      Matrix m(r, c);
      for (double& v : m.a) v = 0.02 * rng.next_gaussian();
      return m;
    };
    for (int blk = 0; blk < 3; ++blk) {
      attn_[blk].wq = gauss(d, d);
      attn_[blk].wk = gauss(d, d);
      attn_[blk].wv = gauss(d, d);
      attn_[blk].wo = gauss(d, d);
    }
    w1_ = gauss(d, 2 * d);
    b1_ = gauss(1, 2 * d);
    w2_ = gauss(2 * d, d);
    b2_ = gauss(1, d);
  }

  int width() const override { return d_; }

  KernelApplication apply(Tape& t, Var tokens, Var grid) const override {
    KernelApplication app;
    auto reg = [&](const std::string& name, const Matrix& m) {
      Var v = t.input(m);
      app.params.emplace_back(name, v);
      return v;
    };
    const double s = 1.0 / std::sqrt(static_cast<double>(d_));
    auto attend = [&](Var q_in, Var kv_in, const Attn& w, const std::string& pfx) {
      Var q = t.matmul(q_in, reg(pfx + ".wq", w.wq));
      Var k = t.matmul(kv_in, reg(pfx + ".wk", w.wk));
      Var v = t.matmul(kv_in, reg(pfx + ".wv", w.wv));
      Var a = t.softmax_rows(t.scale(t.matmul(q, t.transpose(k)), s));
      return t.matmul(t.matmul(a, v), reg(pfx + ".wo", w.wo));
    };

    Var tk = t.add(tokens, attend(tokens, tokens, attn_[0], "self"));
    tk = t.add(tk, attend(tk, grid, attn_[1], "t2g"));
    Var hidden = t.tanh_act(t.add_bias(t.matmul(tk, reg("mlp.w1", w1_)), reg("mlp.b1", b1_)));
    tk = t.add(tk, t.add_bias(t.matmul(hidden, reg("mlp.w2", w2_)), reg("mlp.b2", b2_)));
    Var gr = t.add(grid, attend(grid, tk, attn_[2], "g2t"));

    app.tokens = tk;
    app.grid = gr;
    return app;
  }

  std::vector<std::pair<std::string, Matrix*>> parameters() override {
    std::vector<std::pair<std::string, Matrix*>> out;
    const char* pfx[3] = {"self", "t2g", "g2t"};
    for (int blk = 0; blk < 3; ++blk) {
      out.emplace_back(std::string(pfx[blk]) + ".wq", &attn_[blk].wq);
      out.emplace_back(std::string(pfx[blk]) + ".wk", &attn_[blk].wk);
      out.emplace_back(std::string(pfx[blk]) + ".wv", &attn_[blk].wv);
      out.emplace_back(std::string(pfx[blk]) + ".wo", &attn_[blk].wo);
    }
    out.emplace_back("mlp.w1", &w1_);
    out.emplace_back("mlp.b1", &b1_);
    out.emplace_back("mlp.w2", &w2_);
    out.emplace_back("mlp.b2", &b2_);
    return out;
  }

 private:
  struct Attn {
    Matrix wq, wk, wv, wo;
  };
  int d_;
  Attn attn_[3];
  Matrix w1_, b1_, w2_, b2_;
};

struct BilayerOutput {
  Matrix occluder_logits;  // g × g
  Matrix occludee_logits;  // g × g
  double occluder_iou_logit = 0.0;
  double occludee_iou_logit = 0.0;
  EmbeddingBundle refined_bundle;
  EmbeddingBundle guided_bundle;
};

namespace detail {

struct BilayerGraph {
  Var occluder_logits, occludee_logits;  // g×g each
  Var occluder_iou, occludee_iou;        // 1×1
  Var refined_grid, refined_sparse;
  Var guided_grid, guided_sparse;
  std::vector<std::pair<std::string, Var>> params;  // prefixed k_r./k_e./tokens.
};

// One decoder pass: concat learned tokens onto the sparse prompt, run the
// kernel, read mask logits as ⟨mask-token row, grid row⟩ and the IoU logit
// from the IoU-token row against the mean grid cell.
inline void decoder_pass(Tape& t, Var mask_tok, Var iou_tok, Var sparse, Var grid,
                         const DecoderKernel& k, int g, int p, const std::string& pfx,
                         BilayerGraph& out, Var& logits, Var& iou_logit, Var& out_grid,
                         Var& out_sparse) {
  Var tokens = t.concat_rows({mask_tok, iou_tok, sparse});
  KernelApplication app = k.apply(t, tokens, grid);
  for (auto& [name, var] : app.params) out.params.emplace_back(pfx + name, var);
  Var logit_col = t.matmul(app.grid, t.transpose(t.slice_rows(app.tokens, 0, 1)));
  logits = t.reshape(logit_col, g, g);
  iou_logit = t.matmul(t.mean_rows(app.grid), t.transpose(t.slice_rows(app.tokens, 1, 2)));
  out_grid = app.grid;
  out_sparse = t.slice_rows(app.tokens, 2, 2 + p);
}

inline BilayerGraph build_graph(Tape& t, const EmbeddingBundle& bundle,
                                const LearnableTokens& toks, const DecoderKernel& k_r,
                                const DecoderKernel& k_e) {
  if (bundle.width() != k_r.width() || bundle.width() != k_e.width())
    throw Error("bilayer: kernel width disagrees with bundle width");
  if (toks.mask_token.cols != bundle.width() || toks.iou_token.cols != bundle.width())
    throw Error("bilayer: token width disagrees with bundle width");
  const int g = bundle.grid_side();
  const int p = bundle.sparse_prompt.rows;

  BilayerGraph gr;
  Var mask_tok = t.input(toks.mask_token);
  Var iou_tok = t.input(toks.iou_token);
  gr.params.emplace_back("tokens.mask", mask_tok);
  gr.params.emplace_back("tokens.iou", iou_tok);
  Var grid = t.input(bundle.image_embedding);
  Var sparse = t.input(bundle.sparse_prompt);

  decoder_pass(t, mask_tok, iou_tok, sparse, grid, k_r, g, p, "k_r.", gr,
               gr.occluder_logits, gr.occluder_iou, gr.refined_grid, gr.refined_sparse);
  gr.guided_grid = t.add(grid, gr.refined_grid);
  gr.guided_sparse = t.add(sparse, gr.refined_sparse);
  Var second_grid, second_sparse;  // the occludee pass's refinements are unused
  decoder_pass(t, mask_tok, iou_tok, gr.guided_sparse, gr.guided_grid, k_e, g, p, "k_e.",
               gr, gr.occludee_logits, gr.occludee_iou, second_grid, second_sparse);
  return gr;
}

}  // namespace detail

inline EmbeddingBundle apply_residual_guidance(const EmbeddingBundle& original,
                                               const EmbeddingBundle& refined) {
  if (original.image_embedding.rows != refined.image_embedding.rows ||
      original.image_embedding.cols != refined.image_embedding.cols ||
      original.sparse_prompt.rows != refined.sparse_prompt.rows ||
      original.sparse_prompt.cols != refined.sparse_prompt.cols)
    throw Error("apply_residual_guidance: shape mismatch");
  EmbeddingBundle out = original;
  for (std::size_t i = 0; i < out.image_embedding.size(); ++i)
    out.image_embedding.a[i] += refined.image_embedding.a[i];
  for (std::size_t i = 0; i < out.sparse_prompt.size(); ++i)
    out.sparse_prompt.a[i] += refined.sparse_prompt.a[i];
  return out;
}

inline std::pair<Matrix, EmbeddingBundle> forward_occluder(const EmbeddingBundle& bundle,
                                                           const LearnableTokens& toks,
                                                           const DecoderKernel& k) {
  Tape t;
  const int g = bundle.grid_side();
  const int p = bundle.sparse_prompt.rows;
  Var mask_tok = t.input(toks.mask_token);
  Var iou_tok = t.input(toks.iou_token);
  Var grid = t.input(bundle.image_embedding);
  Var sparse = t.input(bundle.sparse_prompt);
  detail::BilayerGraph scratch;
  Var logits, iou_logit, out_grid, out_sparse;
  detail::decoder_pass(t, mask_tok, iou_tok, sparse, grid, k, g, p, "", scratch, logits,
                       iou_logit, out_grid, out_sparse);
  return {t.value(logits), EmbeddingBundle{t.value(out_grid), t.value(out_sparse)}};
}

inline Matrix forward_occludee(const EmbeddingBundle& guided, const LearnableTokens& toks,
                               const DecoderKernel& k) {
  return forward_occluder(guided, toks, k).first;
}

inline BilayerOutput forward_bilayer(const EmbeddingBundle& bundle,
                                     const LearnableTokens& toks, const DecoderKernel& k_r,
                                     const DecoderKernel& k_e) {
  Tape t;
  const auto gr = detail::build_graph(t, bundle, toks, k_r, k_e);
  BilayerOutput out;
  out.occluder_logits = t.value(gr.occluder_logits);
  out.occludee_logits = t.value(gr.occludee_logits);
  out.occluder_iou_logit = t.scalar(gr.occluder_iou);
  out.occludee_iou_logit = t.scalar(gr.occludee_iou);
  out.refined_bundle = EmbeddingBundle{t.value(gr.refined_grid), t.value(gr.refined_sparse)};
  out.guided_bundle = EmbeddingBundle{t.value(gr.guided_grid), t.value(gr.guided_sparse)};
  return out;
}

// σ(logits) fed into the mask losses on the tape; returns the loss Var.
inline Var attach_seg_loss(Tape& t, const detail::BilayerGraph& gr,
                           const BinaryMask& gt_occludee, const BinaryMask* gt_occluder,
                           const LossConfig& cfg) {
  Var probs_e = t.sigmoid(gr.occludee_logits);
  Var loss = t.bce_mean(probs_e, gt_occludee, cfg.epsilon);
  const bool use_occluder =
      gt_occluder != nullptr || cfg.occluder_policy == OccluderPolicy::zero_target;
  if (use_occluder) {
    const Matrix& lr = t.value(gr.occluder_logits);
    const BinaryMask zeros(lr.rows, lr.cols);
    const BinaryMask& target = gt_occluder ? *gt_occluder : zeros;
    Var probs_r = t.sigmoid(gr.occluder_logits);
    loss = t.add(loss, t.scale(t.bce_mean(probs_r, target, cfg.epsilon), cfg.lambda));
  }
  return loss;
}

inline double bilayer_seg_loss(const EmbeddingBundle& bundle, const LearnableTokens& toks,
                               const DecoderKernel& k_r, const DecoderKernel& k_e,
                               const BinaryMask& gt_occludee, const BinaryMask* gt_occluder,
                               const LossConfig& cfg = {}) {
  Tape t;
  const auto gr = detail::build_graph(t, bundle, toks, k_r, k_e);
  return t.scalar(attach_seg_loss(t, gr, gt_occludee, gt_occluder, cfg));
}

struct BilayerGradCheck {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

// End-to-end gradient of the segmentation loss with respect to every kernel
// parameter and both learnable tokens, verified coordinate-wise against
// central finite differences.
inline BilayerGradCheck bilayer_grad_check(const EmbeddingBundle& bundle,
                                           LearnableTokens& toks, DecoderKernel& k_r,
                                           DecoderKernel& k_e,
                                           const BinaryMask& gt_occludee,
                                           const BinaryMask* gt_occluder,
                                           const LossConfig& cfg = {}, double h = 1e-4) {
  if (&k_r == &k_e)
    throw Error("bilayer_grad_check: pass distinct kernel objects");
  std::vector<std::pair<std::string, Matrix*>> live;
  live.emplace_back("tokens.mask", &toks.mask_token);
  live.emplace_back("tokens.iou", &toks.iou_token);
  for (auto& [name, m] : k_r.parameters()) live.emplace_back("k_r." + name, m);
  for (auto& [name, m] : k_e.parameters()) live.emplace_back("k_e." + name, m);

  // analytic gradients, keyed by prefixed parameter name
  Tape t;
  const auto gr = detail::build_graph(t, bundle, toks, k_r, k_e);
  t.backward(attach_seg_loss(t, gr, gt_occludee, gt_occluder, cfg));
  std::map<std::string, Matrix> analytic;
  for (const auto& [name, var] : gr.params) {
    auto [it, fresh] = analytic.emplace(name, t.grad(var));
    if (!fresh) {
      const Matrix& g = t.grad(var);
      for (std::size_t i = 0; i < g.size(); ++i) it->second.a[i] += g.a[i];
    }
  }

  auto loss_now = [&]() {
    return bilayer_seg_loss(bundle, toks, k_r, k_e, gt_occludee, gt_occluder, cfg);
  };

  BilayerGradCheck report;
  for (auto& [name, m] : live) {
    const Matrix& grad = analytic.at(name);
    for (std::size_t i = 0; i < m->size(); ++i) {
      const double saved = m->a[i];
      m->a[i] = saved + h;
      const double up = loss_now();
      m->a[i] = saved - h;
      const double down = loss_now();
      m->a[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(grad.a[i] - fd) / std::max(1.0, std::abs(grad.a[i]));
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
      }
    }
  }
  return report;
}

// Seeded instances for demos and tests.
inline EmbeddingBundle random_bundle(int g, int p, int d, SplitMix64& rng) {
  EmbeddingBundle b;
  b.image_embedding = Matrix(g * g, d);
  for (double& v : b.image_embedding.a) v = rng.next_gaussian() * 0.02;
  b.sparse_prompt = Matrix(p, d);
  for (double& v : b.sparse_prompt.a) v = rng.next_gaussian() * 0.02;
  return b;
}

inline LearnableTokens random_tokens(int d, SplitMix64& rng) {
  LearnableTokens t;
  t.mask_token = Matrix(1, d);
  for (double& v : t.mask_token.a) v = rng.next_gaussian() * 0.02;
  t.iou_token = Matrix(1, d);
  for (double& v : t.iou_token.a) v = rng.next_gaussian() * 0.02;
  return t;
}

}  // namespace occuray
