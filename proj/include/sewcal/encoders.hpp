#pragma once

// Dual encoder: two pre-norm transformer stacks, one over image patch ids with
// a learned [CLS] vector, one over caption word ids whose first token is the
// [CLS] word. Each sample is encoded on its own tape, so nothing couples rows
// of a batch before the BatchNorm step on the [CLS] outputs.

#include "sewcal/autodiff.hpp"
#include "sewcal/data_synth.hpp"
#include "sewcal/params.hpp"

#include <span>
#include <string>
#include <vector>

namespace sewcal {

inline ad::Var param_var(ad::Tape& t, const ModelParams& p, const std::string& name) {
  const int idx = p.index(name);
  return t.leaf(idx, p.arrays()[static_cast<std::size_t>(idx)].value);
}

struct EncodedVars {
  ad::Var cls;  // 1 x d
  ad::Var seq;  // L x d, L = tokens actually present
};

namespace detail {

inline ad::Var attention_sublayer(ad::Tape& t, const ModelParams& p, const std::string& pre, ad::Var query_in,
                                  ad::Var memory_in, int heads) {
  auto P = [&](const char* n) { return param_var(t, p, pre + n); };
  ad::Var q = ad::linear(query_in, P(".wq"), P(".bq"));
  ad::Var k = ad::matmul(memory_in, P(".wk"));
  ad::Var v = ad::linear(memory_in, P(".wv"), P(".bv"));
  return ad::linear(ad::attention(q, k, v, heads), P(".wo"), P(".bo"));
}

}  // namespace detail

// One pre-norm block. With `memory` set, a cross-attention sublayer over it
// follows self-attention (decoder blocks).
inline ad::Var transformer_block(ad::Tape& t, const ModelParams& p, const std::string& pre, ad::Var x, int heads,
                                 const ad::Var* memory = nullptr) {
  auto P = [&](const std::string& n) { return param_var(t, p, pre + n); };
  ad::Var h = ad::layer_norm(x, P("ln1.g"), P("ln1.b"));
  x = ad::add(x, detail::attention_sublayer(t, p, pre + "attn", h, h, heads));
  if (memory != nullptr) {
    h = ad::layer_norm(x, P("ln_x.g"), P("ln_x.b"));
    x = ad::add(x, detail::attention_sublayer(t, p, pre + "xattn", h, *memory, heads));
  }
  h = ad::layer_norm(x, P("ln2.g"), P("ln2.b"));
  h = ad::gelu(ad::linear(h, P("mlp.w1"), P("mlp.b1")));
  return ad::add(x, ad::linear(h, P("mlp.w2"), P("mlp.b2")));
}

inline EncodedVars encode_image_on(ad::Tape& t, const ModelParams& p, const SyntheticPersonImage& img) {
  const auto& cfg = p.config().encoder;
  const int tokens = static_cast<int>(img.patch_tokens.size()) + 1;
  require(tokens == cfg.max_image_tokens, ErrorKind::kShape,
          "image has " + std::to_string(tokens - 1) + " patches but the encoder expects " +
              std::to_string(cfg.max_image_tokens - 1));
  ad::Var patches = ad::embed(param_var(t, p, "img.patch_embed"), img.patch_tokens);
  ad::Var x = ad::concat_rows(param_var(t, p, "img.cls"), patches);
  x = ad::add(x, param_var(t, p, "img.pos"));
  for (int b = 0; b < cfg.depth; ++b) x = transformer_block(t, p, "img.blk" + std::to_string(b) + ".", x, cfg.heads);
  x = ad::layer_norm(x, param_var(t, p, "img.ln_f.g"), param_var(t, p, "img.ln_f.b"));
  return {ad::slice_rows(x, 0, 1), x};
}

// `masked[r]` substitutes the learnable mask vector for token r's embedding.
inline EncodedVars encode_text_on(ad::Tape& t, const ModelParams& p, std::span<const int> ids,
                                  std::span<const std::uint8_t> masked = {}) {
  const auto& cfg = p.config().encoder;
  const int len = static_cast<int>(ids.size());
  require(len >= 1, ErrorKind::kLength, "caption is empty (needs at least [CLS])");
  require(len <= cfg.max_text_tokens, ErrorKind::kLength,
          "caption of " + std::to_string(len) + " tokens exceeds max_text_tokens " +
              std::to_string(cfg.max_text_tokens));
  ad::Var x = masked.empty()
                  ? ad::embed(param_var(t, p, "txt.word_embed"), ids)
                  : ad::embed(param_var(t, p, "txt.word_embed"), ids, masked, param_var(t, p, "mask_token"));
  x = ad::add(x, ad::slice_rows(param_var(t, p, "txt.pos"), 0, len));
  for (int b = 0; b < cfg.depth; ++b) x = transformer_block(t, p, "txt.blk" + std::to_string(b) + ".", x, cfg.heads);
  x = ad::layer_norm(x, param_var(t, p, "txt.ln_f.g"), param_var(t, p, "txt.ln_f.b"));
  return {ad::slice_rows(x, 0, 1), x};
}

struct EncoderOutput {
  Matrix cls;               // n x d
  std::vector<Matrix> seq;  // n entries of [tokens x d]
};

// Batched forward without gradients. Image sequences are [c1 x d].
inline EncoderOutput encode_image(std::span<const SyntheticPersonImage> batch, const ModelParams& p) {
  const int d = p.config().encoder.embed_dim;
  EncoderOutput out{Matrix(static_cast<Eigen::Index>(batch.size()), d), {}};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Tape t;
    auto e = encode_image_on(t, p, batch[i]);
    out.cls.row(static_cast<Eigen::Index>(i)) = ad::val(e.cls).row(0);
    out.seq.push_back(ad::val(e.seq));
  }
  return out;
}

// Batched forward without gradients. Text sequences are padded to [c2 x d]
// with zero rows past each caption's length.
inline EncoderOutput encode_text(std::span<const TokenizedCaption> batch, const ModelParams& p,
                                 const std::vector<std::vector<std::uint8_t>>* masks = nullptr) {
  const auto& cfg = p.config().encoder;
  EncoderOutput out{Matrix(static_cast<Eigen::Index>(batch.size()), cfg.embed_dim), {}};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Tape t;
    std::span<const std::uint8_t> m;
    if (masks != nullptr) m = (*masks)[i];
    auto e = encode_text_on(t, p, batch[i].token_ids, m);
    out.cls.row(static_cast<Eigen::Index>(i)) = ad::val(e.cls).row(0);
    Matrix padded = Matrix::Zero(cfg.max_text_tokens, cfg.embed_dim);
    padded.topRows(ad::val(e.seq).rows()) = ad::val(e.seq);
    out.seq.push_back(std::move(padded));
  }
  return out;
}

// Fixed-width id rows as produced by padded loaders: row i holds caption i
// followed by filler ids; only the first lengths[i] ids are read.
inline EncoderOutput encode_text_padded(const std::vector<std::vector<int>>& padded_ids, std::span<const int> lengths,
                                        const ModelParams& p) {
  require(padded_ids.size() == lengths.size(), ErrorKind::kShape, "encode_text_padded: batch sizes differ");
  std::vector<TokenizedCaption> caps(padded_ids.size());
  for (std::size_t i = 0; i < caps.size(); ++i) {
    require(lengths[i] >= 1 && static_cast<std::size_t>(lengths[i]) <= padded_ids[i].size(), ErrorKind::kLength,
            "encode_text_padded: length outside the padded row");
    caps[i].token_ids.assign(padded_ids[i].begin(), padded_ids[i].begin() + lengths[i]);
  }
  return encode_text(caps, p);
}

// ---------------------------------------------------------------------------
// BatchNorm over [CLS] features, one set of statistics per modality.
// ---------------------------------------------------------------------------

enum class BnMode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct BatchNormCache {
  Matrix xhat;
  RowVector inv_std;
  RowVector mean;
  RowVector var;  // biased batch variance
};

inline Matrix batchnorm_forward(const Matrix& x, const Matrix& scale, const Matrix& shift, BatchNormCache* cache,
                                double eps = kBatchNormEps) {
  require(x.rows() >= 2, ErrorKind::kValue, "train-mode BatchNorm needs a batch of at least 2");
  const auto n = static_cast<double>(x.rows());
  RowVector mean = x.colwise().mean();
  Matrix centered = x.rowwise() - mean;
  RowVector var = centered.array().square().colwise().sum() / n;
  RowVector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix y = xhat.array().rowwise() * scale.row(0).array();
  y.rowwise() += shift.row(0);
  if (cache != nullptr) *cache = {std::move(xhat), std::move(inv_std), std::move(mean), std::move(var)};
  return y;
}

struct BatchNormGrads {
  Matrix x;
  Matrix scale;
  Matrix shift;
};

inline BatchNormGrads batchnorm_backward(const Matrix& grad_y, const Matrix& scale, const BatchNormCache& c) {
  const auto n = static_cast<double>(grad_y.rows());
  BatchNormGrads g;
  g.scale = (grad_y.array() * c.xhat.array()).colwise().sum().matrix();
  g.shift = grad_y.colwise().sum();
  Matrix dxhat = grad_y.array().rowwise() * scale.row(0).array();
  RowVector m1 = dxhat.colwise().sum() / n;
  RowVector m2 = (dxhat.array() * c.xhat.array()).colwise().sum().matrix() / n;
  Matrix dx = dxhat.rowwise() - m1;
  dx.array() -= c.xhat.array().rowwise() * m2.array();
  g.x = dx.array().rowwise() * c.inv_std.array();
  return g;
}

inline Matrix batchnorm_eval(const Matrix& x, const Matrix& scale, const Matrix& shift, const Matrix& running_mean,
                             const Matrix& running_var, double eps = kBatchNormEps) {
  Matrix y = x.rowwise() - running_mean.row(0);
  y.array().rowwise() *= (running_var.row(0).array() + eps).rsqrt() * scale.row(0).array();
  y.rowwise() += shift.row(0);
  return y;
}

inline void update_running_stats(ModelParams& p, const std::string& modality, const BatchNormCache& c,
                                 Eigen::Index n) {
  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  Matrix& rm = p.mut("bn." + modality + ".running_mean");
  Matrix& rv = p.mut("bn." + modality + ".running_var");
  rm = (1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * c.mean;
  rv = (1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbias * c.var;
}

// Train mode normalizes with batch statistics and updates the running
// statistics in `p`; eval mode applies the running statistics.
inline std::pair<Matrix, Matrix> batchnorm_cls(const Matrix& image_cls, const Matrix& text_cls, ModelParams& p,
                                               BnMode mode) {
  require(image_cls.rows() == text_cls.rows(), ErrorKind::kShape, "batchnorm_cls: row count mismatch");
  if (mode == BnMode::kEval) {
    return {batchnorm_eval(image_cls, p["bn.img.scale"], p["bn.img.shift"], p["bn.img.running_mean"],
                           p["bn.img.running_var"]),
            batchnorm_eval(text_cls, p["bn.txt.scale"], p["bn.txt.shift"], p["bn.txt.running_mean"],
                           p["bn.txt.running_var"])};
  }
  BatchNormCache ci, ct;
  Matrix yi = batchnorm_forward(image_cls, p["bn.img.scale"], p["bn.img.shift"], &ci);
  Matrix yt = batchnorm_forward(text_cls, p["bn.txt.scale"], p["bn.txt.shift"], &ct);
  update_running_stats(p, "img", ci, image_cls.rows());
  update_running_stats(p, "txt", ct, text_cls.rows());
  return {std::move(yi), std::move(yt)};
}

}  // namespace sewcal
