#pragma once

// Masking caption modeling: caption tokens are masked at the embedding layer,
// the text encoder runs on the masked caption, and a detachable decoder
// (self-attention, cross-attention to the image sequence, MLP per block,
// then a vocabulary projection) reconstructs the masked words.

#include "sewcal/encoders.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace sewcal {

struct MCMConfig {
  double mask_ratio = 0.1;
  int decoder_blocks = 1;
  int vocab_size = 0;
  bool force_min_one = true;

  void validate() const {
    require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::kValue, "mask_ratio must lie in [0, 1]");
    require(decoder_blocks >= 1, ErrorKind::kValue, "decoder_blocks must be >= 1");
  }
};

struct MaskPlan {
  std::vector<std::vector<int>> masked_positions;  // sorted, per caption
  std::vector<std::vector<int>> original_ids;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& p : masked_positions) n += p.size();
    return n;
  }
};

struct MaskResult {
  std::vector<std::vector<std::uint8_t>> masked;  // per caption, per token
  MaskPlan plan;
};

// Position 0 ([CLS]) is never a candidate. Each content token is selected
// with probability mask_ratio; with force_min_one a caption that drew nothing
// gets one uniformly chosen content token.
inline MaskResult mask_captions(std::span<const TokenizedCaption> batch, const MCMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MaskResult r;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ids = batch[i].token_ids;
    Rng rng(derive_seed(seed, 0x3C3, i));
    std::vector<std::uint8_t> flags(ids.size(), 0);
    std::vector<int> pos, orig;
    for (std::size_t k = 1; k < ids.size(); ++k) {
      if (rng.bernoulli(cfg.mask_ratio)) flags[k] = 1;
    }
    if (cfg.force_min_one && ids.size() > 1 && std::find(flags.begin(), flags.end(), 1) == flags.end()) {
      flags[1 + static_cast<std::size_t>(rng.below(static_cast<int>(ids.size()) - 1))] = 1;
    }
    for (std::size_t k = 1; k < ids.size(); ++k) {
      if (flags[k]) {
        pos.push_back(static_cast<int>(k));
        orig.push_back(ids[k]);
      }
    }
    r.masked.push_back(std::move(flags));
    r.plan.masked_positions.push_back(std::move(pos));
    r.plan.original_ids.push_back(std::move(orig));
  }
  return r;
}

// Decoder over one caption's encoded tokens [L x d] attending to the image
// sequence [c1 x d]; returns logits [L x V].
inline ad::Var decode_on(ad::Tape& t, const ModelParams& p, ad::Var text_seq, ad::Var image_seq) {
  const auto& cfg = p.config();
  require(ad::val(text_seq).cols() == cfg.encoder.embed_dim && ad::val(image_seq).cols() == cfg.encoder.embed_dim,
          ErrorKind::kShape, "decode: feature width does not match embed_dim");
  ad::Var x = text_seq;
  for (int b = 0; b < cfg.decoder_blocks; ++b) {
    x = transformer_block(t, p, std::string(kDecoderPrefix) + "blk" + std::to_string(b) + ".", x, cfg.encoder.heads,
                          &image_seq);
  }
  x = ad::layer_norm(x, param_var(t, p, "dec.ln_f.g"), param_var(t, p, "dec.ln_f.b"));
  return ad::linear(x, param_var(t, p, "dec.head.w"), param_var(t, p, "dec.head.b"));
}

// Batched decode without gradients. text_seq entries are [c2 x d] with valid
// rows given by text_lengths; logits past a caption's length are zero.
inline std::vector<Matrix> decode(const std::vector<Matrix>& text_seq, std::span<const int> text_lengths,
                                  const std::vector<Matrix>& image_seq, const ModelParams& p) {
  require(text_seq.size() == image_seq.size() && text_seq.size() == text_lengths.size(), ErrorKind::kShape,
          "decode: batch sizes differ");
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < text_seq.size(); ++i) {
    const int len = text_lengths[i];
    require(len >= 1 && len <= text_seq[i].rows(), ErrorKind::kShape, "decode: text length out of range");
    ad::Tape t;
    ad::Var logits = decode_on(t, p, t.constant(text_seq[i].topRows(len)), t.constant(image_seq[i]));
    Matrix full = Matrix::Zero(text_seq[i].rows(), p.config().text_vocab_size);
    full.topRows(len) = ad::val(logits);
    out.push_back(std::move(full));
  }
  return out;
}

struct McmLossOutput {
  double loss = 0.0;
  std::size_t count = 0;
  std::vector<Matrix> grad_logits;  // same shapes as the input logits
};

// Mean cross-entropy over all masked positions of the batch; 0 without any.
inline McmLossOutput mcm_loss(const std::vector<Matrix>& logits, const MaskPlan& plan) {
  require(logits.size() == plan.masked_positions.size(), ErrorKind::kShape, "mcm_loss: batch size mismatch");
  McmLossOutput out;
  out.count = plan.total();
  out.grad_logits.reserve(logits.size());
  for (const auto& l : logits) out.grad_logits.push_back(Matrix::Zero(l.rows(), l.cols()));
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& pos = plan.masked_positions[i];
    for (std::size_t q = 0; q < pos.size(); ++q) {
      const int r = pos[q];
      const int target = plan.original_ids[i][q];
      require(r >= 0 && r < logits[i].rows() && target >= 0 && target < logits[i].cols(), ErrorKind::kIndex,
              "mcm_loss: plan entry outside logits");
      const auto row = logits[i].row(r);
      const double m = row.maxCoeff();
      const Eigen::ArrayXd e = (row.array() - m).exp().transpose();
      const double lse = m + std::log(e.sum());
      out.loss += (lse - row(target)) * inv;
      Eigen::ArrayXd prob = e / e.sum();
      prob(target) -= 1.0;
      out.grad_logits[i].row(r) = (prob * inv).transpose().matrix();
    }
  }
  return out;
}

// Top-1 accuracy of masked-word reconstruction over the captions of a split,
// pooled over `rounds` independent mask draws per caption.
inline double masked_token_accuracy(const Corpus& corpus, Split split, const ModelParams& p, const MCMConfig& cfg,
                                    std::uint64_t seed, int rounds = 8) {
  std::size_t hits = 0, total = 0;
  for (int pi : pairs_in_split(corpus, split)) {
    const auto& [im, ci] = corpus.pairs[static_cast<std::size_t>(pi)];
    const auto& cap = corpus.captions[static_cast<std::size_t>(ci)];
    const auto& img = corpus.images[static_cast<std::size_t>(im)];
    const TokenizedCaption one[] = {cap};
    for (int round = 0; round < rounds; ++round) {
      auto m = mask_captions(one, cfg, derive_seed(seed, static_cast<std::uint64_t>(pi), static_cast<std::uint64_t>(round)));
      if (m.plan.total() == 0) continue;
      ad::Tape t;
      auto ev = encode_image_on(t, p, img);
      auto et = encode_text_on(t, p, cap.token_ids, m.masked[0]);
      const Matrix& logits = ad::val(decode_on(t, p, et.seq, ev.seq));
      for (std::size_t q = 0; q < m.plan.masked_positions[0].size(); ++q) {
        Eigen::Index arg;
        logits.row(m.plan.masked_positions[0][q]).maxCoeff(&arg);
        hits += static_cast<int>(arg) == m.plan.original_ids[0][q];
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace sewcal
