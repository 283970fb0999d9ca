#pragma once

// Training: identity-balanced batches, the per-step pipeline (mask, encode,
// BatchNorm on [CLS], decode, Sew + MCM), Adam, and the epoch loop.

#include "sewcal/mcm.hpp"
#include "sewcal/sew_loss.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

namespace sewcal {

struct TrainConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  int batch_size = 16;
  int epochs = 30;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool sew_on = true;
  bool mcm_on = true;
  bool mask_only = false;  // mask captions, skip decoder and MCM loss
  bool attn_only = false;  // run decoder on unmasked captions, no MCM loss
  int threads = 1;

  void validate() const {
    require(lambda1 >= 0.0 && lambda2 >= 0.0, ErrorKind::kValue, "lambda1/lambda2 must be non-negative");
    require(batch_size >= 2 && batch_size % 2 == 0, ErrorKind::kValue, "batch_size must be even and >= 2");
    require(epochs >= 1, ErrorKind::kValue, "epochs must be >= 1");
    require(learning_rate > 0.0, ErrorKind::kValue, "learning_rate must be positive");
    require(!(mask_only && attn_only), ErrorKind::kValue, "mask-only and attn-only are exclusive");
    require(threads >= 1, ErrorKind::kValue, "threads must be >= 1");
  }

  bool apply_mask() const { return !attn_only && (mcm_on || mask_only); }
  bool run_decoder() const { return !mask_only && (mcm_on || attn_only); }
  bool mcm_loss_on() const { return mcm_on && !mask_only && !attn_only; }
};

struct ExperimentConfig {
  TrainConfig train;
  SewConfig sew{.len_min = 8, .len_max = 28};
  MCMConfig mcm;
  EncoderConfig encoder;
  std::string corpus_path;
  std::string out_dir = "out";
};

inline ModelConfig model_config_for(const Corpus& corpus, const ExperimentConfig& cfg) {
  ModelConfig m;
  m.encoder = cfg.encoder;
  m.encoder.max_image_tokens = corpus.grid_size * corpus.grid_size + 1;
  m.patch_vocab_size = std::max(corpus.patch_vocab_size, 1);
  m.text_vocab_size = corpus.vocab.size();
  m.num_classes = corpus.num_classes();
  m.decoder_blocks = cfg.mcm.decoder_blocks;
  return m;
}

// Batch i holds P = batch_size / 2 distinct identities, two pairs each
// (consecutive rows). Identities with a single pair contribute it twice.
inline std::vector<int> sample_batch(const Corpus& corpus, Split split, int batch_size, std::uint64_t seed,
                                     std::uint64_t step) {
  require(batch_size >= 2 && batch_size % 2 == 0, ErrorKind::kValue, "batch_size must be even and >= 2");
  std::map<int, std::vector<int>> by_id;
  for (int p : pairs_in_split(corpus, split)) {
    by_id[corpus.images[static_cast<std::size_t>(corpus.pairs[static_cast<std::size_t>(p)].first)].identity_id]
        .push_back(p);
  }
  const int P = batch_size / 2;
  require(static_cast<int>(by_id.size()) >= P, ErrorKind::kValue,
          "split has " + std::to_string(by_id.size()) + " identities, batch of " + std::to_string(batch_size) +
              " needs " + std::to_string(P));
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  Rng rng(derive_seed(seed, 0x5A, step));
  for (int i = 0; i < P; ++i) std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(i + rng.below(static_cast<int>(ids.size()) - i))]);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < P; ++i) {
    const auto& pairs = by_id[ids[static_cast<std::size_t>(i)]];
    const int n = static_cast<int>(pairs.size());
    const int a = rng.below(n);
    int b = a;
    if (n > 1) {
      b = rng.below(n - 1);
      if (b >= a) ++b;
    }
    out.push_back(pairs[static_cast<std::size_t>(a)]);
    out.push_back(pairs[static_cast<std::size_t>(b)]);
  }
  return out;
}

struct EmbeddingBatch {
  Matrix image_cls;
  Matrix text_cls;
  std::vector<Matrix> image_seq;
  std::vector<Matrix> text_seq;
  std::vector<int> labels;
  std::vector<int> caption_lengths;
};

struct TotalLossOutput {
  SewLossOutput sew;
  McmLossOutput mcm;
  double total = 0.0;
  Matrix grad_image_cls;
  Matrix grad_text_cls;
  Matrix grad_omega;
  std::vector<Matrix> grad_logits;
};

// lambda1 * Sew + lambda2 * MCM over one batch. Disabled terms contribute
// exactly zero (and zero gradient). `logits` may be empty when MCM is off.
inline TotalLossOutput total_loss(const EmbeddingBatch& batch, const std::vector<Matrix>& logits, const MaskPlan& plan,
                                  const Matrix& omega, const TrainConfig& tc, const SewConfig& sc) {
  TotalLossOutput out;
  const auto n = batch.image_cls.rows();
  out.grad_image_cls = Matrix::Zero(n, batch.image_cls.cols());
  out.grad_text_cls = Matrix::Zero(n, batch.text_cls.cols());
  out.grad_omega = Matrix::Zero(omega.rows(), omega.cols());
  double sew_part = 0.0;
  double mcm_part = 0.0;
  if (tc.sew_on) {
    out.sew = sew_total(batch.image_cls, batch.text_cls, batch.labels, batch.caption_lengths, omega, sc);
    sew_part = tc.lambda1 * out.sew.total;
    out.grad_image_cls = tc.lambda1 * out.sew.grad_image;
    out.grad_text_cls = tc.lambda1 * out.sew.grad_text;
    out.grad_omega = tc.lambda1 * out.sew.grad_omega;
  }
  if (tc.mcm_loss_on()) {
    out.mcm = mcm_loss(logits, plan);
    mcm_part = tc.lambda2 * out.mcm.loss;
    out.grad_logits = out.mcm.grad_logits;
    for (auto& g : out.grad_logits) g *= tc.lambda2;
  }
  out.total = sew_part + mcm_part;
  return out;
}

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct StepResult {
  TotalLossOutput loss;
  ParamGrads grads;
  BatchNormCache bn_img, bn_txt;  // batch statistics, for the running-stat update
};

// Full forward/backward for the pairs in `pair_indices`. Per-sample work runs
// on separate tapes (optionally in parallel); parameter gradients are summed
// in sample order, so results do not depend on the thread count.
inline StepResult compute_step(const ModelParams& params, const Corpus& corpus, std::span<const int> pair_indices,
                               const MaskResult* mask, const ExperimentConfig& cfg) {
  const auto& tc = cfg.train;
  const int n = static_cast<int>(pair_indices.size());
  const int d = params.config().encoder.embed_dim;
  const bool decode = tc.run_decoder();

  struct Sample {
    ad::Tape tape;
    EncodedVars img, txt;
    ad::Var logits;
  };
  std::vector<Sample> samples(static_cast<std::size_t>(n));
  parallel_for(n, tc.threads, [&](int i) {
    auto& s = samples[static_cast<std::size_t>(i)];
    const auto& [im, ci] = corpus.pairs[static_cast<std::size_t>(pair_indices[static_cast<std::size_t>(i)])];
    s.img = encode_image_on(s.tape, params, corpus.images[static_cast<std::size_t>(im)]);
    std::span<const std::uint8_t> m;
    if (mask != nullptr) m = mask->masked[static_cast<std::size_t>(i)];
    s.txt = encode_text_on(s.tape, params, corpus.captions[static_cast<std::size_t>(ci)].token_ids, m);
    if (decode) s.logits = decode_on(s.tape, params, s.txt.seq, s.img.seq);
  });

  Matrix raw_img(n, d), raw_txt(n, d);
  EmbeddingBatch batch;
  std::vector<Matrix> logits;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    raw_img.row(i) = ad::val(s.img.cls).row(0);
    raw_txt.row(i) = ad::val(s.txt.cls).row(0);
    const auto& cap = corpus.captions[static_cast<std::size_t>(corpus.pairs[static_cast<std::size_t>(pair_indices[static_cast<std::size_t>(i)])].second)];
    batch.labels.push_back(cap.identity_id);
    batch.caption_lengths.push_back(cap.length());
    if (decode) logits.push_back(ad::val(s.logits));
  }
  if (!raw_img.allFinite() || !raw_txt.allFinite()) {
    throw Error(ErrorKind::kNumeric, std::string("non-finite ") + (raw_img.allFinite() ? "text" : "image") +
                                         " [CLS] features");
  }
  StepResult r;
  auto& bn_img = r.bn_img;
  auto& bn_txt = r.bn_txt;
  batch.image_cls = batchnorm_forward(raw_img, params["bn.img.scale"], params["bn.img.shift"], &bn_img);
  batch.text_cls = batchnorm_forward(raw_txt, params["bn.txt.scale"], params["bn.txt.shift"], &bn_txt);

  static const MaskPlan kEmptyPlan;
  r.loss = total_loss(batch, logits, mask != nullptr ? mask->plan : kEmptyPlan, params["cls.omega"], tc, cfg.sew);

  const auto gi = batchnorm_backward(r.loss.grad_image_cls, params["bn.img.scale"], bn_img);
  const auto gt = batchnorm_backward(r.loss.grad_text_cls, params["bn.txt.scale"], bn_txt);

  parallel_for(n, tc.threads, [&](int i) {
    auto& s = samples[static_cast<std::size_t>(i)];
    s.tape.accumulate(s.img.cls, gi.x.row(i));
    s.tape.accumulate(s.txt.cls, gt.x.row(i));
    if (decode && !r.loss.grad_logits.empty()) s.tape.accumulate(s.logits, r.loss.grad_logits[static_cast<std::size_t>(i)]);
    s.tape.backward();
  });

  r.grads = params.zero_grads();
  for (auto& s : samples) {
    for (const auto& [slot, node] : s.tape.leaves()) {
      const Matrix& g = s.tape.grad(s.tape.node(node));
      if (g.size() != 0) r.grads[static_cast<std::size_t>(slot)] += g;
    }
  }
  r.grads[static_cast<std::size_t>(params.index("bn.img.scale"))] += gi.scale;
  r.grads[static_cast<std::size_t>(params.index("bn.img.shift"))] += gi.shift;
  r.grads[static_cast<std::size_t>(params.index("bn.txt.scale"))] += gt.scale;
  r.grads[static_cast<std::size_t>(params.index("bn.txt.shift"))] += gt.shift;
  r.grads[static_cast<std::size_t>(params.index("cls.omega"))] += r.loss.grad_omega;
  return r;
}

class Adam {
 public:
  Adam(const ModelParams& p, const TrainConfig& tc)
      : lr_(tc.learning_rate), b1_(tc.beta1), b2_(tc.beta2), eps_(tc.adam_eps), m_(p.zero_grads()), v_(p.zero_grads()) {}

  void step(ModelParams& p, const ParamGrads& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.arrays().size(); ++i) {
      auto& a = p.arrays()[i];
      if (!a.trainable) continue;
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g[i].cwiseProduct(g[i]);
      a.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  ParamGrads m_, v_;
  long t_ = 0;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  double pull_i2t = 0, push_i2t = 0, pull_t2i = 0, push_t2i = 0, cls_i2t = 0, cls_t2i = 0;
  double sew = 0, mcm = 0, total = 0;
  double grad_norm = 0;
};

struct TrainReport {
  std::vector<StepRecord> history;
  std::vector<double> epoch_mean_total;
  int steps_per_epoch = 0;
  double wall_seconds = 0;
  std::string checkpoint_path;
};

inline int steps_per_epoch(const Corpus& corpus, int batch_size) {
  return std::max(1, static_cast<int>(pairs_in_split(corpus, Split::kTrain).size()) / batch_size);
}

inline void check_finite(const StepRecord& r) {
  const std::pair<const char*, double> parts[] = {
      {"pull_i2t", r.pull_i2t}, {"push_i2t", r.push_i2t}, {"pull_t2i", r.pull_t2i}, {"push_t2i", r.push_t2i},
      {"cls_i2t", r.cls_i2t},   {"cls_t2i", r.cls_t2i},   {"mcm", r.mcm},           {"grad_norm", r.grad_norm}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kNumeric, std::string("non-finite ") + name + " at epoch " + std::to_string(r.epoch) +
                                           " step " + std::to_string(r.step));
    }
  }
}

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

using StepCallback = std::function<void(const StepRecord&)>;

// Single-threaded runs (threads = 1) are bit-reproducible for a given seed;
// other thread counts give the same result because reductions keep sample
// order.
inline TrainResult train(const Corpus& corpus, const ExperimentConfig& cfg, const StepCallback& on_step = {}) {
  cfg.train.validate();
  cfg.sew.validate();
  cfg.mcm.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult out{init_params(model_config_for(corpus, cfg), cfg.train.seed), {}};
  ModelParams& params = out.params;
  Adam opt(params, cfg.train);
  const int spe = steps_per_epoch(corpus, cfg.train.batch_size);
  out.report.steps_per_epoch = spe;
  std::uint64_t global = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double epoch_sum = 0.0;
    for (int s = 0; s < spe; ++s, ++global) {
      const auto pairs = sample_batch(corpus, Split::kTrain, cfg.train.batch_size, cfg.train.seed, global);
      std::optional<MaskResult> mask;
      if (cfg.train.apply_mask()) {
        std::vector<TokenizedCaption> caps;
        for (int p : pairs) caps.push_back(corpus.captions[static_cast<std::size_t>(corpus.pairs[static_cast<std::size_t>(p)].second)]);
        mask = mask_captions(caps, cfg.mcm, derive_seed(cfg.train.seed, 0x4D, global));
      }
      StepResult step;
      try {
        step = compute_step(params, corpus, pairs, mask ? &*mask : nullptr, cfg);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNumeric) throw;
        throw Error(ErrorKind::kNumeric,
                    std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " + std::to_string(global));
      }
      update_running_stats(params, "img", step.bn_img, cfg.train.batch_size);
      update_running_stats(params, "txt", step.bn_txt, cfg.train.batch_size);
      StepRecord rec;
      rec.epoch = epoch;
      rec.step = static_cast<int>(global);
      rec.pull_i2t = step.loss.sew.pull_i2t;
      rec.push_i2t = step.loss.sew.push_i2t;
      rec.pull_t2i = step.loss.sew.pull_t2i;
      rec.push_t2i = step.loss.sew.push_t2i;
      rec.cls_i2t = step.loss.sew.cls_i2t;
      rec.cls_t2i = step.loss.sew.cls_t2i;
      rec.sew = step.loss.sew.total;
      rec.mcm = step.loss.mcm.loss;
      rec.total = step.loss.total;
      double sq = 0.0;
      for (const auto& g : step.grads) sq += g.squaredNorm();
      rec.grad_norm = std::sqrt(sq);
      check_finite(rec);
      opt.step(params, step.grads);
      epoch_sum += rec.total;
      out.report.history.push_back(rec);
      if (on_step) on_step(rec);
    }
    out.report.epoch_mean_total.push_back(epoch_sum / spe);
  }
  out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace sewcal
