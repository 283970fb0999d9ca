#pragma once

// Central-difference gradient checking.

#include "sewcal/trainer.hpp"

#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace sewcal {

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares analytic[i] with (f(x+eps e_i) - f(x-eps e_i)) / 2eps for each i in
// `indices`. `coord(i)` must return a reference to coordinate i of the point
// `f` reads; it is restored after each probe.
template <typename Loss, typename Coord>
GradCheckResult grad_check(Loss&& f, Coord&& coord, const std::vector<std::size_t>& indices,
                           const std::function<double(std::size_t)>& analytic, double eps) {
  GradCheckResult r;
  for (std::size_t i : indices) {
    double& x = coord(i);
    const double saved = x;
    x = saved + eps;
    const double fp = f();
    x = saved - eps;
    const double fm = f();
    x = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic(i);
    const double e = relative_error(a, numeric);
    if (e > r.max_rel_err || r.checked == 0) {
      r.max_rel_err = std::max(r.max_rel_err, e);
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  return r;
}

// Worst of several checks; `checked` adds up.
inline GradCheckResult merge_results(std::initializer_list<GradCheckResult> parts) {
  GradCheckResult worst;
  std::size_t checked = 0;
  for (const auto& r : parts) {
    checked += r.checked;
    if (r.max_rel_err >= worst.max_rel_err) worst = r;
  }
  worst.checked = checked;
  return worst;
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(rng.below(static_cast<std::uint64_t>(n)));
  return out;
}

// Gradient check of a scalar function of one matrix.
inline GradCheckResult grad_check_matrix(const std::function<double(const Matrix&)>& f, Matrix x,
                                         const Matrix& analytic, std::size_t trials, double eps, Rng& rng) {
  const auto idx = sample_indices(static_cast<std::size_t>(x.size()), trials, rng);
  return grad_check([&] { return f(x); }, [&](std::size_t i) -> double& { return x.data()[i]; }, idx,
                    [&](std::size_t i) { return analytic.data()[i]; }, eps);
}

// A scalar loss over model parameters with its analytic gradient.
struct ParamLossSpec {
  std::function<double(const ModelParams&)> value;
  std::function<ParamGrads(const ModelParams&)> gradient;
};

// Checks `trials` trainable flat coordinates drawn uniformly at random.
inline GradCheckResult grad_check(const ParamLossSpec& spec, ModelParams params, std::size_t trials, double eps,
                                  std::uint64_t seed) {
  const ParamGrads g = spec.gradient(params);
  std::vector<std::size_t> trainable;
  std::size_t flat = 0;
  for (const auto& a : params.arrays()) {
    for (Eigen::Index k = 0; k < a.value.size(); ++k, ++flat) {
      if (a.trainable) trainable.push_back(flat);
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < trials; ++i) idx.push_back(trainable[rng.below(static_cast<std::uint64_t>(trainable.size()))]);
  auto analytic = [&](std::size_t i) {
    const auto [a, off] = params.locate(i);
    return g[static_cast<std::size_t>(a)].data()[off];
  };
  return grad_check([&] { return spec.value(params); }, [&](std::size_t i) -> double& { return params.flat(i); }, idx,
                    analytic, eps);
}

// ---------------------------------------------------------------------------
// Named checks (n = 8, d = 16, float64) shared by the CLI and the test suites.
// ---------------------------------------------------------------------------

struct NamedCheckConfig {
  std::size_t trials = 100;
  double eps = 1e-5;
  std::uint64_t seed = 1;
  int n = 8;
  int d = 16;
};

namespace detail {

// Four identities, two rows each: every anchor has one positive and six
// negatives.
inline std::vector<int> paired_labels(int n) {
  std::vector<int> y;
  for (int i = 0; i < n; ++i) y.push_back(i / 2);
  return y;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline Corpus tiny_corpus(std::uint64_t seed) {
  CorpusConfig cc;
  cc.num_identities = 6;
  cc.images_per_identity = 2;
  cc.captions_per_image = 2;
  cc.verbosity_min = 6;
  cc.verbosity_max = 14;
  cc.test_identities = 1;
  return generate_corpus(cc, seed);
}

inline ExperimentConfig tiny_experiment(int d) {
  ExperimentConfig cfg;
  cfg.encoder.embed_dim = d;
  cfg.encoder.depth = 2;
  cfg.encoder.heads = 4;
  cfg.encoder.mlp_ratio = 2;
  cfg.encoder.max_text_tokens = 16;
  cfg.sew.len_min = 6;
  cfg.sew.len_max = 14;
  cfg.mcm.mask_ratio = 0.3;
  return cfg;
}

}  // namespace detail

// "sew": sew_total w.r.t. both [CLS] inputs and omega (C = 5 classes).
inline GradCheckResult check_sew_gradients(const NamedCheckConfig& nc) {
  Rng rng(derive_seed(nc.seed, 11));
  const auto labels = detail::paired_labels(nc.n);
  std::vector<int> lengths;
  for (int i = 0; i < nc.n; ++i) lengths.push_back(6 + rng.below(20));
  const SewConfig cfg{.len_min = 8, .len_max = 24};
  const Matrix img = detail::random_matrix(nc.n, nc.d, rng);
  const Matrix txt = detail::random_matrix(nc.n, nc.d, rng);
  const Matrix omega = detail::random_matrix(5, nc.d, rng);
  const auto out = sew_total(img, txt, labels, lengths, omega, cfg);
  const std::size_t per = (nc.trials + 2) / 3;
  const auto gi = grad_check_matrix([&](const Matrix& x) { return sew_total(x, txt, labels, lengths, omega, cfg).total; },
                                    img, out.grad_image, per, nc.eps, rng);
  const auto gt = grad_check_matrix([&](const Matrix& x) { return sew_total(img, x, labels, lengths, omega, cfg).total; },
                                    txt, out.grad_text, per, nc.eps, rng);
  const auto gw = grad_check_matrix([&](const Matrix& x) { return sew_total(img, txt, labels, lengths, x, cfg).total; },
                                    omega, out.grad_omega, per, nc.eps, rng);
  return merge_results({gi, gt, gw});
}

// "cls": both classification directions summed, w.r.t. inputs and omega.
inline GradCheckResult check_classification_gradients(const NamedCheckConfig& nc) {
  Rng rng(derive_seed(nc.seed, 12));
  const auto labels = detail::paired_labels(nc.n);
  std::vector<double> margins;
  for (int i = 0; i < nc.n; ++i) margins.push_back(rng.uniform(0.4, 0.6));
  const double alpha = 32.0;
  const Matrix img = detail::random_matrix(nc.n, nc.d, rng, 0.3);
  const Matrix txt = detail::random_matrix(nc.n, nc.d, rng, 0.3);
  const Matrix omega = detail::random_matrix(5, nc.d, rng);
  auto loss = [&](const Matrix& v, const Matrix& t, const Matrix& w) {
    return classification_loss(v, t, labels, w, margins, alpha).loss +
           classification_loss(t, v, labels, w, margins, alpha).loss;
  };
  const auto a = classification_loss(img, txt, labels, omega, margins, alpha);
  const auto b = classification_loss(txt, img, labels, omega, margins, alpha);
  const std::size_t per = (nc.trials + 2) / 3;
  const auto gi = grad_check_matrix([&](const Matrix& x) { return loss(x, txt, omega); }, img,
                                    a.grad_features + b.grad_partner, per, nc.eps, rng);
  const auto gt = grad_check_matrix([&](const Matrix& x) { return loss(img, x, omega); }, txt,
                                    a.grad_partner + b.grad_features, per, nc.eps, rng);
  const auto gw = grad_check_matrix([&](const Matrix& x) { return loss(img, txt, x); }, omega,
                                    a.grad_omega + b.grad_omega, per, nc.eps, rng);
  return merge_results({gi, gt, gw});
}

// "mcm": mcm_loss(decode(text_seq, image_seq)) w.r.t. decoder parameters.
inline GradCheckResult check_mcm_gradients(const NamedCheckConfig& nc) {
  const Corpus corpus = detail::tiny_corpus(nc.seed);
  const auto cfg = detail::tiny_experiment(nc.d);
  const ModelParams params = init_params(model_config_for(corpus, cfg), nc.seed);
  Rng rng(derive_seed(nc.seed, 13));
  const int c1 = params.config().encoder.max_image_tokens;
  std::vector<Matrix> text_seq, image_seq;
  std::vector<int> lengths;
  std::vector<TokenizedCaption> caps;
  for (int i = 0; i < nc.n; ++i) {
    const auto& cap = corpus.captions[static_cast<std::size_t>(i)];
    caps.push_back(cap);
    lengths.push_back(cap.length());
    text_seq.push_back(detail::random_matrix(cap.length(), nc.d, rng));
    image_seq.push_back(detail::random_matrix(c1, nc.d, rng));
  }
  const auto plan = mask_captions(caps, cfg.mcm, nc.seed).plan;

  auto forward = [&](const ModelParams& p, std::vector<ad::Tape>* tapes, std::vector<ad::Var>* outs) {
    std::vector<Matrix> logits;
    for (int i = 0; i < nc.n; ++i) {
      ad::Tape local;
      ad::Tape& t = tapes ? (*tapes)[static_cast<std::size_t>(i)] : local;
      ad::Var l = decode_on(t, p, t.constant(text_seq[static_cast<std::size_t>(i)]),
                            t.constant(image_seq[static_cast<std::size_t>(i)]));
      logits.push_back(ad::val(l));
      if (outs) outs->push_back(l);
    }
    return mcm_loss(logits, plan);
  };

  ParamLossSpec spec;
  spec.value = [&](const ModelParams& p) { return forward(p, nullptr, nullptr).loss; };
  spec.gradient = [&](const ModelParams& p) {
    std::vector<ad::Tape> tapes(static_cast<std::size_t>(nc.n));
    std::vector<ad::Var> outs;
    const auto r = forward(p, &tapes, &outs);
    ParamGrads g = p.zero_grads();
    for (int i = 0; i < nc.n; ++i) {
      auto& t = tapes[static_cast<std::size_t>(i)];
      t.accumulate(outs[static_cast<std::size_t>(i)], r.grad_logits[static_cast<std::size_t>(i)]);
      t.backward();
      for (const auto& [slot, node] : t.leaves()) {
        const Matrix& gg = t.grad(t.node(node));
        if (gg.size()) g[static_cast<std::size_t>(slot)] += gg;
      }
    }
    return g;
  };
  // Only decoder coordinates influence this loss; restrict sampling to them.
  ModelParams dec_only(params.config());
  for (const auto& a : params.arrays()) {
    ParamArray copy = a;
    copy.trainable = a.name.rfind(kDecoderPrefix, 0) == 0;
    dec_only.add(std::move(copy));
  }
  return grad_check(spec, dec_only, nc.trials, nc.eps, derive_seed(nc.seed, 14));
}

// "total": lambda1 * Sew + lambda2 * MCM through BatchNorm, decoder and both
// encoders, w.r.t. every trainable parameter.
inline GradCheckResult check_total_gradients(const NamedCheckConfig& nc) {
  const Corpus corpus = detail::tiny_corpus(nc.seed);
  auto cfg = detail::tiny_experiment(nc.d);
  ModelParams params = init_params(model_config_for(corpus, cfg), nc.seed);
  const auto pairs = sample_batch(corpus, Split::kTrain, nc.n, nc.seed, 0);
  std::vector<TokenizedCaption> caps;
  for (int p : pairs) caps.push_back(corpus.captions[static_cast<std::size_t>(corpus.pairs[static_cast<std::size_t>(p)].second)]);
  const auto mask = mask_captions(caps, cfg.mcm, nc.seed);

  ParamLossSpec spec;
  spec.value = [&](const ModelParams& p) { return compute_step(p, corpus, pairs, &mask, cfg).loss.total; };
  spec.gradient = [&](const ModelParams& p) { return compute_step(p, corpus, pairs, &mask, cfg).grads; };
  return grad_check(spec, params, nc.trials, nc.eps, derive_seed(nc.seed, 15));
}

inline GradCheckResult run_named_grad_check(const std::string& name, const NamedCheckConfig& nc) {
  if (name == "sew") return check_sew_gradients(nc);
  if (name == "cls") return check_classification_gradients(nc);
  if (name == "mcm") return check_mcm_gradients(nc);
  if (name == "total") return check_total_gradients(nc);
  throw Error(ErrorKind::kValue, "unknown gradient check '" + name + "' (expected sew|cls|mcm|total)");
}

}  // namespace sewcal
