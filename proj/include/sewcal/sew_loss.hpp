#pragma once

// Sew loss: soft pull/push cross-modal matching terms plus projection-based
// classification terms, in both retrieval directions, with per-pair margins
// interpolated from caption length.
//
// All losses return analytic gradients. Log-sum-exp terms are max-shifted;
// at alpha = 32 the raw exponents overflow single precision.

#include "sewcal/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace sewcal {

enum class MarginMode { kFixed, kAdaptive };
enum class Direction { kImageToText, kTextToImage };

struct SewConfig {
  double alpha = 32.0;
  double margin_min = 0.4;
  double margin_max = 0.6;
  int len_min = 20;
  int len_max = 60;
  MarginMode margin_mode = MarginMode::kAdaptive;
  double fixed_margin = 0.5;
  bool count_special_tokens = true;

  void validate() const {
    require(alpha > 0.0, ErrorKind::kValue, "alpha must be positive");
    require(margin_min <= margin_max, ErrorKind::kValue, "margin_min must not exceed margin_max");
    require(len_min < len_max, ErrorKind::kValue, "len_min must be below len_max");
  }
};

// Linear in caption length between (len_min, margin_min) and
// (len_max, margin_max), clamped outside that interval.
inline double adaptive_margin(int length, const SewConfig& cfg) {
  const double frac = static_cast<double>(length - cfg.len_min) / static_cast<double>(cfg.len_max - cfg.len_min);
  const double m = cfg.margin_min + (cfg.margin_max - cfg.margin_min) * frac;
  return std::clamp(m, cfg.margin_min, cfg.margin_max);
}

// Margin of the pair whose caption has `caption_tokens` tokens ([CLS] included).
inline double pair_margin(int caption_tokens, const SewConfig& cfg) {
  if (cfg.margin_mode == MarginMode::kFixed) return cfg.fixed_margin;
  return adaptive_margin(cfg.count_special_tokens ? caption_tokens : caption_tokens - 1, cfg);
}

namespace detail {

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// log(1 + sum_k exp(x_k)).
inline double log1p_sum_exp(std::span<const double> x) {
  if (x.empty()) return 0.0;
  return softplus(log_sum_exp(x));
}

}  // namespace detail

// log(1 + sum_k exp(alpha * (s_k - s_anchor + margin))) over same-identity
// non-paired similarities s_k.
inline double pull_loss(double anchor_sim, std::span<const double> positive_sims, double margin, double alpha) {
  std::vector<double> e;
  e.reserve(positive_sims.size());
  for (double s : positive_sims) e.push_back(alpha * (s - anchor_sim + margin));
  return detail::log1p_sum_exp(e);
}

// log(1 + sum_k sum_j exp(alpha * (n_j - p_k + margin))). The double sum
// factorizes into exp(alpha*margin) * sum_j exp(alpha n_j) * sum_k exp(-alpha p_k).
// Empty positive or negative sets give 0.
inline double push_loss(std::span<const double> positive_sims, std::span<const double> negative_sims, double margin,
                        double alpha) {
  if (positive_sims.empty() || negative_sims.empty()) return 0.0;
  std::vector<double> a, b;
  for (double s : negative_sims) a.push_back(alpha * s);
  for (double s : positive_sims) b.push_back(-alpha * s);
  return detail::softplus(alpha * margin + detail::log_sum_exp(a) + detail::log_sum_exp(b));
}

inline Matrix normalize_rows(const Matrix& x, Eigen::VectorXd* norms = nullptr) {
  Eigen::VectorXd n = x.rowwise().norm();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    require(n(i) > 0.0, ErrorKind::kValue, "zero-norm embedding row " + std::to_string(i));
  }
  Matrix out = x.array().colwise() / n.array();
  if (norms != nullptr) *norms = std::move(n);
  return out;
}

// Gradient w.r.t. x of a function of x/|x| given its gradient w.r.t. x/|x|.
inline Matrix normalize_rows_backward(const Matrix& unit, const Eigen::VectorXd& norms, const Matrix& grad_unit) {
  Eigen::VectorXd dots = (unit.array() * grad_unit.array()).rowwise().sum();
  Matrix g = grad_unit - (unit.array().colwise() * dots.array()).matrix();
  return g.array().colwise() / norms.array();
}

struct MatchingLossOutput {
  double pull = 0.0;  // batch mean of per-anchor pull terms
  double push = 0.0;  // batch mean of per-anchor push terms
  double total = 0.0;
  Matrix grad_image;
  Matrix grad_text;
};

namespace detail {

// Pull + push over anchors = rows of `sims` (anchor i pairs with column i).
// Accumulates d(mean loss)/d(sims) into `grad`.
inline void matching_on_sims(const Matrix& sims, std::span<const int> labels, std::span<const double> margins,
                             double alpha, double& pull_mean, double& push_mean, Matrix& grad) {
  const auto n = sims.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  grad = Matrix::Zero(n, n);
  pull_mean = push_mean = 0.0;
  std::vector<double> e, a, b;
  std::vector<Eigen::Index> pos, neg;
  for (Eigen::Index i = 0; i < n; ++i) {
    pos.clear();
    neg.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        if (j != i) pos.push_back(j);
      } else {
        neg.push_back(j);
      }
    }
    const double m = margins[static_cast<std::size_t>(i)];
    const double anchor = sims(i, i);

    e.clear();
    for (auto k : pos) e.push_back(alpha * (sims(i, k) - anchor + m));
    const double pull = log1p_sum_exp(e);
    pull_mean += pull * inv_n;
    for (std::size_t q = 0; q < pos.size(); ++q) {
      const double w = std::exp(e[q] - pull) * alpha * inv_n;
      grad(i, pos[q]) += w;
      grad(i, i) -= w;
    }

    if (neg.empty()) continue;
    std::vector<Eigen::Index> pset = pos.empty() ? std::vector<Eigen::Index>{i} : pos;
    a.clear();
    b.clear();
    for (auto j : neg) a.push_back(alpha * sims(i, j));
    for (auto k : pset) b.push_back(-alpha * sims(i, k));
    const double la = log_sum_exp(a);
    const double lb = log_sum_exp(b);
    const double z = alpha * m + la + lb;
    const double push = softplus(z);
    push_mean += push * inv_n;
    const double s = sigmoid(z) * alpha * inv_n;
    for (std::size_t q = 0; q < neg.size(); ++q) grad(i, neg[q]) += s * std::exp(a[q] - la);
    for (std::size_t q = 0; q < pset.size(); ++q) grad(i, pset[q]) -= s * std::exp(b[q] - lb);
  }
}

}  // namespace detail

// Image-to-text: anchors are image rows, candidates are text rows.
// Text-to-image: anchors are text rows, candidates are image rows.
// margins[i] belongs to pair (image i, text i).
inline MatchingLossOutput matching_loss(const Matrix& image_cls, const Matrix& text_cls, std::span<const int> labels,
                                        std::span<const double> margins, double alpha, Direction dir) {
  require(image_cls.rows() == text_cls.rows() && image_cls.cols() == text_cls.cols(), ErrorKind::kShape,
          "matching_loss: feature shapes differ");
  require(static_cast<Eigen::Index>(labels.size()) == image_cls.rows() &&
              static_cast<Eigen::Index>(margins.size()) == image_cls.rows(),
          ErrorKind::kShape, "matching_loss: labels/margins length mismatch");
  Eigen::VectorXd nv, nt;
  const Matrix v = normalize_rows(image_cls, &nv);
  const Matrix t = normalize_rows(text_cls, &nt);
  const Matrix sims = v * t.transpose();  // [image x text]

  MatchingLossOutput out;
  Matrix g;
  Matrix gv, gt;
  if (dir == Direction::kImageToText) {
    detail::matching_on_sims(sims, labels, margins, alpha, out.pull, out.push, g);
    gv = g * t;
    gt = g.transpose() * v;
  } else {
    detail::matching_on_sims(sims.transpose(), labels, margins, alpha, out.pull, out.push, g);
    gt = g * v;
    gv = g.transpose() * t;
  }
  out.total = out.pull + out.push;
  out.grad_image = normalize_rows_backward(v, nv, gv);
  out.grad_text = normalize_rows_backward(t, nt, gt);
  return out;
}

// Projection of v onto the direction of t: (v . t/|t|) t/|t|.
inline RowVector project(const RowVector& v, const RowVector& t) {
  const double n = t.norm();
  require(n > 0.0, ErrorKind::kValue, "project: zero-norm direction");
  const RowVector u = t / n;
  return v.dot(u) * u;
}

struct ClassificationLossOutput {
  double loss = 0.0;
  Matrix grad_features;
  Matrix grad_partner;
  Matrix grad_omega;
};

// Cross-entropy over alpha-scaled logits s_c = omega_c/|omega_c| . proj(f_i on
// partner_i), with the margin subtracted from the target logit only. Batch
// mean. For text-to-image pass text as `features` and image as `partner`.
inline ClassificationLossOutput classification_loss(const Matrix& features, const Matrix& partner,
                                                    std::span<const int> labels, const Matrix& omega,
                                                    std::span<const double> margins, double alpha) {
  const auto n = features.rows();
  const auto C = omega.rows();
  require(partner.rows() == n && partner.cols() == features.cols() && omega.cols() == features.cols(),
          ErrorKind::kShape, "classification_loss: shape mismatch");
  require(static_cast<Eigen::Index>(labels.size()) == n && static_cast<Eigen::Index>(margins.size()) == n,
          ErrorKind::kShape, "classification_loss: labels/margins length mismatch");
  for (int y : labels) require(y >= 0 && y < C, ErrorKind::kIndex, "label outside [0, C)");

  Eigen::VectorXd nw, np;
  const Matrix w = normalize_rows(omega, &nw);
  const Matrix u = normalize_rows(partner, &np);
  const double inv_n = 1.0 / static_cast<double>(n);

  ClassificationLossOutput out;
  out.grad_features = Matrix::Zero(n, features.cols());
  Matrix grad_u = Matrix::Zero(n, features.cols());
  Matrix grad_w = Matrix::Zero(C, features.cols());
  Eigen::VectorXd z(C);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double vu = features.row(i).dot(u.row(i));
    const Eigen::VectorXd wu = w * u.row(i).transpose();  // omega_c . u
    const Eigen::VectorXd s = vu * wu;                    // logits before scaling
    z = alpha * s;
    z(y) -= alpha * margins[static_cast<std::size_t>(i)];
    const double zmax = z.maxCoeff();
    const double lse = zmax + std::log((z.array() - zmax).exp().sum());
    out.loss += (lse - z(y)) * inv_n;

    Eigen::VectorXd gs = (z.array() - lse).exp();
    gs(y) -= 1.0;
    gs *= alpha * inv_n;  // dL/ds_c
    const double a = gs.dot(wu);
    const RowVector wsum = gs.transpose() * w;
    out.grad_features.row(i) = a * u.row(i);
    grad_u.row(i) = a * features.row(i) + vu * wsum;
    grad_w.noalias() += (gs * vu) * u.row(i);
  }
  out.grad_partner = normalize_rows_backward(u, np, grad_u);
  out.grad_omega = normalize_rows_backward(w, nw, grad_w);
  return out;
}

inline ClassificationLossOutput classification_loss(const Matrix& image_cls, const Matrix& text_cls,
                                                    std::span<const int> labels, const Matrix& omega,
                                                    std::span<const double> margins, double alpha, Direction dir) {
  if (dir == Direction::kImageToText) return classification_loss(image_cls, text_cls, labels, omega, margins, alpha);
  return classification_loss(text_cls, image_cls, labels, omega, margins, alpha);
}

struct SewLossOutput {
  double pull_i2t = 0.0;
  double push_i2t = 0.0;
  double pull_t2i = 0.0;
  double push_t2i = 0.0;
  double cls_i2t = 0.0;
  double cls_t2i = 0.0;
  double total = 0.0;
  Matrix grad_image;
  Matrix grad_text;
  Matrix grad_omega;
};

inline std::vector<double> pair_margins(std::span<const int> caption_lengths, const SewConfig& cfg) {
  std::vector<double> m;
  m.reserve(caption_lengths.size());
  for (int len : caption_lengths) m.push_back(pair_margin(len, cfg));
  return m;
}

inline SewLossOutput sew_total(const Matrix& image_cls, const Matrix& text_cls, std::span<const int> labels,
                               std::span<const int> caption_lengths, const Matrix& omega, const SewConfig& cfg) {
  cfg.validate();
  const auto margins = pair_margins(caption_lengths, cfg);
  SewLossOutput out;
  const auto i2t = matching_loss(image_cls, text_cls, labels, margins, cfg.alpha, Direction::kImageToText);
  const auto t2i = matching_loss(image_cls, text_cls, labels, margins, cfg.alpha, Direction::kTextToImage);
  const auto ci2t = classification_loss(image_cls, text_cls, labels, omega, margins, cfg.alpha);
  const auto ct2i = classification_loss(text_cls, image_cls, labels, omega, margins, cfg.alpha);
  out.pull_i2t = i2t.pull;
  out.push_i2t = i2t.push;
  out.pull_t2i = t2i.pull;
  out.push_t2i = t2i.push;
  out.cls_i2t = ci2t.loss;
  out.cls_t2i = ct2i.loss;
  out.total = out.pull_i2t + out.push_i2t + out.pull_t2i + out.push_t2i + out.cls_i2t + out.cls_t2i;
  out.grad_image = i2t.grad_image + t2i.grad_image + ci2t.grad_features + ct2i.grad_partner;
  out.grad_text = i2t.grad_text + t2i.grad_text + ci2t.grad_partner + ct2i.grad_features;
  out.grad_omega = ci2t.grad_omega + ct2i.grad_omega;
  return out;
}

}  // namespace sewcal
