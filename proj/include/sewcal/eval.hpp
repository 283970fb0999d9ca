#pragma once

// Retrieval evaluation on the dual-encoder [CLS] outputs: cosine similarity,
// Rank@k, k-reciprocal re-ranking, covariance-spectrum gap and feature dumps.
// Nothing here touches decoder parameters.

#include "sewcal/encoders.hpp"
#include "sewcal/sew_loss.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <vector>

namespace sewcal {

inline Matrix similarity_matrix(const Matrix& queries, const Matrix& gallery) {
  require(queries.cols() == gallery.cols(), ErrorKind::kShape, "similarity_matrix: feature widths differ");
  return normalize_rows(queries) * normalize_rows(gallery).transpose();
}

// Gallery indices of one row by descending score; ties go to the lower index.
inline std::vector<int> ranking_desc(const Eigen::Ref<const RowVector>& scores) {
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  return idx;
}

inline std::vector<int> ranking_asc(const Eigen::Ref<const RowVector>& dist) {
  std::vector<int> idx(static_cast<std::size_t>(dist.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return dist(a) < dist(b); });
  return idx;
}

inline double rank_at_k(const Matrix& sims, std::span<const int> query_labels, std::span<const int> gallery_labels,
                        int k) {
  require(k >= 1, ErrorKind::kValue, "k must be >= 1");
  require(k <= sims.cols(), ErrorKind::kValue, "k exceeds gallery size");
  require(static_cast<Eigen::Index>(query_labels.size()) == sims.rows() &&
              static_cast<Eigen::Index>(gallery_labels.size()) == sims.cols(),
          ErrorKind::kShape, "rank_at_k: label lengths do not match similarity matrix");
  if (sims.rows() == 0) return 0.0;
  int hits = 0;
  for (Eigen::Index q = 0; q < sims.rows(); ++q) {
    const auto order = ranking_desc(sims.row(q));
    for (int r = 0; r < k; ++r) {
      if (gallery_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
          query_labels[static_cast<std::size_t>(q)]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(sims.rows());
}

struct RetrievalResult {
  double rank1 = 0, rank5 = 0, rank10 = 0;
  std::vector<std::vector<int>> ranked;  // per query, gallery indices best first
  bool reranked = false;
};

// `scores` are similarities (higher is better) or, when reranked, negated
// distances.
inline RetrievalResult evaluate_retrieval(const Matrix& scores, std::span<const int> query_labels,
                                          std::span<const int> gallery_labels, bool reranked) {
  RetrievalResult r;
  r.reranked = reranked;
  const int g = static_cast<int>(scores.cols());
  r.rank1 = rank_at_k(scores, query_labels, gallery_labels, std::min(1, g));
  r.rank5 = rank_at_k(scores, query_labels, gallery_labels, std::min(5, g));
  r.rank10 = rank_at_k(scores, query_labels, gallery_labels, std::min(10, g));
  for (Eigen::Index q = 0; q < scores.rows(); ++q) r.ranked.push_back(ranking_desc(scores.row(q)));
  return r;
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking
//
// Items are the q queries followed by the g gallery entries. Pairwise
// distance is 2 - 2 cos, each row scaled by its maximum. For every item the
// k1-reciprocal neighbour set is expanded with the (k1/2)-reciprocal sets of
// its members that overlap it by more than 2/3, weighted by exp(-distance)
// and normalized; k2-nearest-neighbour averaging smooths the weights
// (skipped when k2 = 1). The result mixes the Jaccard distance of the
// weight vectors with the original distance.
// ---------------------------------------------------------------------------

struct RerankParams {
  int k1 = 20;
  int k2 = 6;
  double lambda_mix = 0.3;
};

// sim_qg [q x g], sim_qq [q x q], sim_gg [g x g]; returns distances [q x g].
inline Matrix k_reciprocal_rerank(const Matrix& sim_qg, const Matrix& sim_qq, const Matrix& sim_gg,
                                  const RerankParams& rp) {
  const auto q = sim_qg.rows();
  const auto g = sim_qg.cols();
  require(sim_qq.rows() == q && sim_qq.cols() == q && sim_gg.rows() == g && sim_gg.cols() == g, ErrorKind::kShape,
          "k_reciprocal_rerank: block shapes do not match");
  require(rp.k2 >= 1 && rp.k1 > rp.k2, ErrorKind::kValue, "re-ranking needs k1 > k2 >= 1");
  require(rp.k1 < g, ErrorKind::kValue, "re-ranking needs k1 < gallery size");
  require(rp.lambda_mix >= 0.0 && rp.lambda_mix <= 1.0, ErrorKind::kValue, "lambda_mix must lie in [0, 1]");
  const auto N = q + g;

  Matrix dist(N, N);
  dist.topLeftCorner(q, q) = 2.0 - 2.0 * sim_qq.array();
  dist.topRightCorner(q, g) = 2.0 - 2.0 * sim_qg.array();
  dist.bottomLeftCorner(g, q) = (2.0 - 2.0 * sim_qg.array()).transpose();
  dist.bottomRightCorner(g, g) = 2.0 - 2.0 * sim_gg.array();
  dist = dist.cwiseMax(0.0);
  for (Eigen::Index i = 0; i < N; ++i) {
    const double m = dist.row(i).maxCoeff();
    if (m > 0.0) dist.row(i) /= m;
  }

  std::vector<std::vector<int>> rank(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) rank[static_cast<std::size_t>(i)] = ranking_asc(dist.row(i));

  auto reciprocal = [&](int i, int k) {
    std::vector<int> out;
    const auto& fwd = rank[static_cast<std::size_t>(i)];
    for (int a = 0; a <= k && a < N; ++a) {
      const int cand = fwd[static_cast<std::size_t>(a)];
      const auto& back = rank[static_cast<std::size_t>(cand)];
      for (int b = 0; b <= k && b < N; ++b) {
        if (back[static_cast<std::size_t>(b)] == i) {
          out.push_back(cand);
          break;
        }
      }
    }
    return out;
  };

  const int half = static_cast<int>(std::lround(rp.k1 / 2.0));
  Matrix V = Matrix::Zero(N, N);
  for (int i = 0; i < N; ++i) {
    const auto base = reciprocal(i, rp.k1);
    std::set<int> expanded(base.begin(), base.end());
    for (int c : base) {
      const auto cand = reciprocal(c, half);
      int overlap = 0;
      for (int x : cand) overlap += static_cast<int>(std::count(base.begin(), base.end(), x));
      if (static_cast<double>(overlap) > 2.0 / 3.0 * static_cast<double>(cand.size())) {
        expanded.insert(cand.begin(), cand.end());
      }
    }
    double total = 0.0;
    for (int j : expanded) total += std::exp(-dist(i, j));
    for (int j : expanded) V(i, j) = std::exp(-dist(i, j)) / total;
  }
  if (rp.k2 != 1) {
    Matrix Vqe(N, N);
    for (int i = 0; i < N; ++i) {
      RowVector acc = RowVector::Zero(N);
      for (int a = 0; a < rp.k2; ++a) acc += V.row(rank[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)]);
      Vqe.row(i) = acc / static_cast<double>(rp.k2);
    }
    V = std::move(Vqe);
  }

  Matrix out(q, g);
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < g; ++j) {
      const double inter = V.row(i).cwiseMin(V.row(q + j)).sum();
      const double jac = 1.0 - inter / (2.0 - inter);
      out(i, j) = (1.0 - rp.lambda_mix) * jac + rp.lambda_mix * dist(i, q + j);
    }
  }
  return out;
}

// Convenience form over raw features.
inline Matrix k_reciprocal_rerank(const Matrix& query_feats, const Matrix& gallery_feats, const RerankParams& rp) {
  return k_reciprocal_rerank(similarity_matrix(query_feats, gallery_feats), similarity_matrix(query_feats, query_feats),
                             similarity_matrix(gallery_feats, gallery_feats), rp);
}

// ---------------------------------------------------------------------------
// Spectrum gap
// ---------------------------------------------------------------------------

struct SpectrumReport {
  std::vector<double> image_singular_values;  // descending
  std::vector<double> text_singular_values;
  double gap = 0.0;
};

inline std::vector<double> covariance_spectrum(const Matrix& feats) {
  const Matrix centered = feats.rowwise() - feats.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(feats.rows() - 1);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cov);
  const auto& s = svd.singularValues();  // already descending
  return {s.data(), s.data() + s.size()};
}

// Mean absolute difference of log singular values (epsilon 1e-12) of the two
// centered covariance matrices.
inline SpectrumReport svd_spectrum_gap(const Matrix& image_cls, const Matrix& text_cls) {
  require(image_cls.rows() > 1 && text_cls.rows() > 1, ErrorKind::kValue, "spectrum gap needs more than one row");
  require(image_cls.cols() == text_cls.cols(), ErrorKind::kShape, "spectrum gap: feature widths differ");
  constexpr double eps = 1e-12;
  SpectrumReport r;
  r.image_singular_values = covariance_spectrum(image_cls);
  r.text_singular_values = covariance_spectrum(text_cls);
  const auto n = r.image_singular_values.size();
  for (std::size_t k = 0; k < n; ++k) {
    r.gap += std::abs(std::log(r.image_singular_values[k] + eps) - std::log(r.text_singular_values[k] + eps));
  }
  r.gap /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Split features
// ---------------------------------------------------------------------------

struct SplitFeatures {
  Matrix image_cls;  // one row per image of the split
  Matrix text_cls;   // one row per caption of the split
  std::vector<int> image_labels;
  std::vector<int> text_labels;
};

// Raw [CLS] features by default; `bn_at_eval` applies running-statistics
// BatchNorm instead.
inline SplitFeatures split_features(const Corpus& corpus, Split split, const ModelParams& p, bool bn_at_eval = false) {
  const auto& ids = split_identities(corpus, split);
  const std::set<int> keep(ids.begin(), ids.end());
  std::vector<SyntheticPersonImage> images;
  std::vector<TokenizedCaption> captions;
  SplitFeatures f;
  for (const auto& im : corpus.images) {
    if (keep.count(im.identity_id)) {
      images.push_back(im);
      f.image_labels.push_back(im.identity_id);
    }
  }
  for (const auto& c : corpus.captions) {
    if (keep.count(c.identity_id)) {
      captions.push_back(c);
      f.text_labels.push_back(c.identity_id);
    }
  }
  f.image_cls = encode_image(images, p).cls;
  f.text_cls = encode_text(captions, p).cls;
  if (bn_at_eval) {
    f.image_cls = batchnorm_eval(f.image_cls, p["bn.img.scale"], p["bn.img.shift"], p["bn.img.running_mean"],
                                 p["bn.img.running_var"]);
    f.text_cls = batchnorm_eval(f.text_cls, p["bn.txt.scale"], p["bn.txt.shift"], p["bn.txt.running_mean"],
                                p["bn.txt.running_var"]);
  }
  return f;
}

struct EvalOptions {
  bool rerank = false;
  RerankParams rerank_params;
};

// Text-to-image retrieval over one split.
inline RetrievalResult evaluate_features(const SplitFeatures& f, const EvalOptions& opt) {
  if (!opt.rerank) {
    return evaluate_retrieval(similarity_matrix(f.text_cls, f.image_cls), f.text_labels, f.image_labels, false);
  }
  const Matrix dist = k_reciprocal_rerank(f.text_cls, f.image_cls, opt.rerank_params);
  return evaluate_retrieval(-dist, f.text_labels, f.image_labels, true);
}

// ---------------------------------------------------------------------------
// Feature CSV: header `modality,identity,f0,...,f{d-1}`; image rows first,
// values printed with 17 significant digits so a reload is bit-exact.
// ---------------------------------------------------------------------------

inline std::string features_to_csv(const SplitFeatures& f) {
  std::ostringstream out;
  out.precision(17);
  const auto d = f.image_cls.cols();
  out << "modality,identity";
  for (Eigen::Index k = 0; k < d; ++k) out << ",f" << k;
  out << '\n';
  auto rows = [&](const char* modality, const Matrix& m, const std::vector<int>& labels) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      out << modality << ',' << labels[static_cast<std::size_t>(i)];
      for (Eigen::Index k = 0; k < d; ++k) out << ',' << m(i, k);
      out << '\n';
    }
  };
  rows("image", f.image_cls, f.image_labels);
  rows("text", f.text_cls, f.text_labels);
  return out.str();
}

inline SplitFeatures features_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kParse, "feature CSV is empty");
  require(line.rfind("modality,identity", 0) == 0, ErrorKind::kSchema, "feature CSV header mismatch");
  std::vector<RowVector> img, txt;
  SplitFeatures f;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string modality, cell;
    std::getline(ls, modality, ',');
    std::getline(ls, cell, ',');
    const int id = std::stoi(cell);
    std::vector<double> vals;
    while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
    RowVector row = Eigen::Map<RowVector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    if (modality == "image") {
      img.push_back(row);
      f.image_labels.push_back(id);
    } else if (modality == "text") {
      txt.push_back(row);
      f.text_labels.push_back(id);
    } else {
      throw Error(ErrorKind::kSchema, "feature CSV line " + std::to_string(lineno) + ": unknown modality");
    }
  }
  f.image_cls = stack_rows(img);
  f.text_cls = stack_rows(txt);
  return f;
}

}  // namespace sewcal
