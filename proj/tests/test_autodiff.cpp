#include "sewcal/autodiff.hpp"
#include "sewcal/grad_check.hpp"

#include <gtest/gtest.h>

using namespace sewcal;

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Checks every coordinate of every input against central differences of
// sum(out .* W) for a fixed random W.
double op_max_rel_err(const Builder& build, std::vector<Matrix> inputs, std::uint64_t seed) {
  Rng rng(seed);
  Matrix w;
  auto objective = [&](bool with_grad, std::vector<Matrix>* grads) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(t.leaf(static_cast<int>(i), inputs[i]));
    ad::Var out = build(t, vars);
    if (w.size() == 0) w = random_matrix(ad::val(out).rows(), ad::val(out).cols(), rng);
    ad::Var s = ad::weighted_sum(out, w);
    const double v = ad::val(s)(0, 0);
    if (with_grad) {
      t.backward(s);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Matrix& g = t.grad(vars[i]);
        grads->push_back(g.size() ? g : Matrix::Zero(inputs[i].rows(), inputs[i].cols()));
      }
    }
    return v;
  };
  std::vector<Matrix> grads;
  objective(true, &grads);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(inputs[i].size()));
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    const auto r = grad_check([&] { return objective(false, nullptr); },
                              [&](std::size_t k) -> double& { return inputs[i].data()[k]; }, idx,
                              [&](std::size_t k) { return grads[i].data()[k]; }, 1e-6);
    worst = std::max(worst, r.max_rel_err);
  }
  return worst;
}

}  // namespace

TEST(GradCheckHarness, QuadraticCalibration) {
  double theta = 3.0;
  const auto r = grad_check([&] { return theta * theta; }, [&](std::size_t) -> double& { return theta; },
                            std::vector<std::size_t>{0}, [](std::size_t) { return 6.0; }, 1e-4);
  EXPECT_LE(r.max_rel_err, 1e-8);
  EXPECT_NEAR(r.worst_numeric, 6.0, 1e-8);
}

TEST(GradCheckHarness, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

TEST(Autodiff, MatmulAndAdd) {
  Rng rng(1);
  const auto e = op_max_rel_err(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::add(ad::matmul(v[0], v[1]), v[2]); },
      {random_matrix(3, 4, rng), random_matrix(4, 5, rng), random_matrix(3, 5, rng)}, 2);
  EXPECT_LE(e, 1e-6);
}

TEST(Autodiff, LinearBroadcastsBias) {
  Rng rng(3);
  const auto e = op_max_rel_err(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::linear(v[0], v[1], v[2]); },
      {random_matrix(5, 3, rng), random_matrix(3, 2, rng), random_matrix(1, 2, rng)}, 4);
  EXPECT_LE(e, 1e-6);
}

TEST(Autodiff, SliceAndConcat) {
  Rng rng(5);
  const auto e = op_max_rel_err(
      [](ad::Tape&, const std::vector<ad::Var>& v) {
        return ad::concat_rows(ad::slice_rows(v[0], 1, 2), v[1]);
      },
      {random_matrix(4, 3, rng), random_matrix(2, 3, rng)}, 6);
  EXPECT_LE(e, 1e-6);
}

TEST(Autodiff, EmbedWithSubstitution) {
  Rng rng(7);
  const std::vector<int> ids = {2, 0, 2, 3};
  const std::vector<std::uint8_t> rep = {0, 1, 0, 1};
  const auto e = op_max_rel_err(
      [&](ad::Tape&, const std::vector<ad::Var>& v) { return ad::embed(v[0], ids, rep, v[1]); },
      {random_matrix(5, 3, rng), random_matrix(1, 3, rng)}, 8);
  EXPECT_LE(e, 1e-6);
}

TEST(Autodiff, EmbedRejectsOutOfRangeIds) {
  ad::Tape t;
  auto table = t.constant(Matrix::Zero(4, 2));
  const std::vector<int> ids = {4};
  EXPECT_THROW(ad::embed(table, ids), Error);
}

TEST(Autodiff, LayerNorm) {
  Rng rng(9);
  const auto e = op_max_rel_err(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); },
      {random_matrix(4, 6, rng), random_matrix(1, 6, rng), random_matrix(1, 6, rng)}, 10);
  EXPECT_LE(e, 1e-5);
}

TEST(Autodiff, Gelu) {
  Rng rng(11);
  const auto e = op_max_rel_err([](ad::Tape&, const std::vector<ad::Var>& v) { return ad::gelu(v[0]); },
                                {random_matrix(4, 5, rng)}, 12);
  EXPECT_LE(e, 1e-6);
}

TEST(Autodiff, MultiHeadAttention) {
  Rng rng(13);
  const auto e = op_max_rel_err(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::attention(v[0], v[1], v[2], 2); },
      {random_matrix(3, 4, rng), random_matrix(5, 4, rng), random_matrix(5, 4, rng)}, 14);
  EXPECT_LE(e, 1e-5);
}

TEST(Autodiff, AttentionMatchesNaiveSoftmax) {
  Rng rng(15);
  const Matrix q = random_matrix(2, 4, rng), k = random_matrix(3, 4, rng), v = random_matrix(3, 4, rng);
  ad::Tape t;
  const Matrix out = ad::val(ad::attention(t.constant(q), t.constant(k), t.constant(v), 2));
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 2; ++i) {
      std::vector<double> s(3);
      double z = 0.0;
      for (int j = 0; j < 3; ++j) {
        s[static_cast<std::size_t>(j)] = q.row(i).segment(2 * h, 2).dot(k.row(j).segment(2 * h, 2)) / std::sqrt(2.0);
      }
      const double m = *std::max_element(s.begin(), s.end());
      for (auto& x : s) z += (x = std::exp(x - m));
      for (int c = 0; c < 2; ++c) {
        double expect = 0.0;
        for (int j = 0; j < 3; ++j) expect += s[static_cast<std::size_t>(j)] / z * v(j, 2 * h + c);
        EXPECT_NEAR(out(i, 2 * h + c), expect, 1e-12);
      }
    }
  }
}

TEST(Autodiff, SharedLeafAccumulates) {
  ad::Tape t;
  Matrix x(1, 1);
  x << 3.0;
  auto a = t.leaf(0, x);
  auto b = t.leaf(0, x);
  EXPECT_EQ(a.id, b.id);
  auto y = ad::matmul(a, b);  // x^2
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(a)(0, 0), 6.0);
}
