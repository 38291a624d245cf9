#include <catch2/catch_amalgamated.hpp>

#include "gestura/autodiff.hpp"
#include "gestura/nn.hpp"
#include "gestura/random.hpp"

using namespace gestura;
using ad::Tape;
using ad::Var;

namespace {

Matd random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

// Central finite differences of a scalar graph against the analytic
// gradient with respect to one input matrix.
template <typename Build>
void check_grad(Matd x, Build build, double tol = 1e-6, double step = 1e-6) {
  Tape<double> t;
  auto vx = t.input(x, true);
  auto loss = build(t, vx);
  t.backward(loss);
  const Matd g = t.grad_of(vx);

  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Matd xp = x, xm = x;
      xp(i, j) += step;
      xm(i, j) -= step;
      Tape<double> tp, tm;
      const double fp = build(tp, tp.input(xp, false)).value()(0, 0);
      const double fm = build(tm, tm.input(xm, false)).value()(0, 0);
      const double fd = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(fd), std::abs(g(i, j)), 1e-8});
      INFO("entry (" << i << "," << j << ") analytic=" << g(i, j) << " fd=" << fd);
      CHECK(std::abs(g(i, j) - fd) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Rng rng(7);
  Matd a = random_mat(rng, 4, 3);
  Matd b = random_mat(rng, 3, 5);
  Matd bias = random_mat(rng, 1, 5, 0.1);

  check_grad(a, [&](Tape<double>& t, Var<double> x) {
    auto w = t.constant(b);
    auto y = t.add_rowvec(t.matmul(x, w), t.constant(bias));
    y = t.tanh_(y);
    y = t.hadamard(y, y);
    return t.mean_all(y);
  }, 1e-5);

  check_grad(a, [&](Tape<double>& t, Var<double> x) {
    auto y = t.sigmoid(t.scale(x, 1.7));
    auto z = t.leaky_relu(t.affine(x, -0.5, 0.1), 0.1);
    return t.sum_all(t.concat_cols(y, z));
  }, 1e-5);
}

TEST_CASE("softmax, slices and strided gathers match finite differences") {
  Rng rng(11);
  Matd a = random_mat(rng, 6, 4);
  check_grad(a, [&](Tape<double>& t, Var<double> x) {
    auto sm = t.row_softmax(x);
    auto part = t.slice_cols(t.slice_rows(sm, 1, 4), 1, 2);
    auto g = t.gather_strided_rows(x, 1, 2, 3);
    return t.add(t.sum_all(t.hadamard(part, part)), t.mean_all(t.tanh_(g)));
  }, 1e-5);
}

TEST_CASE("row softmax rows sum to one") {
  Rng rng(3);
  Tape<double> t;
  auto y = t.row_softmax(t.constant(random_mat(rng, 5, 9, 3.0)));
  for (Eigen::Index r = 0; r < 5; ++r)
    CHECK(std::abs(y.value().row(r).sum() - 1.0) < 1e-12);
}

TEST_CASE("conv1d, pooling and padding match finite differences") {
  Rng rng(13);
  const int batch = 2, frames = 8, cin = 3, cout = 4, kernel = 3;
  Matd x = random_mat(rng, frames * batch, cin);
  Matd w = random_mat(rng, kernel * cin, cout, 0.5);
  Matd b = random_mat(rng, 1, cout, 0.1);

  check_grad(x, [&](Tape<double>& t, Var<double> v) {
    auto y = t.conv1d(v, t.constant(w), t.constant(b), kernel, batch);
    y = t.time_pool2(y, batch);
    y = t.time_upsample2(y, batch);
    y = t.time_pad(y, batch, 2);
    return t.mean_all(t.tanh_(y));
  }, 1e-5);

  check_grad(w, [&](Tape<double>& t, Var<double> vw) {
    auto y = t.conv1d(t.constant(x), vw, t.constant(b), kernel, batch);
    return t.sum_all(t.hadamard(y, y));
  }, 1e-5);
}

TEST_CASE("conv1d is length preserving and batch-consistent") {
  Rng rng(17);
  const int kernel = 5;
  Matd x1 = random_mat(rng, 10, 3);
  Matd x2 = random_mat(rng, 10, 3);
  Matd w = random_mat(rng, kernel * 3, 2);
  Matd b = Matd::Zero(1, 2);

  Tape<double> t;
  auto y1 = t.conv1d(t.constant(x1), t.constant(w), t.constant(b), kernel, 1);
  auto y2 = t.conv1d(t.constant(x2), t.constant(w), t.constant(b), kernel, 1);
  CHECK(y1.rows() == 10);

  // Interleave the two sequences as a batch of 2; each lane must equal its solo run.
  Matd xb(20, 3);
  for (int f = 0; f < 10; ++f) {
    xb.row(2 * f) = x1.row(f);
    xb.row(2 * f + 1) = x2.row(f);
  }
  auto yb = t.conv1d(t.constant(xb), t.constant(w), t.constant(b), kernel, 2);
  for (int f = 0; f < 10; ++f) {
    CHECK((yb.value().row(2 * f) - y1.value().row(f)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((yb.value().row(2 * f + 1) - y2.value().row(f)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("loss kernels match finite differences") {
  Rng rng(19);
  Matd pred = random_mat(rng, 5, 6);
  Matd target = random_mat(rng, 5, 6);

  check_grad(pred, [&](Tape<double>& t, Var<double> p) {
    return t.l1_sum(p, t.constant(target));
  }, 1e-4);

  check_grad(pred, [&](Tape<double>& t, Var<double> p) {
    return t.huber_sum(p, t.constant(target), 1.0);
  }, 1e-4);

  Matd zp = random_mat(rng, 7, 5);
  Matd za = random_mat(rng, 7, 5);
  Vecd w(7);
  for (int i = 0; i < 7; ++i) w(i) = rng.uniform();
  check_grad(zp, [&](Tape<double>& t, Var<double> p) {
    return t.cosine_consistency(p, t.constant(za), w, 1e-8);
  }, 1e-5);
  check_grad(za, [&](Tape<double>& t, Var<double> a) {
    return t.cosine_consistency(t.constant(zp), a, w, 1e-8);
  }, 1e-5);

  Matd scores(4, 1);
  scores << 0.3, 0.8, 0.55, 0.1;
  Vecd labels(4);
  labels << 1, 0, 1, 0;
  check_grad(scores, [&](Tape<double>& t, Var<double> s) {
    return t.bce(s, labels, 1e-7);
  }, 1e-6);

  Matd logits = random_mat(rng, 6, 2);
  Matd onehot = Matd::Zero(6, 2);
  for (int i = 0; i < 6; ++i) onehot(i, i % 2) = 1.0;
  check_grad(logits, [&](Tape<double>& t, Var<double> l) {
    return t.softmax_cross_entropy(l, onehot);
  }, 1e-6);
}

TEST_CASE("topk_mean picks the k largest and spreads gradient evenly") {
  Tape<double> t;
  Matd s(4, 1);
  s << 0.9, 0.1, 0.8, 0.2;
  auto v = t.input(s, true);
  auto y = t.topk_mean(v, 2);
  CHECK(y.value()(0, 0) == Catch::Approx(0.85));
  t.backward(y);
  Matd g = t.grad_of(v);
  CHECK(g(0, 0) == Catch::Approx(0.5));
  CHECK(g(2, 0) == Catch::Approx(0.5));
  CHECK(g(1, 0) == 0.0);
  CHECK(g(3, 0) == 0.0);

  Tape<double> t2;
  auto m = t2.topk_mean(t2.constant(s), 4);
  CHECK(m.value()(0, 0) == Catch::Approx(s.mean()));
  CHECK_THROWS_AS(t2.topk_mean(t2.constant(s), 5), ArgumentError);
}

TEST_CASE("cosine consistency handles zero rows through the eps guard") {
  Tape<double> t;
  Matd zp = Matd::Zero(3, 4);
  Matd za = Matd::Ones(3, 4);
  Vecd w = Vecd::Ones(3);
  auto loss = t.cosine_consistency(t.input(zp, true), t.constant(za), w, 1e-8);
  CHECK(loss.value()(0, 0) == Catch::Approx(3.0));  // dot 0 per row -> term 1

  Vecd wneg = w;
  wneg(1) = -0.5;
  CHECK_THROWS_AS(t.cosine_consistency(t.constant(zp), t.constant(za), wneg, 1e-8),
                  ArgumentError);
}

TEST_CASE("gru is causal and shape preserving") {
  Rng rng(23);
  nn::ParameterSet<double> ps;
  nn::Gru<double> gru(ps, rng, "gru", 3, {5, 4});

  Matd x1 = random_mat(rng, 10, 3);
  Matd x2 = x1;
  x2.row(9).setConstant(100.0);  // differ only at the last frame

  Tape<double> t;
  auto y1 = gru.forward(t, t.constant(x1), 1);
  auto y2 = gru.forward(t, t.constant(x2), 1);
  CHECK(y1.rows() == 10);
  CHECK(y1.cols() == 4);
  // prefix of the outputs agrees where inputs agree
  CHECK((y1.value().topRows(9) - y2.value().topRows(9)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((y1.value().row(9) - y2.value().row(9)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("gru gradients match finite differences") {
  Rng rng(29);
  nn::ParameterSet<double> ps;
  nn::Gru<double> gru(ps, rng, "gru", 2, {3});
  Matd x = random_mat(rng, 6, 2);

  check_grad(x, [&](Tape<double>& t, Var<double> v) {
    return t.mean_all(gru.forward(t, v, 1));
  }, 1e-5);

  // and with respect to a recurrent weight
  Matd w0 = ps.at("gru.l0.whh").value;
  check_grad(w0, [&](Tape<double>& t, Var<double> vw) {
    ps.at("gru.l0.whh").value = vw.value();
    auto y = t.mean_all(gru.forward(t, t.constant(x), 1));
    ps.at("gru.l0.whh").value = w0;
    return y;
  }, 1e-5);
}

TEST_CASE("unet output is length preserving and zero at zero input") {
  Rng rng(31);
  nn::ParameterSet<double> ps;
  nn::UNet1d<double> unet(ps, rng, "unet", 3, 4, {6, 8}, 3, nn::Act::Tanh);

  Tape<double> t;
  // 10 frames is not a multiple of 4; internal padding must crop back.
  auto y = unet.forward(t, t.constant(random_mat(rng, 10, 3)), 1);
  CHECK(y.rows() == 10);
  CHECK(y.cols() == 4);

  auto z = unet.forward(t, t.constant(Matd::Zero(12, 3)), 1);
  CHECK(z.value().cwiseAbs().maxCoeff() == 0.0);  // zero biases, tanh(0)=0
}

TEST_CASE("unet gradients match finite differences") {
  Rng rng(37);
  nn::ParameterSet<double> ps;
  nn::UNet1d<double> unet(ps, rng, "unet", 2, 3, {4}, 3, nn::Act::Tanh);
  Matd x = random_mat(rng, 8, 2);
  check_grad(x, [&](Tape<double>& t, Var<double> v) {
    return t.mean_all(unet.forward(t, v, 1));
  }, 1e-5);
}

TEST_CASE("parameter gradients accumulate through the tape") {
  Rng rng(41);
  nn::ParameterSet<double> ps;
  nn::Linear<double> lin(ps, rng, "lin", 3, 2);
  Matd x = random_mat(rng, 4, 3);

  ps.zero_grads();
  Tape<double> t;
  auto loss = t.mean_all(lin.forward(t, t.constant(x)));
  t.backward(loss);
  const Matd g1 = ps.at("lin.w").grad;
  CHECK(g1.cwiseAbs().maxCoeff() > 0.0);

  // second pass accumulates
  Tape<double> t2;
  t2.backward(t2.mean_all(lin.forward(t2, t2.constant(x))));
  CHECK((ps.at("lin.w").grad - 2.0 * g1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("adam reduces a quadratic") {
  nn::ParameterSet<double> ps;
  auto p = ps.create("p", Matd::Constant(2, 2, 5.0));
  nn::Adam<double> adam(0.1);
  for (int it = 0; it < 500; ++it) {
    ps.zero_grads();
    p->grad = p->value;  // gradient of 0.5 ||p||^2
    adam.step(ps);
  }
  CHECK(p->value.cwiseAbs().maxCoeff() < 1e-2);
}
