#pragma once

// Reverse-mode tape over dense Eigen matrices.
//
// Sequence data is stored time-major: a batch of B sequences with T frames
// and C channels is one (T*B) x C matrix whose rows [t*B, (t+1)*B) hold
// frame t across the batch. Framewise ops (linear maps, activations,
// losses) therefore apply to the whole batch with a single matrix op;
// recurrent and convolutional ops address frames through B-row blocks.
//
// Ops only register a backward closure when some input requires a
// gradient, so running a frozen model through a tape costs little more
// than the plain forward math.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "gestura/common.hpp"

namespace gestura::ad {

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter(std::string n, Mat<S> v)
      : name(std::move(n)), value(std::move(v)),
        grad(Mat<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Mat<S>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename S>
class Tape {
 public:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool needs_grad = false;
    bool grad_init = false;
    std::function<void()> backward;
    Parameter<S>* param = nullptr;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat<S>& value(Var<S> v) const { return nodes_[v.idx].value; }

  // Gradient of the last backward() with respect to a leaf made by input().
  Mat<S> grad_of(Var<S> v) const {
    const Node& n = nodes_[v.idx];
    if (!n.grad_init) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  Var<S> constant(Mat<S> v) { return make(std::move(v), false); }

  Var<S> input(Mat<S> v, bool needs_grad = false) {
    return make(std::move(v), needs_grad);
  }

  Var<S> param(Parameter<S>& p) {
    Var<S> v = make(p.value, true);
    nodes_[v.idx].param = &p;
    return v;
  }

  // Runs backward closures in reverse creation order and folds leaf
  // gradients into their bound parameters.
  void backward(Var<S> loss) {
    const Node& ln = nodes_[loss.idx];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw ArgumentError("backward: loss must be 1x1");
    grad(loss.idx).setOnes();
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.grad_init) continue;
      if (n.backward) n.backward();
      if (n.param) n.param->grad += n.grad;
    }
  }

  // ---- elementwise and linear ops ----

  Var<S> add(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "add");
    Var<S> out = make(val(a) + val(b), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        if (needs(a)) grad(a.idx) += grad(out.idx);
        if (needs(b)) grad(b.idx) += grad(out.idx);
      });
    return out;
  }

  Var<S> sub(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "sub");
    Var<S> out = make(val(a) - val(b), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        if (needs(a)) grad(a.idx) += grad(out.idx);
        if (needs(b)) grad(b.idx) -= grad(out.idx);
      });
    return out;
  }

  // b is 1 x C, broadcast over the rows of a.
  Var<S> add_rowvec(Var<S> a, Var<S> b) {
    if (val(b).rows() != 1 || val(b).cols() != val(a).cols())
      throw ArgumentError("add_rowvec: bias shape mismatch");
    Mat<S> y = val(a);
    y.rowwise() += val(b).row(0);
    Var<S> out = make(std::move(y), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        if (needs(a)) grad(a.idx) += grad(out.idx);
        if (needs(b)) grad(b.idx) += grad(out.idx).colwise().sum();
      });
    return out;
  }

  Var<S> hadamard(Var<S> a, Var<S> b) {
    check_same_shape(a, b, "hadamard");
    Var<S> out = make(val(a).cwiseProduct(val(b)), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        if (needs(a)) grad(a.idx) += grad(out.idx).cwiseProduct(val(b));
        if (needs(b)) grad(b.idx) += grad(out.idx).cwiseProduct(val(a));
      });
    return out;
  }

  // alpha * a + beta, elementwise.
  Var<S> affine(Var<S> a, S alpha, S beta) {
    Var<S> out = make((val(a).array() * alpha + beta).matrix(), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out, alpha] {
        grad(a.idx) += alpha * grad(out.idx);
      });
    return out;
  }

  Var<S> scale(Var<S> a, S alpha) { return affine(a, alpha, S(0)); }

  Var<S> matmul(Var<S> a, Var<S> b) {
    if (val(a).cols() != val(b).rows())
      throw ArgumentError("matmul: inner dimensions disagree");
    Var<S> out = make(val(a) * val(b), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        if (needs(a)) grad(a.idx).noalias() += grad(out.idx) * val(b).transpose();
        if (needs(b)) grad(b.idx).noalias() += val(a).transpose() * grad(out.idx);
      });
    return out;
  }

  Var<S> transpose(Var<S> a) {
    Var<S> out = make(val(a).transpose(), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out] {
        grad(a.idx) += grad(out.idx).transpose();
      });
    return out;
  }

  // ---- activations ----

  Var<S> sigmoid(Var<S> a) {
    Mat<S> y = (S(1) / (S(1) + (-val(a).array()).exp())).matrix();
    Var<S> out = make(std::move(y), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out] {
        const auto& y = val(out).array();
        grad(a.idx).array() += grad(out.idx).array() * y * (S(1) - y);
      });
    return out;
  }

  Var<S> tanh_(Var<S> a) {
    Var<S> out = make(val(a).array().tanh().matrix(), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out] {
        const auto& y = val(out).array();
        grad(a.idx).array() += grad(out.idx).array() * (S(1) - y * y);
      });
    return out;
  }

  Var<S> leaky_relu(Var<S> a, S slope) {
    Mat<S> y = val(a).unaryExpr([slope](S x) { return x > S(0) ? x : slope * x; });
    Var<S> out = make(std::move(y), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out, slope] {
        grad(a.idx).array() +=
            grad(out.idx).array() *
            val(a).unaryExpr([slope](S x) { return x > S(0) ? S(1) : slope; }).array();
      });
    return out;
  }

  // ---- shape ops ----

  Var<S> concat_cols(Var<S> a, Var<S> b) {
    if (val(a).rows() != val(b).rows())
      throw ArgumentError("concat_cols: row counts disagree");
    Mat<S> y(val(a).rows(), val(a).cols() + val(b).cols());
    y.leftCols(val(a).cols()) = val(a);
    y.rightCols(val(b).cols()) = val(b);
    Var<S> out = make(std::move(y), needs(a) || needs(b));
    if (needs(out))
      set_backward(out, [this, a, b, out] {
        const auto ca = val(a).cols();
        const auto cb = val(b).cols();
        if (needs(a)) grad(a.idx) += grad(out.idx).leftCols(ca);
        if (needs(b)) grad(b.idx) += grad(out.idx).rightCols(cb);
      });
    return out;
  }

  Var<S> concat_rows_many(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows_many: empty input");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts[0]).cols();
    bool any_needs = false;
    for (const auto& p : parts) {
      if (val(p).cols() != cols)
        throw ArgumentError("concat_rows_many: column counts disagree");
      rows += val(p).rows();
      any_needs = any_needs || needs(p);
    }
    Mat<S> y(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      y.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    Var<S> out = make(std::move(y), any_needs);
    if (needs(out)) {
      auto parts_copy = std::make_shared<std::vector<Var<S>>>(parts);
      set_backward(out, [this, parts_copy, out] {
        Eigen::Index r = 0;
        for (const auto& p : *parts_copy) {
          const auto n = val(p).rows();
          if (needs(p)) grad(p.idx) += grad(out.idx).middleRows(r, n);
          r += n;
        }
      });
    }
    return out;
  }

  Var<S> slice_rows(Var<S> a, Eigen::Index i0, Eigen::Index n) {
    if (i0 < 0 || n < 0 || i0 + n > val(a).rows())
      throw ArgumentError("slice_rows: range out of bounds");
    Var<S> out = make(val(a).middleRows(i0, n), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out, i0, n] {
        grad(a.idx).middleRows(i0, n) += grad(out.idx);
      });
    return out;
  }

  Var<S> slice_cols(Var<S> a, Eigen::Index j0, Eigen::Index n) {
    if (j0 < 0 || n < 0 || j0 + n > val(a).cols())
      throw ArgumentError("slice_cols: range out of bounds");
    Var<S> out = make(val(a).middleCols(j0, n), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out, j0, n] {
        grad(a.idx).middleCols(j0, n) += grad(out.idx);
      });
    return out;
  }

  // Rows start, start+stride, ... (count of them). Used to pull one
  // sequence's frames out of a time-major batch.
  Var<S> gather_strided_rows(Var<S> a, Eigen::Index start, Eigen::Index stride,
                             Eigen::Index count) {
    if (start < 0 || stride <= 0 || count <= 0 ||
        start + (count - 1) * stride >= val(a).rows())
      throw ArgumentError("gather_strided_rows: range out of bounds");
    Mat<S> y(count, val(a).cols());
    for (Eigen::Index i = 0; i < count; ++i) y.row(i) = val(a).row(start + i * stride);
    Var<S> out = make(std::move(y), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out, start, stride, count] {
        for (Eigen::Index i = 0; i < count; ++i)
          grad(a.idx).row(start + i * stride) += grad(out.idx).row(i);
      });
    return out;
  }

  // ---- softmax ----

  Var<S> row_softmax(Var<S> a) {
    Mat<S> y = val(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const S m = y.row(r).maxCoeff();
      y.row(r) = (y.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    Var<S> out = make(std::move(y), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out] {
        const Mat<S>& y = val(out);
        const Mat<S>& gy = grad(out.idx);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const S dot = y.row(r).dot(gy.row(r));
          grad(a.idx).row(r).array() +=
              y.row(r).array() * (gy.row(r).array() - dot);
        }
      });
    return out;
  }

  // ---- reductions ----

  Var<S> sum_all(Var<S> a) {
    Mat<S> y(1, 1);
    y(0, 0) = val(a).sum();
    Var<S> out = make(std::move(y), needs(a));
    if (needs(out))
      set_backward(out, [this, a, out] {
        grad(a.idx).array() += grad(out.idx)(0, 0);
      });
    return out;
  }

  Var<S> mean_all(Var<S> a) {
    const S n = static_cast<S>(val(a).size());
    return scale(sum_all(a), S(1) / n);
  }

  // ---- temporal ops on time-major batches ----

  // 1D convolution over time with same-length zero padding. x is (T*B) x Cin,
  // w is (K*Cin) x Cout with taps ordered [k=0 .. K-1], bias 1 x Cout. K odd.
  Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, int kernel, int batch) {
    const Eigen::Index rows = val(x).rows();
    const Eigen::Index cin = val(x).cols();
    if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("conv1d: kernel must be odd");
    if (batch < 1 || rows % batch != 0) throw ArgumentError("conv1d: rows not a multiple of batch");
    if (val(w).rows() != Eigen::Index(kernel) * cin)
      throw ArgumentError("conv1d: weight rows must be kernel*cin");
    const Eigen::Index frames = rows / batch;
    const int pad = (kernel - 1) / 2;

    auto im2col = std::make_shared<Mat<S>>(rows, Eigen::Index(kernel) * cin);
    im2col->setZero();
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index shift = Eigen::Index(k - pad) * batch;  // source offset in rows
      const Eigen::Index src_lo = std::max<Eigen::Index>(0, shift);
      const Eigen::Index src_hi = std::min<Eigen::Index>(rows, rows + shift);
      if (src_hi <= src_lo) continue;
      const Eigen::Index dst_lo = src_lo - shift;
      const Eigen::Index n = src_hi - src_lo;
      im2col->block(dst_lo, Eigen::Index(k) * cin, n, cin) = val(x).middleRows(src_lo, n);
    }
    Mat<S> y = (*im2col) * val(w);
    y.rowwise() += val(b).row(0);
    Var<S> out = make(std::move(y), needs(x) || needs(w) || needs(b));
    if (needs(out))
      set_backward(out, [this, x, w, b, out, im2col, kernel, batch, cin, rows, pad] {
        const Mat<S>& gy = grad(out.idx);
        if (needs(b)) grad(b.idx) += gy.colwise().sum();
        if (needs(w)) grad(w.idx).noalias() += im2col->transpose() * gy;
        if (needs(x)) {
          Mat<S> gcol = gy * val(w).transpose();  // rows x (K*Cin)
          for (int k = 0; k < kernel; ++k) {
            const Eigen::Index shift = Eigen::Index(k - pad) * batch;
            const Eigen::Index src_lo = std::max<Eigen::Index>(0, shift);
            const Eigen::Index src_hi = std::min<Eigen::Index>(rows, rows + shift);
            if (src_hi <= src_lo) continue;
            const Eigen::Index dst_lo = src_lo - shift;
            const Eigen::Index n = src_hi - src_lo;
            grad(x.idx).middleRows(src_lo, n) +=
                gcol.block(dst_lo, Eigen::Index(k) * cin, n, cin);
          }
        }
      });
    return out;
  }

  // Average-pool pairs of frames. T must be even.
  Var<S> time_pool2(Var<S> x, int batch) {
    const Eigen::Index rows = val(x).rows();
    if (batch < 1 || rows % batch != 0) throw ArgumentError("time_pool2: bad batch");
    const Eigen::Index frames = rows / batch;
    if (frames % 2 != 0) throw ArgumentError("time_pool2: frame count must be even");
    Mat<S> y(rows / 2, val(x).cols());
    for (Eigen::Index t = 0; t < frames / 2; ++t)
      y.middleRows(t * batch, batch) =
          S(0.5) * (val(x).middleRows(2 * t * batch, batch) +
                    val(x).middleRows((2 * t + 1) * batch, batch));
    Var<S> out = make(std::move(y), needs(x));
    if (needs(out))
      set_backward(out, [this, x, out, batch] {
        const Eigen::Index half = val(out).rows() / batch;
        for (Eigen::Index t = 0; t < half; ++t) {
          grad(x.idx).middleRows(2 * t * batch, batch) +=
              S(0.5) * grad(out.idx).middleRows(t * batch, batch);
          grad(x.idx).middleRows((2 * t + 1) * batch, batch) +=
              S(0.5) * grad(out.idx).middleRows(t * batch, batch);
        }
      });
    return out;
  }

  // Nearest-neighbour upsample by 2 in time.
  Var<S> time_upsample2(Var<S> x, int batch) {
    const Eigen::Index rows = val(x).rows();
    if (batch < 1 || rows % batch != 0) throw ArgumentError("time_upsample2: bad batch");
    const Eigen::Index frames = rows / batch;
    Mat<S> y(rows * 2, val(x).cols());
    for (Eigen::Index t = 0; t < frames; ++t) {
      y.middleRows(2 * t * batch, batch) = val(x).middleRows(t * batch, batch);
      y.middleRows((2 * t + 1) * batch, batch) = val(x).middleRows(t * batch, batch);
    }
    Var<S> out = make(std::move(y), needs(x));
    if (needs(out))
      set_backward(out, [this, x, out, batch] {
        const Eigen::Index frames = val(x).rows() / batch;
        for (Eigen::Index t = 0; t < frames; ++t)
          grad(x.idx).middleRows(t * batch, batch) +=
              grad(out.idx).middleRows(2 * t * batch, batch) +
              grad(out.idx).middleRows((2 * t + 1) * batch, batch);
      });
    return out;
  }

  // Append `extra` zero frames at the end of the sequence.
  Var<S> time_pad(Var<S> x, int batch, Eigen::Index extra) {
    if (extra < 0) throw ArgumentError("time_pad: negative pad");
    if (extra == 0) return x;
    Mat<S> y = Mat<S>::Zero(val(x).rows() + extra * batch, val(x).cols());
    y.topRows(val(x).rows()) = val(x);
    Var<S> out = make(std::move(y), needs(x));
    if (needs(out))
      set_backward(out, [this, x, out] {
        grad(x.idx) += grad(out.idx).topRows(val(x).rows());
      });
    return out;
  }

  // ---- loss kernels ----

  // sum |pred - target|.
  Var<S> l1_sum(Var<S> pred, Var<S> target) {
    check_same_shape(pred, target, "l1_sum");
    Mat<S> diff = val(pred) - val(target);
    Mat<S> y(1, 1);
    y(0, 0) = diff.array().abs().sum();
    auto sign = std::make_shared<Mat<S>>(
        diff.unaryExpr([](S d) { return d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0)); }));
    Var<S> out = make(std::move(y), needs(pred) || needs(target));
    if (needs(out))
      set_backward(out, [this, pred, target, out, sign] {
        const S g = grad(out.idx)(0, 0);
        if (needs(pred)) grad(pred.idx) += g * (*sign);
        if (needs(target)) grad(target.idx) -= g * (*sign);
      });
    return out;
  }

  // sum of elementwise Huber: 0.5 d^2 for |d| <= delta, delta(|d| - 0.5 delta) above.
  Var<S> huber_sum(Var<S> pred, Var<S> target, S delta) {
    check_same_shape(pred, target, "huber_sum");
    if (delta <= S(0)) throw ArgumentError("huber_sum: delta must be positive");
    Mat<S> diff = val(pred) - val(target);
    Mat<S> y(1, 1);
    y(0, 0) = diff.unaryExpr([delta](S d) {
                    const S a = std::abs(d);
                    return a <= delta ? S(0.5) * d * d : delta * (a - S(0.5) * delta);
                  }).sum();
    auto dgrad = std::make_shared<Mat<S>>(
        diff.unaryExpr([delta](S d) { return std::clamp(d, -delta, delta); }));
    Var<S> out = make(std::move(y), needs(pred) || needs(target));
    if (needs(out))
      set_backward(out, [this, pred, target, out, dgrad] {
        const S g = grad(out.idx)(0, 0);
        if (needs(pred)) grad(pred.idx) += g * (*dgrad);
        if (needs(target)) grad(target.idx) -= g * (*dgrad);
      });
    return out;
  }

  // sum_r w_r * (1 - <p_r, a_r> / max(|p_r| |a_r|, eps)). Weights are fixed.
  Var<S> cosine_consistency(Var<S> zp, Var<S> za, const Vec<S>& w, S eps) {
    check_same_shape(zp, za, "cosine_consistency");
    if (w.size() != val(zp).rows())
      throw ArgumentError("cosine_consistency: weight length mismatch");
    if (eps <= S(0)) throw ArgumentError("cosine_consistency: eps must be positive");
    if ((w.array() < S(0)).any())
      throw ArgumentError("cosine_consistency: negative saliency weight");
    const Mat<S>& p = val(zp);
    const Mat<S>& a = val(za);
    S total = S(0);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const S dot = p.row(r).dot(a.row(r));
      const S m = std::max(p.row(r).norm() * a.row(r).norm(), eps);
      total += w(r) * (S(1) - dot / m);
    }
    Mat<S> y(1, 1);
    y(0, 0) = total;
    auto wcopy = std::make_shared<Vec<S>>(w);
    Var<S> out = make(std::move(y), needs(zp) || needs(za));
    if (needs(out))
      set_backward(out, [this, zp, za, out, wcopy, eps] {
        const S g = grad(out.idx)(0, 0);
        const Mat<S>& p = val(zp);
        const Mat<S>& a = val(za);
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          const S wr = (*wcopy)(r);
          if (wr == S(0)) continue;
          const S np = p.row(r).norm();
          const S na = a.row(r).norm();
          const S prod = np * na;
          const S dot = p.row(r).dot(a.row(r));
          if (prod > eps) {
            if (needs(zp))
              grad(zp.idx).row(r) +=
                  g * wr * (-a.row(r) / prod + (dot / (np * np * prod)) * p.row(r));
            if (needs(za))
              grad(za.idx).row(r) +=
                  g * wr * (-p.row(r) / prod + (dot / (na * na * prod)) * a.row(r));
          } else {
            if (needs(zp)) grad(zp.idx).row(r) += g * wr * (-a.row(r) / eps);
            if (needs(za)) grad(za.idx).row(r) += g * wr * (-p.row(r) / eps);
          }
        }
      });
    return out;
  }

  // Mean binary cross-entropy over rows of an N x 1 score column.
  Var<S> bce(Var<S> score, const Vec<S>& labels, S clamp_at) {
    if (val(score).cols() != 1 || val(score).rows() != labels.size())
      throw ArgumentError("bce: score must be Nx1 matching labels");
    const Eigen::Index n = labels.size();
    S total = S(0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S s = std::clamp(val(score)(i, 0), clamp_at, S(1) - clamp_at);
      total += -(labels(i) * std::log(s) + (S(1) - labels(i)) * std::log(S(1) - s));
    }
    Mat<S> y(1, 1);
    y(0, 0) = total / static_cast<S>(n);
    auto lab = std::make_shared<Vec<S>>(labels);
    Var<S> out = make(std::move(y), needs(score));
    if (needs(out))
      set_backward(out, [this, score, out, lab, clamp_at, n] {
        const S g = grad(out.idx)(0, 0) / static_cast<S>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const S s = val(score)(i, 0);
          if (s <= clamp_at || s >= S(1) - clamp_at) continue;  // clamped region is flat
          grad(score.idx)(i, 0) += g * (s - (*lab)(i)) / (s * (S(1) - s));
        }
      });
    return out;
  }

  // Mean of the k largest entries of a T x 1 column. Ties resolved toward
  // lower indices; the mean is unaffected by which tied element is taken.
  Var<S> topk_mean(Var<S> scores, int k) {
    if (val(scores).cols() != 1) throw ArgumentError("topk_mean: scores must be Tx1");
    const Eigen::Index t = val(scores).rows();
    if (k < 1 || Eigen::Index(k) > t)
      throw ArgumentError("topk_mean: k out of range [1, T]");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(t));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) {
      return val(scores)(i, 0) > val(scores)(j, 0);
    });
    auto top = std::make_shared<std::vector<Eigen::Index>>(order.begin(), order.begin() + k);
    S total = S(0);
    for (auto i : *top) total += val(scores)(i, 0);
    Mat<S> y(1, 1);
    y(0, 0) = total / static_cast<S>(k);
    Var<S> out = make(std::move(y), needs(scores));
    if (needs(out))
      set_backward(out, [this, scores, out, top, k] {
        const S g = grad(out.idx)(0, 0) / static_cast<S>(k);
        for (auto i : *top) grad(scores.idx)(i, 0) += g;
      });
    return out;
  }

  // Mean softmax cross-entropy of N x C logits against one-hot rows.
  Var<S> softmax_cross_entropy(Var<S> logits, const Mat<S>& onehot) {
    if (val(logits).rows() != onehot.rows() || val(logits).cols() != onehot.cols())
      throw ArgumentError("softmax_cross_entropy: shape mismatch");
    const Eigen::Index n = onehot.rows();
    auto probs = std::make_shared<Mat<S>>(val(logits));
    for (Eigen::Index r = 0; r < n; ++r) {
      const S m = probs->row(r).maxCoeff();
      probs->row(r) = (probs->row(r).array() - m).exp();
      probs->row(r) /= probs->row(r).sum();
    }
    S total = S(0);
    const S floor = S(1e-7);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < onehot.cols(); ++c)
        if (onehot(r, c) != S(0))
          total += -onehot(r, c) * std::log(std::max((*probs)(r, c), floor));
    Mat<S> y(1, 1);
    y(0, 0) = total / static_cast<S>(n);
    auto hot = std::make_shared<Mat<S>>(onehot);
    Var<S> out = make(std::move(y), needs(logits));
    if (needs(out))
      set_backward(out, [this, logits, out, probs, hot, n] {
        const S g = grad(out.idx)(0, 0) / static_cast<S>(n);
        grad(logits.idx) += g * (*probs - *hot);
      });
    return out;
  }

 private:
  std::vector<Node> nodes_;

  const Mat<S>& val(Var<S> v) const { return nodes_[v.idx].value; }
  bool needs(Var<S> v) const { return nodes_[v.idx].needs_grad; }

  Mat<S>& grad(int i) {
    Node& n = nodes_[i];
    if (!n.grad_init) {
      n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
      n.grad_init = true;
    }
    return n.grad;
  }

  Var<S> make(Mat<S> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
  }

  template <typename F>
  void set_backward(Var<S> v, F&& f) {
    nodes_[v.idx].backward = std::forward<F>(f);
  }

  void check_same_shape(Var<S> a, Var<S> b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw ArgumentError(std::string(op) + ": shape mismatch");
  }
};

}  // namespace gestura::ad
