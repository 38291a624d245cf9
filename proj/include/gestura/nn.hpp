#pragma once

// Network building blocks over the autodiff tape. Layers own their
// parameters through a ParameterSet, which fixes both the initialization
// draw order and the serialization order of checkpoints.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "gestura/autodiff.hpp"
#include "gestura/common.hpp"
#include "gestura/random.hpp"

namespace gestura::nn {

enum class Act { Tanh, LeakyRelu, None };

inline Act act_from_string(const std::string& s) {
  if (s == "tanh") return Act::Tanh;
  if (s == "leaky_relu") return Act::LeakyRelu;
  if (s == "none") return Act::None;
  throw ConfigError("unknown activation: " + s);
}

inline std::string act_to_string(Act a) {
  switch (a) {
    case Act::Tanh: return "tanh";
    case Act::LeakyRelu: return "leaky_relu";
    default: return "none";
  }
}

template <typename S>
ad::Var<S> activate(ad::Tape<S>& t, ad::Var<S> x, Act a) {
  switch (a) {
    case Act::Tanh: return t.tanh_(x);
    case Act::LeakyRelu: return t.leaky_relu(x, S(0.1));
    default: return x;
  }
}

template <typename S>
class ParameterSet {
 public:
  using Param = ad::Parameter<S>;

  std::shared_ptr<Param> create(const std::string& name, Mat<S> value) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    auto p = std::make_shared<Param>(name, std::move(value));
    index_[name] = params_.size();
    params_.push_back(p);
    return p;
  }

  std::shared_ptr<Param> create_xavier(const std::string& name, Eigen::Index rows,
                                       Eigen::Index cols, Rng& rng) {
    const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Mat<S> w(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i)
        w(i, j) = static_cast<S>(rng.uniform(-lim, lim));
    return create(name, std::move(w));
  }

  std::shared_ptr<Param> create_uniform(const std::string& name, Eigen::Index rows,
                                        Eigen::Index cols, double lim, Rng& rng) {
    Mat<S> w(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i)
        w(i, j) = static_cast<S>(rng.uniform(-lim, lim));
    return create(name, std::move(w));
  }

  std::shared_ptr<Param> create_zero(const std::string& name, Eigen::Index rows,
                                     Eigen::Index cols) {
    return create(name, Mat<S>::Zero(rows, cols));
  }

  const std::vector<std::shared_ptr<Param>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
    return *params_[it->second];
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::shared_ptr<Param>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<S>& ps, Rng& rng, const std::string& prefix, int in, int out,
         bool bias = true) {
    w_ = ps.create_xavier(prefix + ".w", in, out, rng);
    if (bias) b_ = ps.create_zero(prefix + ".b", 1, out);
  }

  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> x) const {
    auto y = t.matmul(x, t.param(*w_));
    if (b_) y = t.add_rowvec(y, t.param(*b_));
    return y;
  }

  ad::Parameter<S>& weight() { return *w_; }

 private:
  std::shared_ptr<ad::Parameter<S>> w_, b_;
};

template <typename S>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterSet<S>& ps, Rng& rng, const std::string& prefix, int cin, int cout,
         int kernel)
      : kernel_(kernel) {
    const double lim = std::sqrt(6.0 / static_cast<double>(kernel * (cin + cout)));
    w_ = ps.create_uniform(prefix + ".w", Eigen::Index(kernel) * cin, cout, lim, rng);
    b_ = ps.create_zero(prefix + ".b", 1, cout);
  }

  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> x, int batch) const {
    return t.conv1d(x, t.param(*w_), t.param(*b_), kernel_, batch);
  }

 private:
  std::shared_ptr<ad::Parameter<S>> w_, b_;
  int kernel_ = 0;
};

// Stack of same-padding temporal convolutions with a pointwise activation
// after every layer.
template <typename S>
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(ParameterSet<S>& ps, Rng& rng, const std::string& prefix, int cin,
            const std::vector<int>& channels, int kernel, Act act)
      : act_(act) {
    int c = cin;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      convs_.emplace_back(ps, rng, prefix + ".conv" + std::to_string(i), c, channels[i],
                          kernel);
      c = channels[i];
    }
    out_channels_ = c;
  }

  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> x, int batch) const {
    for (const auto& conv : convs_) x = activate(t, conv.forward(t, x, batch), act_);
    return x;
  }

  int out_channels() const { return out_channels_; }

 private:
  std::vector<Conv1d<S>> convs_;
  Act act_ = Act::Tanh;
  int out_channels_ = 0;
};

// Stacked gated recurrent layers run forward in time over a time-major
// batch; h0 is zero. Gate order is (reset, update, candidate) and the
// state update is h' = (1-z) * n + z * h.
template <typename S>
class Gru {
 public:
  Gru() = default;
  Gru(ParameterSet<S>& ps, Rng& rng, const std::string& prefix, int in,
      const std::vector<int>& hidden) {
    int c = in;
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      const int h = hidden[l];
      const double lim = 1.0 / std::sqrt(static_cast<double>(h));
      Layer layer;
      const std::string p = prefix + ".l" + std::to_string(l);
      layer.wih = ps.create_uniform(p + ".wih", c, 3 * h, lim, rng);
      layer.whh = ps.create_uniform(p + ".whh", h, 3 * h, lim, rng);
      layer.bih = ps.create_zero(p + ".bih", 1, 3 * h);
      layer.bhh = ps.create_zero(p + ".bhh", 1, 3 * h);
      layer.hidden = h;
      layers_.push_back(std::move(layer));
      c = h;
    }
    out_dim_ = c;
  }

  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> x, int batch) const {
    const Eigen::Index rows = x.value().rows();
    if (batch < 1 || rows % batch != 0) throw ArgumentError("gru: rows not a multiple of batch");
    const Eigen::Index frames = rows / batch;
    for (const auto& layer : layers_) x = run_layer(t, layer, x, batch, frames);
    return x;
  }

  int out_dim() const { return out_dim_; }

 private:
  struct Layer {
    std::shared_ptr<ad::Parameter<S>> wih, whh, bih, bhh;
    int hidden = 0;
  };

  ad::Var<S> run_layer(ad::Tape<S>& t, const Layer& layer, ad::Var<S> x, int batch,
                       Eigen::Index frames) const {
    const int h = layer.hidden;
    auto wih = t.param(*layer.wih);
    auto whh = t.param(*layer.whh);
    auto bih = t.param(*layer.bih);
    auto bhh = t.param(*layer.bhh);
    ad::Var<S> hs = t.constant(Mat<S>::Zero(batch, h));
    std::vector<ad::Var<S>> outputs;
    outputs.reserve(static_cast<std::size_t>(frames));
    for (Eigen::Index f = 0; f < frames; ++f) {
      auto xt = t.slice_rows(x, f * batch, batch);
      auto gi = t.add_rowvec(t.matmul(xt, wih), bih);
      auto gh = t.add_rowvec(t.matmul(hs, whh), bhh);
      auto r = t.sigmoid(t.add(t.slice_cols(gi, 0, h), t.slice_cols(gh, 0, h)));
      auto z = t.sigmoid(t.add(t.slice_cols(gi, h, h), t.slice_cols(gh, h, h)));
      auto n = t.tanh_(t.add(t.slice_cols(gi, 2 * h, h),
                             t.hadamard(r, t.slice_cols(gh, 2 * h, h))));
      // h' = (1-z)*n + z*h = n - z*n + z*h
      hs = t.add(t.sub(n, t.hadamard(z, n)), t.hadamard(z, hs));
      outputs.push_back(hs);
    }
    return t.concat_rows_many(outputs);
  }

  std::vector<Layer> layers_;
  int out_dim_ = 0;
};

// 1D UNet over time: conv + pool per level down, conv bottleneck, then
// upsample + skip concat + conv per level up, and a kernel-1 projection to
// the output width. Input length is padded to a multiple of 2^depth and
// cropped back, so any T is accepted.
template <typename S>
class UNet1d {
 public:
  UNet1d() = default;
  UNet1d(ParameterSet<S>& ps, Rng& rng, const std::string& prefix, int cin, int cout,
         const std::vector<int>& level_channels, int kernel, Act act)
      : act_(act), depth_(static_cast<int>(level_channels.size())) {
    if (level_channels.empty()) throw ConfigError("unet: needs at least one level");
    int c = cin;
    for (int i = 0; i < depth_; ++i) {
      enc_.emplace_back(ps, rng, prefix + ".enc" + std::to_string(i), c,
                        level_channels[i], kernel);
      c = level_channels[i];
    }
    bottleneck_ = Conv1d<S>(ps, rng, prefix + ".mid", c, c, kernel);
    for (int i = depth_ - 1; i >= 0; --i) {
      const int skip = level_channels[i];
      const int up_in = (i == depth_ - 1) ? c : level_channels[i + 1];
      dec_.emplace_back(ps, rng, prefix + ".dec" + std::to_string(i), up_in + skip,
                        level_channels[i], kernel);
    }
    out_ = Conv1d<S>(ps, rng, prefix + ".out", level_channels[0], cout, 1);
  }

  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> x, int batch) const {
    const Eigen::Index rows = x.value().rows();
    if (batch < 1 || rows % batch != 0) throw ArgumentError("unet: rows not a multiple of batch");
    const Eigen::Index frames = rows / batch;
    const Eigen::Index mult = Eigen::Index(1) << depth_;
    const Eigen::Index padded = ((frames + mult - 1) / mult) * mult;
    x = t.time_pad(x, batch, padded - frames);

    std::vector<ad::Var<S>> skips;
    for (int i = 0; i < depth_; ++i) {
      x = activate(t, enc_[i].forward(t, x, batch), act_);
      skips.push_back(x);
      x = t.time_pool2(x, batch);
    }
    x = activate(t, bottleneck_.forward(t, x, batch), act_);
    for (int i = depth_ - 1; i >= 0; --i) {
      x = t.time_upsample2(x, batch);
      x = t.concat_cols(x, skips[static_cast<std::size_t>(i)]);
      x = activate(t, dec_[static_cast<std::size_t>(depth_ - 1 - i)].forward(t, x, batch),
                   act_);
    }
    x = out_.forward(t, x, batch);
    if (padded != frames) x = t.slice_rows(x, 0, frames * batch);
    return x;
  }

 private:
  std::vector<Conv1d<S>> enc_, dec_;
  Conv1d<S> bottleneck_, out_;
  Act act_ = Act::Tanh;
  int depth_ = 0;
};

template <typename S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterSet<S>& ps) {
    if (m_.empty()) init(ps);
    ++steps_;
    const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(steps_));
    const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(steps_));
    const auto& params = ps.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      m_[i] = beta1_ * m_[i] + (S(1) - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (S(1) - beta2_) * p.grad.cwiseProduct(p.grad);
      p.value.array() -=
          lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    }
  }

  long steps() const { return steps_; }
  S learning_rate() const { return lr_; }

  // Moment access for checkpoint round-trips.
  std::vector<Mat<S>>& moments1() { return m_; }
  std::vector<Mat<S>>& moments2() { return v_; }
  void restore(long steps) { steps_ = steps; }
  void ensure_initialized(ParameterSet<S>& ps) {
    if (m_.empty()) init(ps);
  }

 private:
  void init(ParameterSet<S>& ps) {
    for (const auto& p : ps.all()) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  S lr_ = S(1e-4), beta1_ = S(0.9), beta2_ = S(0.999), eps_ = S(1e-8);
  long steps_ = 0;
  std::vector<Mat<S>> m_, v_;
};

}  // namespace gestura::nn
