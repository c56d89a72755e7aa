#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dks/tensor.hpp"

namespace dks {

enum class Mode { train, eval };

/// A named tensor as exposed by modules for optimizers and checkpoints.
/// Running statistics are not trainable and never see the optimizer.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  bool running_stat = false;
};

/// Gaussian fan-in initialization: std = sqrt(2 / fan_in), mean 0.
template <typename T>
void init_he_normal(Tensor<T>& w, int64_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T& v : w.data_mut()) v = static_cast<T>(dist(rng));
}

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, bool bias,
              std::mt19937_64& rng)
      : w_({cout, cin, k, k}, T(0), true), stride_(stride), pad_(pad) {
    init_he_normal(w_, cin * k * k, rng);
    if (bias) b_ = Tensor<T>({cout}, T(0), true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w_, b_, stride_, pad_); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".w", w_, true, false});
    if (b_) out.push_back({prefix + ".b", *b_, true, false});
  }

  int64_t stride() const { return stride_; }
  const Tensor<T>& weight() const { return w_; }

 private:
  Tensor<T> w_;
  std::optional<Tensor<T>> b_;
  int64_t stride_ = 1, pad_ = 0;
};

template <typename T>
class BatchNorm2dLayer {
 public:
  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(int64_t channels)
      : gamma_({channels}, T(1), true),
        beta_({channels}, T(0), true),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batch_norm2d(x, gamma_, beta_, running_mean_.data_mut(), running_var_.data_mut(),
                        mode == Mode::train, momentum_, eps_);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".gamma", gamma_, true, false});
    out.push_back({prefix + ".beta", beta_, true, false});
    out.push_back({prefix + ".running_mean", running_mean_, false, true});
    out.push_back({prefix + ".running_var", running_var_, false, true});
  }

  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  T momentum_ = T(0.1);
  T eps_ = T(1e-5);
};

template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, std::mt19937_64& rng)
      : w_({out, in}, T(0), true), b_({out}, T(0), true) {
    init_he_normal(w_, in, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w_, b_); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".w", w_, true, false});
    out.push_back({prefix + ".b", b_, true, false});
  }

 private:
  Tensor<T> w_, b_;
};

/// Two 3x3 conv/BN pairs with an additive shortcut. When the block changes
/// shape (stride > 1 or channel growth) the shortcut is a projection:
/// 1x1 conv with the same stride followed by BN. conv -> BN -> ReLU ordering,
/// final ReLU after the addition.
template <typename T>
class BasicResidualBlock {
 public:
  BasicResidualBlock() = default;
  BasicResidualBlock(int64_t cin, int64_t cout, int64_t stride, std::mt19937_64& rng)
      : conv1_(cin, cout, 3, stride, 1, false, rng),
        bn1_(cout),
        conv2_(cout, cout, 3, 1, 1, false, rng),
        bn2_(cout),
        projected_(stride != 1 || cin != cout) {
    if (projected_) {
      proj_conv_ = Conv2dLayer<T>(cin, cout, 1, stride, 0, false, rng);
      proj_bn_ = BatchNorm2dLayer<T>(cout);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (conv1_.stride() == 2 && (x.dim(2) < 2 || x.dim(3) < 2))
      throw ConfigError("residual block: stride-2 block cannot halve input " +
                        shape_str(x.shape()));
    Tensor<T> h = relu(bn1_.forward(conv1_.forward(x), mode));
    h = bn2_.forward(conv2_.forward(h), mode);
    Tensor<T> sc = projected_ ? proj_bn_->forward(proj_conv_->forward(x), mode) : x;
    return relu(add(h, sc));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1_.collect(prefix + ".conv1", out);
    bn1_.collect(prefix + ".bn1", out);
    conv2_.collect(prefix + ".conv2", out);
    bn2_.collect(prefix + ".bn2", out);
    if (projected_) {
      proj_conv_->collect(prefix + ".proj.conv", out);
      proj_bn_->collect(prefix + ".proj.bn", out);
    }
  }

  bool projected() const { return projected_; }
  int64_t downsamples() const { return conv1_.stride() == 2 ? 1 : 0; }

 private:
  Conv2dLayer<T> conv1_;
  BatchNorm2dLayer<T> bn1_;
  Conv2dLayer<T> conv2_;
  BatchNorm2dLayer<T> bn2_;
  bool projected_ = false;
  std::optional<Conv2dLayer<T>> proj_conv_;
  std::optional<BatchNorm2dLayer<T>> proj_bn_;
};

/// A stack of residual blocks. Only the first block may change stride or
/// width; the rest keep the stage's channel count at stride 1.
template <typename T>
class Stage {
 public:
  Stage() = default;
  Stage(int64_t cin, int64_t cout, int64_t blocks, int64_t stride_first, std::mt19937_64& rng) {
    if (blocks < 1) throw ConfigError("stage: needs at least one block");
    if (stride_first != 1 && stride_first != 2)
      throw ConfigError("stage: first-block stride must be 1 or 2, got " +
                        std::to_string(stride_first));
    blocks_.reserve(blocks);
    blocks_.emplace_back(cin, cout, stride_first, rng);
    for (int64_t i = 1; i < blocks; ++i) blocks_.emplace_back(cout, cout, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = x;
    for (auto& b : blocks_) h = b.forward(h, mode);
    return h;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  }

  int64_t downsamples() const {
    int64_t d = 0;
    for (const auto& b : blocks_) d += b.downsamples();
    return d;
  }

  size_t num_blocks() const { return blocks_.size(); }
  BasicResidualBlock<T>& block(size_t i) { return blocks_[i]; }

 private:
  std::vector<BasicResidualBlock<T>> blocks_;
};

}  // namespace dks
