#include "s2c/layers.hpp"

#include <algorithm>
#include <cmath>

namespace s2c {

namespace {

template <RealScalar Scalar>
using RowMatrix = typename Tensor<Scalar>::Matrix;

struct ConvGeometry {
  Index batch, in_c, in_h, in_w, out_c, kh, kw, out_h, out_w, stride, pad;
  Index col_rows() const { return in_c * kh * kw; }
  Index col_cols() const { return out_h * out_w; }
};

template <RealScalar Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& input, const ConvParams<Scalar>& p) {
  check_image_layout(input.shape(), "conv");
  if (p.weights.rank() != 4) throw ShapeError("conv weights must be out x in x kh x kw");
  if (input.dim(1) != p.in_channels()) {
    throw ShapeError("conv input has " + std::to_string(input.dim(1)) + " channels, weights expect " +
                     std::to_string(p.in_channels()));
  }
  if (p.stride < 1 || p.padding < 0) throw ShapeError("conv stride must be >= 1 and padding >= 0");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), p.out_channels(),
                 p.kernel_h(), p.kernel_w(), 0, 0, p.stride, p.padding};
  if (g.in_h + 2 * g.pad < g.kh || g.in_w + 2 * g.pad < g.kw) {
    throw ShapeError("conv kernel larger than padded input " + shape_string(input.shape()));
  }
  g.out_h = p.output_extent(g.in_h, g.kh);
  g.out_w = p.output_extent(g.in_w, g.kw);
  return g;
}

// Unfolds one image (in_c x in_h x in_w) into a (in_c*kh*kw) x (out_h*out_w) matrix.
template <RealScalar Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  cols.resize(g.col_rows(), g.col_cols());
  for (Index c = 0; c < g.in_c; ++c) {
    const Scalar* plane = image + c * g.in_h * g.in_w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols.data() + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          Scalar* out = row + oh * g.out_w;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(out, out + g.out_w, Scalar(0));
            continue;
          }
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            out[ow] = (iw >= 0 && iw < g.in_w) ? plane[ih * g.in_w + iw] : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image grid.
template <RealScalar Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.in_c; ++c) {
    Scalar* plane = image + c * g.in_h * g.in_w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols.data() + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.in_h) continue;
          const Scalar* in = row + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.in_w) plane[ih * g.in_w + iw] += in[ow];
          }
        }
      }
    }
  }
}

template <RealScalar Scalar>
void check_bn_input(const Tensor<Scalar>& input, const BatchNormParams<Scalar>& p) {
  check_image_layout(input.shape(), "batch_norm");
  if (input.dim(1) != p.channels()) {
    throw ShapeError("batch_norm input has " + std::to_string(input.dim(1)) + " channels, parameters have " +
                     std::to_string(p.channels()));
  }
}

}  // namespace

template <RealScalar Scalar>
ConvParams<Scalar> ConvParams<Scalar>::he_normal(Index out_channels, Index in_channels, Index kernel,
                                                 Index stride, Index padding, SeededRng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel));
  return ConvParams{Tensor<Scalar>::normal({out_channels, in_channels, kernel, kernel}, Scalar(0),
                                           static_cast<Scalar>(stddev), rng),
                    stride, padding};
}

template <RealScalar Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p) {
  const ConvGeometry g = conv_geometry(input, p);
  Tensor<Scalar> out({g.batch, g.out_c, g.out_h, g.out_w});
  const auto w = p.weights.matrix(g.out_c, g.col_rows());
  RowMatrix<Scalar> cols;
  const Index in_stride = g.in_c * g.in_h * g.in_w;
  const Index out_stride = g.out_c * g.col_cols();
  for (Index n = 0; n < g.batch; ++n) {
    im2col(input.data() + n * in_stride, g, cols);
    typename Tensor<Scalar>::MatrixMap(out.data() + n * out_stride, g.out_c, g.col_cols()).noalias() = w * cols;
  }
  return out;
}

template <RealScalar Scalar>
ConvGrads<Scalar> conv_backward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p,
                                const Tensor<Scalar>& upstream, bool want_input_grad) {
  const ConvGeometry g = conv_geometry(input, p);
  if (upstream.shape() != Shape{g.batch, g.out_c, g.out_h, g.out_w}) {
    throw ShapeError("conv upstream gradient shape " + shape_string(upstream.shape()) + " does not match output");
  }
  ConvGrads<Scalar> grads;
  grads.weights = p.weights.zeros_like();
  if (want_input_grad) grads.input = input.zeros_like();
  auto dw = grads.weights.matrix(g.out_c, g.col_rows());
  const auto w = p.weights.matrix(g.out_c, g.col_rows());
  RowMatrix<Scalar> cols, dcols;
  const Index in_stride = g.in_c * g.in_h * g.in_w;
  const Index out_stride = g.out_c * g.col_cols();
  for (Index n = 0; n < g.batch; ++n) {
    const typename Tensor<Scalar>::ConstMatrixMap dout(upstream.data() + n * out_stride, g.out_c, g.col_cols());
    im2col(input.data() + n * in_stride, g, cols);
    dw.noalias() += dout * cols.transpose();
    if (want_input_grad) {
      dcols.noalias() = w.transpose() * dout;
      col2im(dcols, g, grads.input.data() + n * in_stride);
    }
  }
  return grads;
}

template <RealScalar Scalar>
BatchNormParams<Scalar> BatchNormParams<Scalar>::standard(Index channels, Scalar ema_decay) {
  BatchNormParams p;
  p.gamma = Tensor<Scalar>::constant({channels}, Scalar(1));
  p.beta = Tensor<Scalar>::zeros({channels});
  p.running_mean = Tensor<Scalar>::zeros({channels});
  p.running_var = Tensor<Scalar>::constant({channels}, Scalar(1));
  p.ema_decay = ema_decay;
  return p;
}

template <RealScalar Scalar>
void BatchNormParams<Scalar>::check() const {
  const Index c = channels();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch_norm parameter vectors differ in length");
  }
  if (!(epsilon > 0)) throw ConfigError("batch_norm epsilon must be positive");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("batch_norm ema_decay must lie in (0, 1)");
  if ((running_var.values().array() < 0).any()) throw NumericError("batch_norm running variance is negative");
}

namespace {

template <RealScalar Scalar>
Tensor<Scalar> normalize(const Tensor<Scalar>& input, const BatchNormParams<Scalar>& p,
                         const typename Tensor<Scalar>::Vector& mean, const typename Tensor<Scalar>::Vector& var,
                         Mode mode, BatchNormCache<Scalar>* cache) {
  const Index batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  const typename Tensor<Scalar>::Vector inv_std = (var.array() + p.epsilon).rsqrt().matrix();
  Tensor<Scalar> out(input.shape());
  Tensor<Scalar> xhat;
  if (cache) xhat = Tensor<Scalar>(input.shape());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * plane;
      const Scalar mu = mean[c], is = inv_std[c], gm = p.gamma[c], bt = p.beta[c];
      for (Index i = 0; i < plane; ++i) {
        const Scalar xh = (input[off + i] - mu) * is;
        if (cache) xhat[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return out;
}

}  // namespace

template <RealScalar Scalar>
Tensor<Scalar> batch_norm_forward(const Tensor<Scalar>& input, BatchNormParams<Scalar>& p, Mode mode,
                                  BatchNormCache<Scalar>* cache) {
  if (mode == Mode::eval) return batch_norm_eval(input, p, cache);
  check_bn_input(input, p);
  auto m = channel_moments(input);
  auto out = normalize(input, p, m.mean, m.variance, Mode::train, cache);
  const Scalar d = p.ema_decay;
  p.running_mean.values() = d * p.running_mean.values() + (Scalar(1) - d) * m.mean;
  p.running_var.values() = d * p.running_var.values() + (Scalar(1) - d) * m.variance;
  return out;
}

template <RealScalar Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& input, const BatchNormParams<Scalar>& p,
                               BatchNormCache<Scalar>* cache) {
  check_bn_input(input, p);
  return normalize(input, p, p.running_mean.values(), p.running_var.values(), Mode::eval, cache);
}

template <RealScalar Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormCache<Scalar>& cache, const BatchNormParams<Scalar>& p,
                                           const Tensor<Scalar>& upstream) {
  if (upstream.shape() != cache.xhat.shape()) throw ShapeError("batch_norm upstream shape mismatch");
  const Index batch = upstream.dim(0), channels = upstream.dim(1), plane = upstream.dim(2) * upstream.dim(3);
  const double count = static_cast<double>(batch * plane);
  BatchNormGrads<Scalar> g{upstream.zeros_like(), p.gamma.zeros_like(), p.beta.zeros_like()};
  for (Index c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        sum_dy += upstream[off + i];
        sum_dy_xhat += static_cast<double>(upstream[off + i]) * cache.xhat[off + i];
      }
    }
    g.gamma[c] = static_cast<Scalar>(sum_dy_xhat);
    g.beta[c] = static_cast<Scalar>(sum_dy);
    const Scalar scale = p.gamma[c] * cache.inv_std[c];
    if (cache.mode == Mode::eval) {
      for (Index n = 0; n < batch; ++n) {
        const Index off = (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) g.input[off + i] = scale * upstream[off + i];
      }
      continue;
    }
    // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
    const Scalar mean_dy = static_cast<Scalar>(sum_dy / count);
    const Scalar mean_dy_xhat = static_cast<Scalar>(sum_dy_xhat / count);
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        g.input[off + i] = scale * (upstream[off + i] - mean_dy - cache.xhat[off + i] * mean_dy_xhat);
      }
    }
  }
  return g;
}

template <RealScalar Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& input) {
  return Tensor<Scalar>(input.shape(), input.values().cwiseMax(Scalar(0)));
}

template <RealScalar Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& upstream) {
  if (input.shape() != upstream.shape()) throw ShapeError("relu upstream shape mismatch");
  typename Tensor<Scalar>::Vector g =
      (input.values().array() > Scalar(0)).select(upstream.values().array(), Scalar(0)).matrix();
  return Tensor<Scalar>(input.shape(), std::move(g));
}

template <RealScalar Scalar>
Tensor<Scalar> add_junction_forward(std::span<const Tensor<Scalar>* const> inputs) {
  if (inputs.empty()) throw ShapeError("add junction needs at least one input");
  Tensor<Scalar> sum = *inputs[0];
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i]->shape() != sum.shape()) {
      throw ShapeError("add junction input " + std::to_string(i) + " has shape " +
                       shape_string(inputs[i]->shape()) + ", expected " + shape_string(sum.shape()));
    }
    sum.values() += inputs[i]->values();
  }
  return sum;
}

template <RealScalar Scalar>
std::vector<Tensor<Scalar>> add_junction_backward(std::size_t input_count, const Tensor<Scalar>& upstream) {
  return std::vector<Tensor<Scalar>>(input_count, upstream);
}

template <RealScalar Scalar>
HeadParams<Scalar> HeadParams<Scalar>::he_normal(Index classes, Index features, SeededRng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(features));
  return HeadParams{Tensor<Scalar>::normal({classes, features}, Scalar(0), static_cast<Scalar>(stddev), rng),
                    Tensor<Scalar>::zeros({classes})};
}

template <RealScalar Scalar>
HeadOutput<Scalar> head_forward(const Tensor<Scalar>& features, std::span<const int> labels,
                                const HeadParams<Scalar>& p) {
  check_image_layout(features.shape(), "classifier head");
  const Index batch = features.dim(0), feat = features.dim(1), plane = features.dim(2) * features.dim(3);
  if (feat != p.features()) {
    throw ShapeError("classifier head expects " + std::to_string(p.features()) + " features, got " +
                     std::to_string(feat));
  }
  if (!labels.empty() && static_cast<Index>(labels.size()) != batch) {
    throw DataError("label count does not match batch size");
  }
  const Index classes = p.classes();
  HeadOutput<Scalar> out;
  out.feature_shape = features.shape();
  out.pooled = Tensor<Scalar>({batch, feat});
  out.pooled.matrix(batch, feat) = features.matrix(batch * feat, plane).rowwise().mean().reshaped(feat, batch).transpose();
  out.logits = Tensor<Scalar>({batch, classes});
  auto logits = out.logits.matrix(batch, classes);
  logits.noalias() = out.pooled.matrix(batch, feat) * p.weights.matrix(classes, feat).transpose();
  logits.rowwise() += p.bias.values().transpose();

  out.probs = Tensor<Scalar>({batch, classes});
  auto probs = out.probs.matrix(batch, classes);
  double loss = 0.0;
  for (Index n = 0; n < batch; ++n) {
    const Scalar top = logits.row(n).maxCoeff();
    probs.row(n) = (logits.row(n).array() - top).exp().matrix();
    const Scalar z = probs.row(n).sum();
    probs.row(n) /= z;
    if (labels.empty()) continue;
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= classes) throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    loss += std::log(static_cast<double>(z)) - static_cast<double>(logits(n, y) - top);
    Index arg = 0;
    logits.row(n).maxCoeff(&arg);
    if (arg == y) ++out.correct;
  }
  if (!labels.empty()) {
    out.loss = loss / static_cast<double>(batch);
    out.accuracy = static_cast<double>(out.correct) / static_cast<double>(batch);
  }
  return out;
}

template <RealScalar Scalar>
HeadGrads<Scalar> head_backward(const HeadOutput<Scalar>& out, std::span<const int> labels,
                                const HeadParams<Scalar>& p) {
  const Index batch = out.probs.dim(0), classes = p.classes(), feat = p.features();
  if (static_cast<Index>(labels.size()) != batch) throw DataError("label count does not match batch size");
  Tensor<Scalar> dlogits = out.probs;
  auto dl = dlogits.matrix(batch, classes);
  for (Index n = 0; n < batch; ++n) dl(n, labels[static_cast<std::size_t>(n)]) -= Scalar(1);
  dl /= static_cast<Scalar>(batch);

  HeadGrads<Scalar> g;
  g.weights = Tensor<Scalar>({classes, feat});
  g.weights.matrix(classes, feat).noalias() = dl.transpose() * out.pooled.matrix(batch, feat);
  g.bias = Tensor<Scalar>({classes}, dl.colwise().sum().transpose());
  typename Tensor<Scalar>::Matrix dpooled = dl * p.weights.matrix(classes, feat);

  g.features = Tensor<Scalar>(out.feature_shape);
  const Index plane = out.feature_shape[2] * out.feature_shape[3];
  const Scalar share = Scalar(1) / static_cast<Scalar>(plane);
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < feat; ++c) {
      Scalar* dst = g.features.data() + (n * feat + c) * plane;
      std::fill(dst, dst + plane, dpooled(n, c) * share);
    }
  }
  return g;
}

#define S2C_INSTANTIATE_LAYERS(S)                                                                          \
  template struct ConvParams<S>;                                                                           \
  template struct BatchNormParams<S>;                                                                      \
  template struct HeadParams<S>;                                                                           \
  template Tensor<S> conv_forward(const Tensor<S>&, const ConvParams<S>&);                                 \
  template ConvGrads<S> conv_backward(const Tensor<S>&, const ConvParams<S>&, const Tensor<S>&, bool);     \
  template Tensor<S> batch_norm_forward(const Tensor<S>&, BatchNormParams<S>&, Mode, BatchNormCache<S>*);  \
  template Tensor<S> batch_norm_eval(const Tensor<S>&, const BatchNormParams<S>&, BatchNormCache<S>*);                         \
  template BatchNormGrads<S> batch_norm_backward(const BatchNormCache<S>&, const BatchNormParams<S>&,      \
                                                 const Tensor<S>&);                                        \
  template Tensor<S> relu_forward(const Tensor<S>&);                                                       \
  template Tensor<S> relu_backward(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> add_junction_forward(std::span<const Tensor<S>* const>);                              \
  template std::vector<Tensor<S>> add_junction_backward(std::size_t, const Tensor<S>&);                    \
  template HeadOutput<S> head_forward(const Tensor<S>&, std::span<const int>, const HeadParams<S>&);       \
  template HeadGrads<S> head_backward(const HeadOutput<S>&, std::span<const int>, const HeadParams<S>&);

S2C_INSTANTIATE_LAYERS(float)
S2C_INSTANTIATE_LAYERS(double)

#undef S2C_INSTANTIATE_LAYERS

}  // namespace s2c
