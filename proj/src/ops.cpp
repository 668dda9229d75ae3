#include "cordseg/ops.hpp"

#include <cmath>

#include "cordseg/rng.hpp"

namespace cordseg::nn {

namespace {

void require_activation(const Shape& s, const char* what) {
  if (s.size() < 3) throw ShapeError(std::string(what) + " expects [N, C, spatial...], got " + shape_str(s));
}

}  // namespace

template <class T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, const BatchNormState& cfg,
                     BatchNormCache<T>* cache) {
  require_activation(input.shape(), "batch_norm");
  const std::size_t N = input.dim(0), C = input.dim(1), S = spatial_size(input.shape());
  if (scale.size() != C || shift.size() != C || running_mean.size() != C || running_var.size() != C)
    throw ShapeError("batch_norm channel mismatch: input has " + std::to_string(C) + " channels");
  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<double> inv_std(C);
  const double m = static_cast<double>(N * S);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      mean = s / m;
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / m;
      const double unbiased = m > 1 ? ss / (m - 1) : var;
      running_mean[c] = static_cast<T>((1.0 - cfg.momentum) * running_mean[c] + cfg.momentum * mean);
      running_var[c] = static_cast<T>((1.0 - cfg.momentum) * running_var[c] + cfg.momentum * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(std::max(var, 0.0) + cfg.eps);
    inv_std[c] = is;
    const double g = scale[c], b = shift[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = input.data() + (n * C + c) * S;
      T* xh = xhat.data() + (n * C + c) * S;
      T* o = out.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double x = (p[i] - mean) * is;
        xh[i] = static_cast<T>(x);
        o[i] = static_cast<T>(g * x + b);
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <class T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& scale, const BatchNormCache<T>& cache,
                                      const Tensor<T>& grad_output) {
  const Tensor<T>& xhat = cache.normalized;
  if (xhat.shape() != grad_output.shape()) throw ShapeError("batch_norm_backward: stale cache");
  const std::size_t N = xhat.dim(0), C = xhat.dim(1), S = spatial_size(xhat.shape());
  BatchNormGrads<T> g{Tensor<T>(xhat.shape()), Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
  const double m = static_cast<double>(N * S);
  for (std::size_t c = 0; c < C; ++c) {
    double sdy = 0.0, sdyx = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* dy = grad_output.data() + (n * C + c) * S;
      const T* xh = xhat.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sdy += dy[i];
        sdyx += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.shift[c] = static_cast<T>(sdy);
    g.scale[c] = static_cast<T>(sdyx);
    const double k = scale[c] * cache.inv_std[c] / m;
    for (std::size_t n = 0; n < N; ++n) {
      const T* dy = grad_output.data() + (n * C + c) * S;
      const T* xh = xhat.data() + (n * C + c) * S;
      T* dx = g.input.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) dx[i] = static_cast<T>(k * (m * dy[i] - sdy - xh[i] * sdyx));
    }
  }
  return g;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_output) {
  Tensor<T> g(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) g[i] = output[i] > T{0} ? grad_output[i] : T{0};
  return g;
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed, std::vector<std::uint8_t>* keep) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (p == 0.0) {
    if (keep) keep->assign(x.size(), 1);
    return x;
  }
  Rng rng(seed);
  const T s = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(x.shape());
  if (keep) keep->resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool k = rng.uniform() >= p;
    out[i] = k ? x[i] * s : T{0};
    if (keep) (*keep)[i] = k;
  }
  return out;
}

template <class T>
Tensor<T> dropout_backward(const Tensor<T>& grad_output, double p, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != grad_output.size()) throw ShapeError("dropout_backward: stale mask");
  const T s = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = keep[i] ? grad_output[i] * s : T{0};
  return g;
}

namespace {

struct Spatial {
  std::size_t d, h, w;
};

Spatial spatial_of(const Shape& s) {
  if (s.size() == 4) return {1, s[2], s[3]};
  if (s.size() == 5) return {s[2], s[3], s[4]};
  throw ShapeError("expected a 2D or 3D activation, got " + shape_str(s));
}

}  // namespace

template <class T>
Tensor<T> maxpool(const Tensor<T>& x, int factor, std::vector<std::uint32_t>* argmax) {
  const Spatial in = spatial_of(x.shape());
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t fd = x.rank() == 5 ? f : 1;
  if (factor < 1 || in.h % f || in.w % f || in.d % fd)
    throw ShapeError("maxpool factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
  Shape os = x.shape();
  for (std::size_t i = 2; i < os.size(); ++i) os[i] /= f;
  const Spatial out = spatial_of(os);
  Tensor<T> y(os);
  if (argmax) argmax->resize(y.size());
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t in_s = in.d * in.h * in.w, out_s = out.d * out.h * out.w;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * in_s;
    for (std::size_t z = 0; z < out.d; ++z)
      for (std::size_t yy = 0; yy < out.h; ++yy)
        for (std::size_t xx = 0; xx < out.w; ++xx) {
          std::size_t best = ((z * fd) * in.h + yy * f) * in.w + xx * f;
          T bv = src[best];
          for (std::size_t a = 0; a < fd; ++a)
            for (std::size_t b = 0; b < f; ++b)
              for (std::size_t c = 0; c < f; ++c) {
                const std::size_t idx = ((z * fd + a) * in.h + yy * f + b) * in.w + xx * f + c;
                if (src[idx] > bv) {
                  bv = src[idx];
                  best = idx;
                }
              }
          const std::size_t o = p * out_s + (z * out.h + yy) * out.w + xx;
          y[o] = bv;
          if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
  }
  return y;
}

template <class T>
Tensor<T> maxpool_backward(const Shape& input_shape, const Tensor<T>& grad_output,
                           const std::vector<std::uint32_t>& argmax) {
  if (argmax.size() != grad_output.size()) throw ShapeError("maxpool_backward: stale cache");
  Tensor<T> g(input_shape);
  const std::size_t planes = input_shape[0] * input_shape[1];
  const std::size_t in_s = spatial_size(input_shape);
  const std::size_t out_s = spatial_size(grad_output.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t o = 0; o < out_s; ++o) g[p * in_s + argmax[p * out_s + o]] += grad_output[p * out_s + o];
  return g;
}

template <class T>
Tensor<T> upsample(const Tensor<T>& x, int factor) {
  const Spatial in = spatial_of(x.shape());
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t fd = x.rank() == 5 ? f : 1;
  Shape os = x.shape();
  for (std::size_t i = 2; i < os.size(); ++i) os[i] *= f;
  const Spatial out = spatial_of(os);
  Tensor<T> y(os);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t in_s = in.d * in.h * in.w, out_s = out.d * out.h * out.w;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t z = 0; z < out.d; ++z)
      for (std::size_t yy = 0; yy < out.h; ++yy) {
        const T* srow = x.data() + p * in_s + ((z / fd) * in.h + yy / f) * in.w;
        T* drow = y.data() + p * out_s + (z * out.h + yy) * out.w;
        for (std::size_t xx = 0; xx < out.w; ++xx) drow[xx] = srow[xx / f];
      }
  return y;
}

template <class T>
Tensor<T> upsample_backward(const Shape& input_shape, const Tensor<T>& grad_output, int factor) {
  const Spatial in = spatial_of(input_shape);
  const Spatial out = spatial_of(grad_output.shape());
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t fd = input_shape.size() == 5 ? f : 1;
  Tensor<T> g(input_shape);
  const std::size_t planes = input_shape[0] * input_shape[1];
  const std::size_t in_s = in.d * in.h * in.w, out_s = out.d * out.h * out.w;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t z = 0; z < out.d; ++z)
      for (std::size_t yy = 0; yy < out.h; ++yy) {
        T* drow = g.data() + p * in_s + ((z / fd) * in.h + yy / f) * in.w;
        const T* srow = grad_output.data() + p * out_s + (z * out.h + yy) * out.w;
        for (std::size_t xx = 0; xx < out.w; ++xx) drow[xx / f] += srow[xx];
      }
  return g;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.dim(0) != b.dim(0) || spatial_size(a.shape()) != spatial_size(b.shape()))
    throw ShapeError("skip connection shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 2; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("skip connection shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[1] = a.dim(1) + b.dim(1);
  Tensor<T> out(s);
  const std::size_t S = spatial_size(s), ca = a.dim(1) * S, cb = b.dim(1) * S;
  for (std::size_t n = 0; n < a.dim(0); ++n) {
    std::copy_n(a.data() + n * ca, ca, out.data() + n * (ca + cb));
    std::copy_n(b.data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
  }
  return out;
}

template <class T>
void split_channels(const Tensor<T>& grad, std::size_t channels_a, Tensor<T>& grad_a, Tensor<T>& grad_b) {
  Shape sa = grad.shape(), sb = grad.shape();
  sa[1] = channels_a;
  sb[1] = grad.dim(1) - channels_a;
  grad_a = Tensor<T>(sa);
  grad_b = Tensor<T>(sb);
  const std::size_t S = spatial_size(grad.shape()), ca = sa[1] * S, cb = sb[1] * S;
  for (std::size_t n = 0; n < grad.dim(0); ++n) {
    std::copy_n(grad.data() + n * (ca + cb), ca, grad_a.data() + n * ca);
    std::copy_n(grad.data() + n * (ca + cb) + ca, cb, grad_b.data() + n * cb);
  }
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    // Both branches keep exp() from overflowing.
    if (v >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T{1} + e);
    }
  }
  return out;
}

template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& grad_output) {
  Tensor<T> g(output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_output[i] * output[i] * (T{1} - output[i]);
  return g;
}

#define CORDSEG_INSTANTIATE(T)                                                                                  \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                Mode, const BatchNormState&, BatchNormCache<T>*);                              \
  template BatchNormGrads<T> batch_norm_backward(const Tensor<T>&, const BatchNormCache<T>&, const Tensor<T>&); \
  template Tensor<T> relu(const Tensor<T>&);                                                                    \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t, std::vector<std::uint8_t>*);              \
  template Tensor<T> dropout_backward(const Tensor<T>&, double, const std::vector<std::uint8_t>&);              \
  template Tensor<T> maxpool(const Tensor<T>&, int, std::vector<std::uint32_t>*);                               \
  template Tensor<T> maxpool_backward(const Shape&, const Tensor<T>&, const std::vector<std::uint32_t>&);       \
  template Tensor<T> upsample(const Tensor<T>&, int);                                                           \
  template Tensor<T> upsample_backward(const Shape&, const Tensor<T>&, int);                                    \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                       \
  template void split_channels(const Tensor<T>&, std::size_t, Tensor<T>&, Tensor<T>&);                          \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                 \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);

CORDSEG_INSTANTIATE(float)
CORDSEG_INSTANTIATE(double)

}  // namespace cordseg::nn
