#include <algorithm>
#include <cstring>

#include "cordseg/ops.hpp"

namespace cordseg::nn {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int receptive_field(int kernel, int dilation) { return kernel + (kernel - 1) * (dilation - 1); }

namespace {

template <class T>
struct Simd;
template <>
struct Simd<float> {
  typedef float V __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 16;
};
template <>
struct Simd<double> {
  typedef double V __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 8;
};

template <class T>
using Vec = typename Simd<T>::V;

template <class T>
inline Vec<T> loadu(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void storeu(T* p, const Vec<T>& v) {
  std::memcpy(p, &v, sizeof(v));
}

template <class T>
inline T hsum(const Vec<T>& v) {
  T s = 0;
  for (std::size_t i = 0; i < Simd<T>::lanes; ++i) s += v[i];
  return s;
}

struct ConvDims {
  std::size_t n, c, f, d, h, w, kd, kh, kw;
  int dil;
  std::size_t spatial() const { return d * h * w; }
  std::size_t taps() const { return kd * kh * kw; }
  std::size_t depth() const { return c * taps(); }
};

ConvDims conv_dims(const Shape& in, const Shape& wt, std::size_t bias_size, int rank, int dilation) {
  const auto r = static_cast<std::size_t>(rank);
  if (in.size() != r + 2) throw ShapeError("conv" + std::to_string(rank) + "d expects input rank " + std::to_string(r + 2) + ", got " + shape_str(in));
  if (wt.size() != r + 2) throw ShapeError("conv" + std::to_string(rank) + "d expects weight rank " + std::to_string(r + 2) + ", got " + shape_str(wt));
  if (wt[1] != in[1])
    throw ShapeError("channel mismatch: input has " + std::to_string(in[1]) + " channels, weights expect " + std::to_string(wt[1]));
  for (std::size_t i = 2; i < wt.size(); ++i) {
    if (wt[i] % 2 == 0) throw ShapeError("convolution kernel extent must be odd, got " + shape_str(wt));
    if (wt[i] != wt[2]) throw ShapeError("convolution kernel must be cubic, got " + shape_str(wt));
  }
  if (dilation < 1) throw ShapeError("dilation must be >= 1");
  if (bias_size != wt[0]) throw ShapeError("bias length must equal the number of filters");
  ConvDims g{};
  g.n = in[0];
  g.c = in[1];
  g.f = wt[0];
  g.d = rank == 3 ? in[2] : 1;
  g.h = in[r];
  g.w = in[r + 1];
  g.kd = rank == 3 ? wt[2] : 1;
  g.kh = wt[r];
  g.kw = wt[r + 1];
  g.dil = dilation;
  return g;
}

// Rows are (z, y) pairs; a chunk is a contiguous range of rows.
std::size_t rows_per_chunk(const ConvDims& g, std::size_t elem) {
  const std::size_t budget = (std::size_t{1} << 20) / std::max<std::size_t>(1, g.depth() * elem);
  const std::size_t cols = std::clamp<std::size_t>(budget, 64, 4096);
  return std::max<std::size_t>(1, cols / g.w);
}

std::size_t round_up(std::size_t x, std::size_t m) { return (x + m - 1) / m * m; }

// col[k][j] for k = (c, kz, ky, kx), j over the chunk's output positions.
template <class T>
void im2col(const T* in, const ConvDims& g, std::size_t r0, std::size_t r1, T* col, std::size_t ld) {
  const std::size_t cols = (r1 - r0) * g.w;
  const auto W = static_cast<std::ptrdiff_t>(g.w);
  const auto H = static_cast<std::ptrdiff_t>(g.h);
  const auto D = static_cast<std::ptrdiff_t>(g.d);
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++k) {
          const std::ptrdiff_t oz = (static_cast<std::ptrdiff_t>(kz) - static_cast<std::ptrdiff_t>(g.kd / 2)) * g.dil;
          const std::ptrdiff_t oy = (static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.kh / 2)) * g.dil;
          const std::ptrdiff_t ox = (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.kw / 2)) * g.dil;
          const std::ptrdiff_t xlo = std::clamp<std::ptrdiff_t>(-ox, 0, W);
          const std::ptrdiff_t xhi = std::clamp<std::ptrdiff_t>(W - ox, 0, W);
          T* dst = col + k * ld;
          for (std::size_t r = r0; r < r1; ++r) {
            const auto z = static_cast<std::ptrdiff_t>(r / g.h);
            const auto y = static_cast<std::ptrdiff_t>(r % g.h);
            const std::ptrdiff_t sz = z + oz, sy = y + oy;
            T* drow = dst + (r - r0) * g.w;
            if (sz < 0 || sz >= D || sy < 0 || sy >= H || xlo >= xhi) {
              std::fill(drow, drow + W, T{0});
              continue;
            }
            const T* srow = in + ((static_cast<std::ptrdiff_t>(c) * D + sz) * H + sy) * W;
            std::fill(drow, drow + xlo, T{0});
            for (std::ptrdiff_t x = xlo; x < xhi; ++x) drow[x] = srow[x + ox];
            std::fill(drow + xhi, drow + W, T{0});
          }
          std::fill(dst + cols, dst + ld, T{0});
        }
}

// Scatter-add of col2im: the adjoint of im2col.
template <class T>
void col2im(const T* col, std::size_t ld, const ConvDims& g, std::size_t r0, std::size_t r1, T* out) {
  const auto W = static_cast<std::ptrdiff_t>(g.w);
  const auto H = static_cast<std::ptrdiff_t>(g.h);
  const auto D = static_cast<std::ptrdiff_t>(g.d);
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++k) {
          const std::ptrdiff_t oz = (static_cast<std::ptrdiff_t>(kz) - static_cast<std::ptrdiff_t>(g.kd / 2)) * g.dil;
          const std::ptrdiff_t oy = (static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.kh / 2)) * g.dil;
          const std::ptrdiff_t ox = (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.kw / 2)) * g.dil;
          const std::ptrdiff_t xlo = std::clamp<std::ptrdiff_t>(-ox, 0, W);
          const std::ptrdiff_t xhi = std::clamp<std::ptrdiff_t>(W - ox, 0, W);
          const T* src = col + k * ld;
          for (std::size_t r = r0; r < r1; ++r) {
            const auto z = static_cast<std::ptrdiff_t>(r / g.h);
            const auto y = static_cast<std::ptrdiff_t>(r % g.h);
            const std::ptrdiff_t sz = z + oz, sy = y + oy;
            if (sz < 0 || sz >= D || sy < 0 || sy >= H) continue;
            const T* srow = src + (r - r0) * g.w;
            T* orow = out + ((static_cast<std::ptrdiff_t>(c) * D + sz) * H + sy) * W;
            for (std::ptrdiff_t x = xlo; x < xhi; ++x) orow[x + ox] += srow[x];
          }
        }
}

// One column panel of C = init + A * B: rows [0, MR), columns [j, j + 2 * lanes).
// Every element accumulates over k in increasing order.
template <class T, int MR>
inline void gemm_panel(const T* A, std::size_t lda, std::size_t K, const T* B, std::size_t ldb, T* C,
                       std::size_t ldc, const T* init) {
  constexpr std::size_t L = Simd<T>::lanes;
  Vec<T> acc0[MR], acc1[MR];
  for (int r = 0; r < MR; ++r) {
    const T v = init ? init[r] : T{0};
    acc0[r] = Vec<T>{} + v;
    acc1[r] = acc0[r];
  }
  for (std::size_t k = 0; k < K; ++k) {
    const Vec<T> b0 = loadu(B + k * ldb);
    const Vec<T> b1 = loadu(B + k * ldb + L);
    for (int r = 0; r < MR; ++r) {
      const T a = A[r * lda + k];
      acc0[r] = acc0[r] + b0 * a;
      acc1[r] = acc1[r] + b1 * a;
    }
  }
  for (int r = 0; r < MR; ++r) {
    storeu(C + r * ldc, acc0[r]);
    storeu(C + r * ldc + L, acc1[r]);
  }
}

// C[M][ncols] = init + A[M][K] * B[K][ncols]; ncols is a multiple of 2 * lanes.
template <class T>
void gemm(const T* A, std::size_t M, std::size_t K, const T* B, std::size_t ldb, T* C, std::size_t ldc,
          std::size_t ncols, const T* init) {
  constexpr std::size_t NR = 2 * Simd<T>::lanes;
  for (std::size_t j = 0; j < ncols; j += NR) {
    std::size_t i = 0;
    for (; i + 8 <= M; i += 8)
      gemm_panel<T, 8>(A + i * K, K, K, B + j, ldb, C + i * ldc + j, ldc, init ? init + i : nullptr);
    for (; i + 4 <= M; i += 4)
      gemm_panel<T, 4>(A + i * K, K, K, B + j, ldb, C + i * ldc + j, ldc, init ? init + i : nullptr);
    for (; i < M; ++i)
      gemm_panel<T, 1>(A + i * K, K, K, B + j, ldb, C + i * ldc + j, ldc, init ? init + i : nullptr);
  }
}

// G[f][k] += sum_j Y[f][j] * B[k][j] for FB x KB tiles.
template <class T, int FB, int KB>
inline void dot_tile(const T* Y, std::size_t ldy, const T* B, std::size_t ldb, std::size_t ncols, T* G,
                     std::size_t ldg) {
  constexpr std::size_t L = Simd<T>::lanes;
  Vec<T> acc[FB][KB];
  for (int f = 0; f < FB; ++f)
    for (int k = 0; k < KB; ++k) acc[f][k] = Vec<T>{};
  for (std::size_t j = 0; j < ncols; j += L) {
    Vec<T> y[FB], b[KB];
    for (int f = 0; f < FB; ++f) y[f] = loadu(Y + f * ldy + j);
    for (int k = 0; k < KB; ++k) b[k] = loadu(B + k * ldb + j);
    for (int f = 0; f < FB; ++f)
      for (int k = 0; k < KB; ++k) acc[f][k] = acc[f][k] + y[f] * b[k];
  }
  for (int f = 0; f < FB; ++f)
    for (int k = 0; k < KB; ++k) G[f * ldg + k] += hsum<T>(acc[f][k]);
}

template <class T>
void dot_all(const T* Y, std::size_t F, std::size_t ldy, const T* B, std::size_t K, std::size_t ldb,
             std::size_t ncols, T* G) {
  std::size_t k = 0;
  for (; k + 4 <= K; k += 4) {
    std::size_t f = 0;
    for (; f + 4 <= F; f += 4) dot_tile<T, 4, 4>(Y + f * ldy, ldy, B + k * ldb, ldb, ncols, G + f * K + k, K);
    for (; f < F; ++f) dot_tile<T, 1, 4>(Y + f * ldy, ldy, B + k * ldb, ldb, ncols, G + f * K + k, K);
  }
  for (; k < K; ++k) {
    std::size_t f = 0;
    for (; f + 4 <= F; f += 4) dot_tile<T, 4, 1>(Y + f * ldy, ldy, B + k * ldb, ldb, ncols, G + f * K + k, K);
    for (; f < F; ++f) dot_tile<T, 1, 1>(Y + f * ldy, ldy, B + k * ldb, ldb, ncols, G + f * K + k, K);
  }
}

template <class T>
Tensor<T> conv_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int dilation,
                       int rank) {
  const ConvDims g = conv_dims(input.shape(), weights.shape(), bias.size(), rank, dilation);
  Shape out_shape = input.shape();
  out_shape[1] = g.f;
  Tensor<T> out(out_shape);
  const std::size_t S = g.spatial(), K = g.depth(), rows = g.d * g.h;
  const std::size_t chunk_rows = rows_per_chunk(g, sizeof(T));
  constexpr std::size_t NR = 2 * Simd<T>::lanes;
  const std::size_t ld = round_up(chunk_rows * g.w, NR);
  std::vector<T> col(K * ld), buf(g.f * ld);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* in = input.data() + n * g.c * S;
    T* o = out.data() + n * g.f * S;
    for (std::size_t r0 = 0; r0 < rows; r0 += chunk_rows) {
      const std::size_t r1 = std::min(rows, r0 + chunk_rows);
      const std::size_t cols = (r1 - r0) * g.w;
      const std::size_t ncols = round_up(cols, NR);
      im2col(in, g, r0, r1, col.data(), ld);
      gemm(weights.data(), g.f, K, col.data(), ld, buf.data(), ld, ncols, bias.data());
      for (std::size_t f = 0; f < g.f; ++f) std::copy_n(buf.data() + f * ld, cols, o + f * S + r0 * g.w);
    }
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int dilation) {
  return conv_forward(input, weights, bias, dilation, 2);
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int dilation) {
  return conv_forward(input, weights, bias, dilation, 3);
}

template <class T>
ConvGrads<T> conv_backward(const Tensor<T>& input, const Tensor<T>& weights, int dilation,
                           const Tensor<T>& grad_output, bool need_input_grad) {
  const int rank = static_cast<int>(weights.rank()) - 2;
  if (rank != 2 && rank != 3) throw ShapeError("conv_backward expects 2D or 3D weights");
  const ConvDims g = conv_dims(input.shape(), weights.shape(), weights.dim(0), rank, dilation);
  Shape expect = input.shape();
  expect[1] = g.f;
  if (grad_output.shape() != expect)
    throw ShapeError("conv gradient shape " + shape_str(grad_output.shape()) + " does not match " + shape_str(expect));

  ConvGrads<T> grads;
  grads.weights = Tensor<T>(weights.shape());
  grads.bias = Tensor<T>(Shape{g.f});
  if (need_input_grad) grads.input = Tensor<T>(input.shape());

  const std::size_t S = g.spatial(), K = g.depth(), rows = g.d * g.h;
  const std::size_t chunk_rows = rows_per_chunk(g, sizeof(T));
  constexpr std::size_t NR = 2 * Simd<T>::lanes;
  const std::size_t ld = round_up(chunk_rows * g.w, NR);
  std::vector<T> col(K * ld), ybuf(g.f * ld, T{0}), dcol;
  std::vector<T> wt;
  if (need_input_grad) {
    dcol.resize(K * ld);
    wt.resize(K * g.f);
    for (std::size_t f = 0; f < g.f; ++f)
      for (std::size_t k = 0; k < K; ++k) wt[k * g.f + f] = weights[f * K + k];
  }
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* in = input.data() + n * g.c * S;
    const T* dy = grad_output.data() + n * g.f * S;
    for (std::size_t r0 = 0; r0 < rows; r0 += chunk_rows) {
      const std::size_t r1 = std::min(rows, r0 + chunk_rows);
      const std::size_t cols = (r1 - r0) * g.w;
      const std::size_t ncols = round_up(cols, NR);
      im2col(in, g, r0, r1, col.data(), ld);
      for (std::size_t f = 0; f < g.f; ++f) {
        T* yrow = ybuf.data() + f * ld;
        std::copy_n(dy + f * S + r0 * g.w, cols, yrow);
        std::fill(yrow + cols, yrow + ld, T{0});
        T s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += yrow[j];
        grads.bias[f] += s;
      }
      dot_all(ybuf.data(), g.f, ld, col.data(), K, ld, ncols, grads.weights.data());
      if (need_input_grad) {
        gemm(wt.data(), K, g.f, ybuf.data(), ld, dcol.data(), ld, ncols, static_cast<const T*>(nullptr));
        col2im(dcol.data(), ld, g, r0, r1, grads.input.data() + n * g.c * S);
      }
    }
  }
  return grads;
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int);
template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int);
template ConvGrads<float> conv_backward(const Tensor<float>&, const Tensor<float>&, int, const Tensor<float>&, bool);
template ConvGrads<double> conv_backward(const Tensor<double>&, const Tensor<double>&, int, const Tensor<double>&,
                                         bool);

}  // namespace cordseg::nn
