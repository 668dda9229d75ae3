#include "cordseg/network.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cordseg/rng.hpp"

namespace cordseg::nn {

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string fmt_rate(double r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", r);
  return buf;
}

}  // namespace

std::string NetworkSpec::canonical() const {
  std::ostringstream os;
  os << "net:" << name << ";rank=" << spatial_rank << ";in=" << in_channels << ";shape=" << shape_str(input_shape);
  for (const auto& layer : layers) {
    os << ";";
    std::visit(overloaded{
                   [&](const Conv& c) {
                     os << "conv(" << c.in_channels << "," << c.out_channels << "," << c.kernel << "," << c.dilation
                        << ")";
                   },
                   [&](const BatchNorm& b) { os << "bn(" << b.channels << ")"; },
                   [&](const Relu&) { os << "relu"; },
                   [&](const Dropout& d) { os << "dropout(" << fmt_rate(d.rate) << ")"; },
                   [&](const MaxPool& m) { os << "maxpool(" << m.factor << ")"; },
                   [&](const Upsample& u) { os << "upsample(" << u.factor << ")"; },
                   [&](const ConcatSkip& c) { os << "concat(" << c.source << ")"; },
                   [&](const Sigmoid&) { os << "sigmoid"; },
               },
               layer);
  }
  return os.str();
}

std::uint64_t NetworkSpec::fingerprint() const { return fnv1a64(canonical()); }

void NetworkSpec::validate() const {
  if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("network spatial rank must be 2 or 3");
  if (!input_shape.empty() && input_shape.size() != static_cast<std::size_t>(spatial_rank))
    throw ConfigError("network input shape rank does not match its spatial rank");
  std::vector<int> channels(layers.size()), scale(layers.size());
  int ch = in_channels, sc = 1, sigmoids = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    std::visit(overloaded{
                   [&](const Conv& c) {
                     if (c.in_channels != ch) throw ConfigError(where + "conv input channels do not match");
                     if (c.kernel < 1 || c.kernel % 2 == 0) throw ConfigError(where + "conv kernel must be odd");
                     if (c.dilation < 1) throw ConfigError(where + "dilation must be >= 1");
                     ch = c.out_channels;
                   },
                   [&](const BatchNorm& b) {
                     if (b.channels != ch) throw ConfigError(where + "batch-norm channels do not match");
                   },
                   [&](const Relu&) {},
                   [&](const Dropout& d) {
                     if (!(d.rate >= 0.0 && d.rate < 1.0)) throw ConfigError(where + "dropout rate outside [0, 1)");
                   },
                   [&](const MaxPool& m) { sc *= m.factor; },
                   [&](const Upsample& u) {
                     if (sc % u.factor) throw ConfigError(where + "upsampling past the input resolution");
                     sc /= u.factor;
                   },
                   [&](const ConcatSkip& c) {
                     if (c.source < 0 || static_cast<std::size_t>(c.source) >= i)
                       throw ConfigError(where + "skip connection must reference an earlier layer");
                     if (scale[c.source] != sc) throw ConfigError(where + "skip connection spatial extent mismatch");
                     ch += channels[c.source];
                   },
                   [&](const Sigmoid&) {
                     ++sigmoids;
                     if (i + 1 != layers.size()) throw ConfigError(where + "sigmoid must be the terminal layer");
                     if (ch != 1) throw ConfigError(where + "terminal sigmoid must produce a single channel");
                   },
               },
               layers[i]);
    channels[i] = ch;
    scale[i] = sc;
  }
  if (sigmoids != 1) throw ConfigError("network must end in exactly one sigmoid");
}

std::size_t NetworkSpec::downsampling_factor() const {
  std::size_t sc = 1, best = 1;
  for (const auto& l : layers) {
    if (const auto* m = std::get_if<MaxPool>(&l)) sc *= static_cast<std::size_t>(m->factor);
    if (const auto* u = std::get_if<Upsample>(&l)) sc /= static_cast<std::size_t>(u->factor);
    best = std::max(best, sc);
  }
  return best;
}

NetworkSpec build_unet(const UNetConfig& cfg, const std::string& name) {
  NetworkSpec spec;
  spec.name = name;
  spec.spatial_rank = cfg.spatial_rank;
  spec.in_channels = cfg.in_channels;
  spec.input_shape = cfg.input_shape;
  auto& L = spec.layers;
  auto block = [&](int in, int out, int dilation) {
    L.push_back(Conv{in, out, 3, dilation});
    L.push_back(BatchNorm{out});
    L.push_back(Relu{});
    L.push_back(Dropout{cfg.dropout});
  };
  int ch = cfg.in_channels;
  std::vector<int> skips;
  for (int level = 0; level < cfg.levels; ++level) {
    const int out = cfg.base_channels << level;
    block(ch, out, cfg.contracting_dilation);
    block(out, out, cfg.contracting_dilation);
    skips.push_back(static_cast<int>(L.size()) - 1);
    L.push_back(MaxPool{2});
    ch = out;
  }
  const int bottom = cfg.base_channels << cfg.levels;
  block(ch, bottom, cfg.contracting_dilation);
  block(bottom, bottom, cfg.contracting_dilation);
  ch = bottom;
  for (int level = cfg.levels - 1; level >= 0; --level) {
    const int out = cfg.base_channels << level;
    L.push_back(Upsample{2});
    block(ch, out, 1);
    L.push_back(ConcatSkip{skips[level]});
    block(2 * out, out, 1);
    block(out, out, 1);
    ch = out;
  }
  L.push_back(Conv{ch, 1, 1, 1});
  L.push_back(Sigmoid{});
  spec.validate();
  return spec;
}

NetworkSpec build_cnn1(int base_channels, double dropout) {
  UNetConfig cfg;
  cfg.spatial_rank = 2;
  cfg.base_channels = base_channels;
  cfg.levels = 2;
  cfg.contracting_dilation = 3;
  cfg.dropout = dropout;
  cfg.input_shape = {96, 96};
  return build_unet(cfg, "cnn1");
}

NetworkSpec build_cnn2(const Shape& patch_shape, int base_channels, double dropout) {
  if (patch_shape.size() != 3) throw ConfigError("3D patch shape must have three extents");
  for (auto d : patch_shape)
    if (d == 0 || d % 4 != 0)
      throw ConfigError("patch extents must be divisible by 4, got " + shape_str(patch_shape));
  UNetConfig cfg;
  cfg.spatial_rank = 3;
  cfg.base_channels = base_channels;
  cfg.levels = 2;
  cfg.contracting_dilation = 1;
  cfg.dropout = dropout;
  cfg.input_shape = patch_shape;
  return build_unet(cfg, "cnn2");
}

template <class T>
std::vector<Tensor<T>*> ModelParams<T>::trainable() {
  std::vector<Tensor<T>*> out;
  for (auto& l : layers)
    for (Tensor<T>* t : {&l.weight, &l.bias, &l.scale, &l.shift})
      if (!t->empty()) out.push_back(t);
  return out;
}

template <class T>
std::vector<const Tensor<T>*> ModelParams<T>::trainable() const {
  std::vector<const Tensor<T>*> out;
  for (const auto& l : layers)
    for (const Tensor<T>* t : {&l.weight, &l.bias, &l.scale, &l.shift})
      if (!t->empty()) out.push_back(t);
  return out;
}

template <class T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : trainable()) n += t->size();
  return n;
}

template <class T>
ModelParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams<T> p;
  p.seed = seed;
  p.spec_fingerprint = spec.fingerprint();
  p.layers.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    auto& lp = p.layers[i];
    if (const auto* c = std::get_if<Conv>(&spec.layers[i])) {
      Shape ws{static_cast<std::size_t>(c->out_channels), static_cast<std::size_t>(c->in_channels)};
      for (int a = 0; a < spec.spatial_rank; ++a) ws.push_back(static_cast<std::size_t>(c->kernel));
      lp.weight = Tensor<T>(ws);
      const double fan_in = static_cast<double>(shape_size(ws) / ws[0]);
      const double sd = std::sqrt(2.0 / fan_in);
      Rng rng(derive_seed(seed, i));
      for (auto& w : lp.weight.values()) w = static_cast<T>(sd * rng.normal());
      lp.bias = Tensor<T>(Shape{ws[0]});
    } else if (const auto* b = std::get_if<BatchNorm>(&spec.layers[i])) {
      const Shape s{static_cast<std::size_t>(b->channels)};
      lp.scale = Tensor<T>(s, T{1});
      lp.shift = Tensor<T>(s);
      lp.running_mean = Tensor<T>(s);
      lp.running_var = Tensor<T>(s, T{1});
    }
  }
  return p;
}

template <class T>
ModelParams<T> zero_like(const ModelParams<T>& p) {
  ModelParams<T> z;
  z.seed = p.seed;
  z.spec_fingerprint = p.spec_fingerprint;
  z.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    auto& o = z.layers[i];
    if (!l.weight.empty()) o.weight = Tensor<T>(l.weight.shape());
    if (!l.bias.empty()) o.bias = Tensor<T>(l.bias.shape());
    if (!l.scale.empty()) o.scale = Tensor<T>(l.scale.shape());
    if (!l.shift.empty()) o.shift = Tensor<T>(l.shift.shape());
  }
  return z;
}

namespace {

template <class T>
void check_input(const NetworkSpec& spec, const ModelParams<T>& params, const Tensor<T>& batch) {
  if (params.layers.size() != spec.layers.size() ||
      (params.spec_fingerprint != 0 && params.spec_fingerprint != spec.fingerprint()))
    throw ConfigError("model parameters do not belong to network '" + spec.name + "'");
  const auto r = static_cast<std::size_t>(spec.spatial_rank);
  if (batch.rank() != r + 2 || batch.dim(1) != static_cast<std::size_t>(spec.in_channels))
    throw ShapeError("network '" + spec.name + "' expects [N, " + std::to_string(spec.in_channels) + ", " +
                     std::to_string(r) + " spatial extents], got " + shape_str(batch.shape()));
  if (!spec.input_shape.empty()) {
    for (std::size_t i = 0; i < r; ++i)
      if (batch.dim(i + 2) != spec.input_shape[i])
        throw ShapeError("network '" + spec.name + "' expects spatial extent " + shape_str(spec.input_shape) +
                         ", got " + shape_str(batch.shape()));
  } else {
    const std::size_t f = spec.downsampling_factor();
    for (std::size_t i = 0; i < r; ++i)
      if (batch.dim(i + 2) % f)
        throw ShapeError("spatial extents must be divisible by " + std::to_string(f) + ", got " +
                         shape_str(batch.shape()));
  }
}

template <class T>
void accumulate(Tensor<T>& dst, Tensor<T>&& src) {
  if (dst.empty()) {
    dst = std::move(src);
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <class T>
Tensor<T> forward(const NetworkSpec& spec, ModelParams<T>& params, const Tensor<T>& batch, const ForwardOptions& opt,
                  ActivationCache<T>* cache) {
  check_input(spec, params, batch);
  const std::size_t n = spec.layers.size();
  // Last layer index that reads each output (for releasing memory when not caching).
  std::vector<std::size_t> last_use(n);
  for (std::size_t i = 0; i < n; ++i) last_use[i] = i + 1;
  for (std::size_t i = 0; i < n; ++i)
    if (const auto* c = std::get_if<ConcatSkip>(&spec.layers[i]))
      last_use[c->source] = std::max(last_use[c->source], i);

  std::vector<Tensor<T>> out(n);
  std::vector<LayerCache<T>> lc(cache ? n : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<T>& x = i == 0 ? batch : out[i - 1];
    auto& lp = params.layers[i];
    LayerCache<T>* c = cache ? &lc[i] : nullptr;
    out[i] = std::visit(
        overloaded{
            [&](const Conv& cv) {
              return spec.spatial_rank == 2 ? conv2d(x, lp.weight, lp.bias, cv.dilation)
                                            : conv3d(x, lp.weight, lp.bias, cv.dilation);
            },
            [&](const BatchNorm&) {
              return batch_norm(x, lp.scale, lp.shift, lp.running_mean, lp.running_var, opt.mode, opt.batch_norm,
                                c ? &c->bn : nullptr);
            },
            [&](const Relu&) { return relu(x); },
            [&](const Dropout& d) {
              if (opt.mode == Mode::infer) {
                if (c) c->keep.clear();
                return x;
              }
              return dropout(x, d.rate, derive_seed(opt.seed, i), c ? &c->keep : nullptr);
            },
            [&](const MaxPool& m) { return maxpool(x, m.factor, c ? &c->argmax : nullptr); },
            [&](const Upsample& u) { return upsample(x, u.factor); },
            [&](const ConcatSkip& s) { return concat_channels(x, out[s.source]); },
            [&](const Sigmoid&) { return sigmoid(x); },
        },
        spec.layers[i]);
    if (!cache) {
      for (std::size_t j = 0; j < i; ++j)
        if (!out[j].empty() && last_use[j] <= i) out[j] = Tensor<T>();
    }
  }
  Tensor<T> result = out.back();
  if (cache) {
    cache->spec_fingerprint = spec.fingerprint();
    cache->mode = opt.mode;
    cache->input = batch;
    cache->outputs = std::move(out);
    cache->layers = std::move(lc);
  }
  return result;
}

template <class T>
Tensor<T> predict(const NetworkSpec& spec, const ModelParams<T>& params, const Tensor<T>& batch) {
  // Infer mode reads but never writes the running statistics.
  return forward(spec, const_cast<ModelParams<T>&>(params), batch, ForwardOptions{Mode::infer, 0, {}});
}

template <class T>
ModelParams<T> backward(const NetworkSpec& spec, const ModelParams<T>& params, const ActivationCache<T>& cache,
                        const Tensor<T>& loss_grad) {
  const std::size_t n = spec.layers.size();
  if (cache.outputs.size() != n || cache.layers.size() != n || cache.spec_fingerprint != spec.fingerprint())
    throw ConfigError("backward: missing or stale activation cache");
  if (loss_grad.shape() != cache.outputs.back().shape())
    throw ShapeError("backward: loss gradient shape " + shape_str(loss_grad.shape()) + " does not match output " +
                     shape_str(cache.outputs.back().shape()));
  ModelParams<T> grads = zero_like(params);
  std::vector<Tensor<T>> g(n);
  g[n - 1] = loss_grad;
  for (std::size_t ii = n; ii-- > 0;) {
    if (g[ii].empty()) continue;
    const Tensor<T>& x = ii == 0 ? cache.input : cache.outputs[ii - 1];
    const Tensor<T>& y = cache.outputs[ii];
    const auto& lc = cache.layers[ii];
    const auto& lp = params.layers[ii];
    Tensor<T> gx;
    std::visit(overloaded{
                   [&](const Conv& cv) {
                     auto cg = conv_backward(x, lp.weight, cv.dilation, g[ii], ii > 0);
                     grads.layers[ii].weight = std::move(cg.weights);
                     grads.layers[ii].bias = std::move(cg.bias);
                     gx = std::move(cg.input);
                   },
                   [&](const BatchNorm&) {
                     if (cache.mode == Mode::train) {
                       auto bg = batch_norm_backward(lp.scale, lc.bn, g[ii]);
                       grads.layers[ii].scale = std::move(bg.scale);
                       grads.layers[ii].shift = std::move(bg.shift);
                       gx = std::move(bg.input);
                     } else {
                       // Running statistics are constants: a per-channel affine map.
                       const std::size_t N = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                       gx = Tensor<T>(x.shape());
                       Tensor<T> gs(Shape{C}), gb(Shape{C});
                       for (std::size_t c = 0; c < C; ++c) {
                         double sdy = 0, sdyx = 0;
                         const double k = lp.scale[c] * lc.bn.inv_std[c];
                         for (std::size_t b = 0; b < N; ++b)
                           for (std::size_t s = 0; s < S; ++s) {
                             const std::size_t idx = (b * C + c) * S + s;
                             sdy += g[ii][idx];
                             sdyx += static_cast<double>(g[ii][idx]) * lc.bn.normalized[idx];
                             gx[idx] = static_cast<T>(k * g[ii][idx]);
                           }
                         gs[c] = static_cast<T>(sdyx);
                         gb[c] = static_cast<T>(sdy);
                       }
                       grads.layers[ii].scale = std::move(gs);
                       grads.layers[ii].shift = std::move(gb);
                     }
                   },
                   [&](const Relu&) { gx = relu_backward(y, g[ii]); },
                   [&](const Dropout& d) {
                     gx = (cache.mode == Mode::infer || d.rate == 0.0) ? g[ii] : dropout_backward(g[ii], d.rate, lc.keep);
                   },
                   [&](const MaxPool&) { gx = maxpool_backward(x.shape(), g[ii], lc.argmax); },
                   [&](const Upsample& u) { gx = upsample_backward(x.shape(), g[ii], u.factor); },
                   [&](const ConcatSkip& s) {
                     Tensor<T> gs;
                     split_channels(g[ii], x.dim(1), gx, gs);
                     accumulate(g[s.source], std::move(gs));
                   },
                   [&](const Sigmoid&) { gx = sigmoid_backward(y, g[ii]); },
               },
               spec.layers[ii]);
    g[ii] = Tensor<T>();
    if (ii > 0 && !gx.empty()) accumulate(g[ii - 1], std::move(gx));
  }
  return grads;
}

template <class T>
LossResult<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps) {
  if (pred.shape() != target.shape())
    throw ShapeError("dice_loss shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  if (!(eps > 0.0)) throw ConfigError("dice smoothing must be positive");
  double inter = 0.0, pp = 0.0, tt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], t = target[i];
    inter += p * t;
    pp += p * p;
    tt += t * t;
  }
  const double num = 2.0 * inter + eps;
  const double den = pp + tt + eps;
  LossResult<T> r;
  r.loss = 1.0 - num / den;
  r.grad = Tensor<T>(pred.shape());
  const double a = 2.0 / den, b = 2.0 * num / (den * den);
  for (std::size_t i = 0; i < pred.size(); ++i)
    r.grad[i] = static_cast<T>(-a * static_cast<double>(target[i]) + b * static_cast<double>(pred[i]));
  return r;
}

template <class T>
AdamState<T> make_adam(const ModelParams<T>& params, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
  AdamState<T> s;
  s.cfg = cfg;
  for (const auto* t : params.trainable()) {
    s.m.emplace_back(t->shape());
    s.v.emplace_back(t->shape());
  }
  return s;
}

template <class T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state) {
  auto ps = params.trainable();
  auto gs = grads.trainable();
  if (ps.size() != gs.size() || ps.size() != state.m.size())
    throw ShapeError("adam_step: gradients do not align with parameters");
  state.t += 1;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor<T>& p = *ps[i];
    const Tensor<T>& g = *gs[i];
    if (p.shape() != g.shape() || state.m[i].shape() != p.shape())
      throw ShapeError("adam_step: shape mismatch for tensor " + std::to_string(i));
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double m = c.beta1 * state.m[i][j] + (1.0 - c.beta1) * gj;
      const double v = c.beta2 * state.v[i][j] + (1.0 - c.beta2) * gj * gj;
      state.m[i][j] = static_cast<T>(m);
      state.v[i][j] = static_cast<T>(v);
      p[j] = static_cast<T>(p[j] - c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps));
    }
  }
}

namespace {

constexpr char kMagic[4] = {'C', 'S', 'E', 'G'};
constexpr std::uint32_t kVersion = 1;

template <class T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 1 : 2;
}

struct NamedSlot {
  std::string name;
  std::size_t layer;
  int which;  // 0 weight, 1 bias, 2 scale, 3 shift, 4 running_mean, 5 running_var
};

std::vector<NamedSlot> slots(const NetworkSpec& spec) {
  std::vector<NamedSlot> s;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string p = "L" + std::to_string(i) + ".";
    if (std::holds_alternative<Conv>(spec.layers[i])) {
      s.push_back({p + "weight", i, 0});
      s.push_back({p + "bias", i, 1});
    } else if (std::holds_alternative<BatchNorm>(spec.layers[i])) {
      s.push_back({p + "scale", i, 2});
      s.push_back({p + "shift", i, 3});
      s.push_back({p + "running_mean", i, 4});
      s.push_back({p + "running_var", i, 5});
    }
  }
  return s;
}

template <class T>
Tensor<T>& slot_ref(LayerParams<T>& l, int which) {
  switch (which) {
    case 0: return l.weight;
    case 1: return l.bias;
    case 2: return l.scale;
    case 3: return l.shift;
    case 4: return l.running_mean;
    default: return l.running_var;
  }
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <class U>
  U pod() {
    U v;
    bytes(&v, sizeof(U));
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError("corrupt parameter file '" + path_ + "': unexpected end of data");
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

template <class T>
void save_params(const ModelParams<T>& params, const NetworkSpec& spec, const std::filesystem::path& path) {
  if (params.layers.size() != spec.layers.size()) throw ConfigError("parameters do not match network spec");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  auto put = [&](const void* p, std::size_t n) { out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); };
  const std::uint64_t fp = spec.fingerprint();
  const auto sl = slots(spec);
  const auto count = static_cast<std::uint32_t>(sl.size());
  put(kMagic, 4);
  put(&kVersion, 4);
  put(&fp, 8);
  put(&params.seed, 8);
  put(&count, 4);
  auto& mp = const_cast<ModelParams<T>&>(params);
  for (const auto& s : sl) {
    const Tensor<T>& t = slot_ref(mp.layers[s.layer], s.which);
    const auto len = static_cast<std::uint32_t>(s.name.size());
    put(&len, 4);
    put(s.name.data(), len);
    const std::uint8_t dt = dtype_code<T>();
    put(&dt, 1);
    const auto rank = static_cast<std::uint32_t>(t.rank());
    put(&rank, 4);
    for (auto d : t.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      put(&d64, 8);
    }
    put(t.data(), t.size() * sizeof(T));
  }
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

template <class T>
ModelParams<T> load_params(const NetworkSpec& spec, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  Reader r(in, path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("corrupt parameter file '" + path.string() + "': bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion)
    throw FormatError("unsupported parameter file version " + std::to_string(version) + " in '" + path.string() + "'");
  const auto fp = r.pod<std::uint64_t>();
  if (fp != spec.fingerprint())
    throw ConfigError("parameter file '" + path.string() + "' fingerprint mismatch: written for a different network");
  ModelParams<T> p = init_params<T>(spec, 0);
  p.seed = r.pod<std::uint64_t>();
  const auto count = r.pod<std::uint32_t>();
  const auto sl = slots(spec);
  if (count != sl.size()) throw FormatError("corrupt parameter file '" + path.string() + "': tensor count");
  for (const auto& s : sl) {
    const auto len = r.pod<std::uint32_t>();
    if (len > 256) throw FormatError("corrupt parameter file '" + path.string() + "': tensor name");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    if (name != s.name) throw FormatError("corrupt parameter file '" + path.string() + "': expected tensor " + s.name);
    const auto dt = r.pod<std::uint8_t>();
    const auto rank = r.pod<std::uint32_t>();
    if ((dt != 1 && dt != 2) || rank > 8) throw FormatError("corrupt parameter file '" + path.string() + "': header");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    Tensor<T>& dst = slot_ref(p.layers[s.layer], s.which);
    if (shape != dst.shape())
      throw FormatError("corrupt parameter file '" + path.string() + "': shape of " + s.name);
    if (dt == dtype_code<T>()) {
      r.bytes(dst.data(), dst.size() * sizeof(T));
    } else if (dt == 1) {
      std::vector<float> tmp(dst.size());
      r.bytes(tmp.data(), tmp.size() * sizeof(float));
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
    } else {
      std::vector<double> tmp(dst.size());
      r.bytes(tmp.data(), tmp.size() * sizeof(double));
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
    }
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    for (std::size_t c = 0; c < p.layers[i].running_var.size(); ++c)
      if (!(p.layers[i].running_var[c] > T{0}))
        throw FormatError("corrupt parameter file '" + path.string() + "': non-positive running variance");
  return p;
}

#define CORDSEG_INSTANTIATE(T)                                                                                   \
  template struct ModelParams<T>;                                                                                \
  template ModelParams<T> init_params<T>(const NetworkSpec&, std::uint64_t);                                     \
  template ModelParams<T> zero_like(const ModelParams<T>&);                                                      \
  template Tensor<T> forward(const NetworkSpec&, ModelParams<T>&, const Tensor<T>&, const ForwardOptions&,       \
                             ActivationCache<T>*);                                                               \
  template Tensor<T> predict(const NetworkSpec&, const ModelParams<T>&, const Tensor<T>&);                       \
  template ModelParams<T> backward(const NetworkSpec&, const ModelParams<T>&, const ActivationCache<T>&,         \
                                   const Tensor<T>&);                                                            \
  template LossResult<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double);                                  \
  template AdamState<T> make_adam(const ModelParams<T>&, const AdamConfig&);                                     \
  template void adam_step(ModelParams<T>&, const ModelParams<T>&, AdamState<T>&);                                \
  template void save_params(const ModelParams<T>&, const NetworkSpec&, const std::filesystem::path&);            \
  template ModelParams<T> load_params<T>(const NetworkSpec&, const std::filesystem::path&);

CORDSEG_INSTANTIATE(float)
CORDSEG_INSTANTIATE(double)

}  // namespace cordseg::nn
