#include "omnidrl/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace omnidrl::nn {

namespace {

template <typename T>
using ConstMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MutMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using MutVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

struct Shape {
  int c, h, w;
};

ConvGeom make_conv(const Shape& in, const ConvSpec& spec, std::size_t& offset) {
  ConvGeom g{};
  g.in_c = in.c;
  g.in_h = in.h;
  g.in_w = in.w;
  g.out_c = spec.filters;
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.pad;
  g.out_h = (in.h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
  g.out_w = (in.w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
  if (spec.filters <= 0 || spec.kernel <= 0 || spec.stride <= 0 || spec.pad < 0 || g.out_h <= 0 ||
      g.out_w <= 0) {
    throw std::invalid_argument("convolution does not fit its input");
  }
  g.w_off = offset;
  offset += static_cast<std::size_t>(g.out_c) * g.in_c * g.k * g.k;
  g.b_off = offset;
  offset += g.out_c;
  return g;
}

DenseGeom make_dense(int in, int out, bool relu, std::size_t& offset) {
  DenseGeom g{in, out, relu, offset, 0};
  offset += static_cast<std::size_t>(in) * out;
  g.b_off = offset;
  offset += out;
  return g;
}

template <typename T>
void im2col(const Mat<T>& in, const ConvGeom& g, int batch, Mat<T>& cols) {
  const int ohw = g.out_h * g.out_w;
  const int ihw = g.in_h * g.in_w;
  cols.resize(static_cast<Eigen::Index>(g.in_c) * g.k * g.k, static_cast<Eigen::Index>(batch) * ohw);
  for (int c = 0; c < g.in_c; ++c) {
    const T* src = in.row(c).data();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = cols.row((c * g.k + ky) * g.k + kx).data();
        for (int n = 0; n < batch; ++n) {
          const T* img = src + static_cast<std::ptrdiff_t>(n) * ihw;
          T* out = dst + static_cast<std::ptrdiff_t>(n) * ohw;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.s - g.p + ky;
            T* orow = out + oy * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(orow, orow + g.out_w, T(0));
              continue;
            }
            const T* irow = img + iy * g.in_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.s - g.p + kx;
              orow[ox] = (ix >= 0 && ix < g.in_w) ? irow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const Mat<T>& cols, const ConvGeom& g, int batch, Mat<T>& d_in) {
  const int ohw = g.out_h * g.out_w;
  const int ihw = g.in_h * g.in_w;
  d_in.setZero(g.in_c, static_cast<Eigen::Index>(batch) * ihw);
  for (int c = 0; c < g.in_c; ++c) {
    T* dst = d_in.row(c).data();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = cols.row((c * g.k + ky) * g.k + kx).data();
        for (int n = 0; n < batch; ++n) {
          T* img = dst + static_cast<std::ptrdiff_t>(n) * ihw;
          const T* in = src + static_cast<std::ptrdiff_t>(n) * ohw;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.s - g.p + ky;
            if (iy < 0 || iy >= g.in_h) continue;
            T* irow = img + iy * g.in_w;
            const T* orow = in + oy * g.out_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.s - g.p + kx;
              if (ix >= 0 && ix < g.in_w) irow[ix] += orow[ox];
            }
          }
        }
      }
    }
  }
}

// [C, N*HW] -> [C*HW, N]
template <typename T>
Mat<T> flatten(const Mat<T>& a, int batch) {
  const Eigen::Index channels = a.rows();
  const Eigen::Index hw = a.cols() / batch;
  Mat<T> x(channels * hw, batch);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (int n = 0; n < batch; ++n) {
      for (Eigen::Index i = 0; i < hw; ++i) x(c * hw + i, n) = a(c, n * hw + i);
    }
  }
  return x;
}

template <typename T>
Mat<T> unflatten(const Mat<T>& x, Eigen::Index channels, int batch) {
  const Eigen::Index hw = x.rows() / channels;
  Mat<T> a(channels, hw * batch);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (int n = 0; n < batch; ++n) {
      for (Eigen::Index i = 0; i < hw; ++i) a(c, n * hw + i) = x(c * hw + i, n);
    }
  }
  return a;
}

template <typename T>
Mat<T> conv_forward(const ConvGeom& g, std::span<const T> params, const Mat<T>& in, int batch,
                    ConvCache<T>& cache) {
  im2col(in, g, batch, cache.cols);
  const ConstMap<T> w(params.data() + g.w_off, g.out_c, static_cast<Eigen::Index>(g.in_c) * g.k * g.k);
  const ConstVec<T> b(params.data() + g.b_off, g.out_c);
  Mat<T> out = w * cache.cols;
  out.colwise() += b;
  out = out.cwiseMax(T(0));
  return out;
}

template <typename T>
Mat<T> dense_forward(const DenseGeom& g, std::span<const T> params, const Mat<T>& x) {
  const ConstMap<T> w(params.data() + g.w_off, g.out, g.in);
  const ConstVec<T> b(params.data() + g.b_off, g.out);
  Mat<T> y = w * x;
  y.colwise() += b;
  if (g.relu) y = y.cwiseMax(T(0));
  return y;
}

template <typename T>
Mat<T> branch_forward(const BranchGeom& g, std::span<const T> params, const Mat<T>& trunk, int batch,
                      BranchCache<T>& cache, bool keep) {
  cache.convs.resize(g.convs.size());
  const Mat<T>* a = &trunk;
  Mat<T> tmp;
  for (std::size_t i = 0; i < g.convs.size(); ++i) {
    tmp = conv_forward(g.convs[i], params, *a, batch, cache.convs[i]);
    if (keep) cache.convs[i].out = tmp;
    a = keep ? &cache.convs[i].out : &tmp;
  }
  Mat<T> x = flatten(*a, batch);
  cache.dense_in.resize(g.dense.size());
  cache.dense_out.resize(g.dense.size());
  for (std::size_t i = 0; i < g.dense.size(); ++i) {
    Mat<T> y = dense_forward(g.dense[i], params, x);
    if (keep) {
      cache.dense_in[i] = std::move(x);
      cache.dense_out[i] = y;
    }
    x = std::move(y);
  }
  return x;
}

// Returns dLoss/d(trunk output).
template <typename T>
Mat<T> branch_backward(const BranchGeom& g, std::span<const T> params, const BranchCache<T>& cache,
                       const Mat<T>& trunk, int batch, Mat<T> d_out, std::span<T> grad) {
  for (std::size_t i = g.dense.size(); i-- > 0;) {
    const DenseGeom& dg = g.dense[i];
    if (dg.relu) d_out = d_out.cwiseProduct((cache.dense_out[i].array() > T(0)).matrix().template cast<T>());
    MutMap<T> dw(grad.data() + dg.w_off, dg.out, dg.in);
    MutVec<T> db(grad.data() + dg.b_off, dg.out);
    dw.noalias() += d_out * cache.dense_in[i].transpose();
    db += d_out.rowwise().sum();
    const ConstMap<T> w(params.data() + dg.w_off, dg.out, dg.in);
    d_out = w.transpose() * d_out;
  }
  const Eigen::Index channels = g.convs.empty() ? trunk.rows() : g.convs.back().out_c;
  Mat<T> d_a = unflatten(d_out, channels, batch);
  for (std::size_t i = g.convs.size(); i-- > 0;) {
    const ConvGeom& cg = g.convs[i];
    d_a = d_a.cwiseProduct((cache.convs[i].out.array() > T(0)).matrix().template cast<T>());
    const Eigen::Index ckk = static_cast<Eigen::Index>(cg.in_c) * cg.k * cg.k;
    MutMap<T> dw(grad.data() + cg.w_off, cg.out_c, ckk);
    MutVec<T> db(grad.data() + cg.b_off, cg.out_c);
    dw.noalias() += d_a * cache.convs[i].cols.transpose();
    db += d_a.rowwise().sum();
    const ConstMap<T> w(params.data() + cg.w_off, cg.out_c, ckk);
    Mat<T> d_cols = w.transpose() * d_a;
    col2im(d_cols, cg, batch, d_a);
  }
  return d_a;
}

void build_branch(const ArchSpec& arch, Shape shape, int outputs, BranchGeom& g, std::size_t& offset,
                  std::vector<ParamGroup>& groups, const std::string& prefix) {
  g.begin = offset;
  for (std::size_t i = 0; i < arch.branch.size(); ++i) {
    g.convs.push_back(make_conv(shape, arch.branch[i], offset));
    const ConvGeom& cg = g.convs.back();
    groups.push_back({prefix + "conv" + std::to_string(i) + ".w", cg.w_off, cg.b_off});
    groups.push_back({prefix + "conv" + std::to_string(i) + ".b", cg.b_off, offset});
    shape = {cg.out_c, cg.out_h, cg.out_w};
  }
  const int features = shape.c * shape.h * shape.w;
  g.dense.push_back(make_dense(features, arch.fc_hidden, true, offset));
  groups.push_back({prefix + "fc0.w", g.dense.back().w_off, g.dense.back().b_off});
  groups.push_back({prefix + "fc0.b", g.dense.back().b_off, offset});
  g.dense.push_back(make_dense(arch.fc_hidden, outputs, false, offset));
  groups.push_back({prefix + "fc1.w", g.dense.back().w_off, g.dense.back().b_off});
  groups.push_back({prefix + "fc1.b", g.dense.back().b_off, offset});
  g.end = offset;
}

}  // namespace

ArchSpec ArchSpec::paper() {
  ArchSpec a;
  a.in_channels = 1;
  a.in_height = a.in_width = 224;
  a.shared = {{32, 8, 4, 2}, {64, 4, 2, 1}, {64, 3, 1, 1}};
  a.branch = {{64, 3, 2, 1}, {64, 3, 2, 1}};
  a.fc_hidden = 512;
  return a;
}

ArchSpec ArchSpec::desk() {
  ArchSpec a;
  a.in_channels = 1;
  a.in_height = a.in_width = 64;
  a.shared = {{8, 4, 4, 0}, {16, 3, 2, 1}};
  a.branch = {{16, 3, 2, 1}};
  a.fc_hidden = 64;
  return a;
}

void to_json(nlohmann::json& j, const ConvSpec& c) {
  j = nlohmann::json{{"filters", c.filters}, {"kernel", c.kernel}, {"stride", c.stride}, {"pad", c.pad}};
}

void from_json(const nlohmann::json& j, ConvSpec& c) {
  c.filters = j.at("filters").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.stride = j.at("stride").get<int>();
  c.pad = j.at("pad").get<int>();
}

void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = nlohmann::json{{"in_channels", a.in_channels}, {"in_height", a.in_height},
                     {"in_width", a.in_width},       {"shared", a.shared},
                     {"branch", a.branch},           {"fc_hidden", a.fc_hidden},
                     {"num_actions", a.num_actions}, {"num_classes", a.num_classes}};
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
  a.in_channels = j.at("in_channels").get<int>();
  a.in_height = j.at("in_height").get<int>();
  a.in_width = j.at("in_width").get<int>();
  a.shared = j.at("shared").get<std::vector<ConvSpec>>();
  a.branch = j.at("branch").get<std::vector<ConvSpec>>();
  a.fc_hidden = j.at("fc_hidden").get<int>();
  a.num_actions = j.at("num_actions").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
}

Layout::Layout(const ArchSpec& arch) : arch_(arch) {
  if (arch.in_channels <= 0 || arch.in_height <= 0 || arch.in_width <= 0 || arch.fc_hidden <= 0 ||
      arch.num_actions <= 0 || arch.num_classes <= 0) {
    throw std::invalid_argument("architecture dimensions must be positive");
  }
  std::size_t offset = 0;
  Shape shape{arch.in_channels, arch.in_height, arch.in_width};
  for (std::size_t i = 0; i < arch.shared.size(); ++i) {
    shared_.push_back(make_conv(shape, arch.shared[i], offset));
    const ConvGeom& g = shared_.back();
    groups_.push_back({"shared.conv" + std::to_string(i) + ".w", g.w_off, g.b_off});
    groups_.push_back({"shared.conv" + std::to_string(i) + ".b", g.b_off, offset});
    shape = {g.out_c, g.out_h, g.out_w};
  }
  build_branch(arch, shape, arch.num_actions, q_, offset, groups_, "q.");
  build_branch(arch, shape, arch.num_classes, cls_, offset, groups_, "cls.");
  num_params_ = offset;
}

template <typename T>
Mat<T> make_input(const Layout& layout, std::span<const std::uint8_t* const> observations) {
  const ArchSpec& a = layout.arch();
  const int hw = a.in_height * a.in_width;
  const int batch = static_cast<int>(observations.size());
  Mat<T> x(a.in_channels, static_cast<Eigen::Index>(batch) * hw);
  for (int n = 0; n < batch; ++n) {
    const std::uint8_t* obs = observations[n];
    for (int c = 0; c < a.in_channels; ++c) {
      T* dst = x.row(c).data() + static_cast<std::ptrdiff_t>(n) * hw;
      const std::uint8_t* src = obs + static_cast<std::ptrdiff_t>(c) * hw;
      for (int i = 0; i < hw; ++i) dst[i] = static_cast<T>(src[i]) * T(1.0 / 255.0);
    }
  }
  return x;
}

template <typename T>
ForwardPass<T> forward(const Layout& layout, std::span<const T> params, Mat<T> input, int batch,
                       Heads heads, bool keep_cache) {
  const ArchSpec& a = layout.arch();
  if (params.size() != layout.num_params()) throw std::invalid_argument("forward: parameter count mismatch");
  if (batch <= 0 || input.rows() != a.in_channels ||
      input.cols() != static_cast<Eigen::Index>(batch) * a.in_height * a.in_width) {
    throw std::invalid_argument("forward: input shape does not match the architecture");
  }
  ForwardPass<T> pass;
  pass.batch = batch;
  pass.cached = keep_cache;
  pass.shared.resize(layout.shared().size());
  Mat<T> act = std::move(input);
  if (keep_cache) pass.input = act;
  for (std::size_t i = 0; i < layout.shared().size(); ++i) {
    Mat<T> out = conv_forward(layout.shared()[i], params, act, batch, pass.shared[i]);
    if (keep_cache) pass.shared[i].out = out;
    act = std::move(out);
  }
  if (!keep_cache) {
    for (auto& c : pass.shared) c.cols.resize(0, 0);
  }
  if (heads.q) pass.q = branch_forward(layout.q_branch(), params, act, batch, pass.q_cache, keep_cache);
  if (heads.cls) {
    pass.logits = branch_forward(layout.cls_branch(), params, act, batch, pass.cls_cache, keep_cache);
  }
  return pass;
}

template <typename T>
void backward(const Layout& layout, std::span<const T> params, const ForwardPass<T>& pass,
              const Mat<T>* d_q, const Mat<T>* d_logits, std::span<T> grad) {
  if (!pass.cached) throw std::logic_error("backward: forward pass was run without a cache");
  if (grad.size() != layout.num_params()) throw std::invalid_argument("backward: gradient size mismatch");
  const int batch = pass.batch;
  const Mat<T>& trunk = layout.shared().empty() ? pass.input : pass.shared.back().out;
  Mat<T> d_trunk;
  if (d_q) d_trunk = branch_backward(layout.q_branch(), params, pass.q_cache, trunk, batch, *d_q, grad);
  if (d_logits) {
    Mat<T> d = branch_backward(layout.cls_branch(), params, pass.cls_cache, trunk, batch, *d_logits, grad);
    if (d_trunk.size() == 0) {
      d_trunk = std::move(d);
    } else {
      d_trunk += d;
    }
  }
  if (d_trunk.size() == 0) return;
  for (std::size_t i = layout.shared().size(); i-- > 0;) {
    const ConvGeom& g = layout.shared()[i];
    d_trunk = d_trunk.cwiseProduct((pass.shared[i].out.array() > T(0)).matrix().template cast<T>());
    const Eigen::Index ckk = static_cast<Eigen::Index>(g.in_c) * g.k * g.k;
    MutMap<T> dw(grad.data() + g.w_off, g.out_c, ckk);
    MutVec<T> db(grad.data() + g.b_off, g.out_c);
    dw.noalias() += d_trunk * pass.shared[i].cols.transpose();
    db += d_trunk.rowwise().sum();
    if (i == 0) break;  // no gradient needed for the input image
    const ConstMap<T> w(params.data() + g.w_off, g.out_c, ckk);
    Mat<T> d_cols = w.transpose() * d_trunk;
    col2im(d_cols, g, batch, d_trunk);
  }
}

template <typename T>
void init_params(const Layout& layout, std::span<T> params, std::mt19937_64& rng) {
  if (params.size() != layout.num_params()) throw std::invalid_argument("init_params: size mismatch");
  std::fill(params.begin(), params.end(), T(0));
  auto fill = [&](std::size_t off, std::size_t count, int fan_in) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    for (std::size_t i = 0; i < count; ++i) params[off + i] = static_cast<T>(normal(rng));
  };
  auto conv = [&](const ConvGeom& g) {
    fill(g.w_off, g.b_off - g.w_off, g.in_c * g.k * g.k);
  };
  auto branch = [&](const BranchGeom& b) {
    for (const auto& g : b.convs) conv(g);
    for (const auto& d : b.dense) fill(d.w_off, d.b_off - d.w_off, d.in);
  };
  for (const auto& g : layout.shared()) conv(g);
  branch(layout.q_branch());
  branch(layout.cls_branch());
}

#define OMNIDRL_NN_INSTANTIATE(T)                                                               \
  template Mat<T> make_input<T>(const Layout&, std::span<const std::uint8_t* const>);           \
  template ForwardPass<T> forward<T>(const Layout&, std::span<const T>, Mat<T>, int, Heads, bool); \
  template void backward<T>(const Layout&, std::span<const T>, const ForwardPass<T>&,           \
                            const Mat<T>*, const Mat<T>*, std::span<T>);                        \
  template void init_params<T>(const Layout&, std::span<T>, std::mt19937_64&);

OMNIDRL_NN_INSTANTIATE(float)
OMNIDRL_NN_INSTANTIATE(double)

#undef OMNIDRL_NN_INSTANTIATE

}  // namespace omnidrl::nn
