#include "moseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_set>

namespace moseg {

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> values;
  std::vector<float> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  const char* op = "leaf";
};

}  // namespace detail

using detail::TensorImpl;

namespace {

thread_local bool g_grad_enabled = true;

int product(const std::vector<int>& shape) {
  int n = 1;
  for (const int d : shape) n *= d;
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_chw(const Tensor& t, const char* op) {
  if (t.shape().size() != 3) {
    throw ShapeError(std::string(op) + ": expected {C,H,W} tensor, got " +
                     shape_str(t.shape()));
  }
}

// Output node factory. Records parents and allocates the grad buffer only
// when tracking is enabled and some parent is tracked, so inference graphs
// carry no tape.
Tensor make_node(std::vector<int> shape, std::vector<Tensor> parents,
                 const char* op_name) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(static_cast<std::size_t>(product(shape)), 0.0f);
  impl->shape = std::move(shape);
  impl->op = op_name;
  if (g_grad_enabled) {
    bool track = false;
    for (const Tensor& p : parents) track = track || p.requires_grad();
    if (track) {
      impl->requires_grad = true;
      impl->grad.assign(impl->values.size(), 0.0f);
      impl->parents.reserve(parents.size());
      for (const Tensor& p : parents) impl->parents.push_back(p.ptr());
    }
  }
  return Tensor(std::move(impl));
}

float* grad_of(const std::shared_ptr<TensorImpl>& p) {
  return p->requires_grad ? p->grad.data() : nullptr;
}

}  // namespace

GradGuard::GradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
GradGuard::~GradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "{";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "}";
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(static_cast<std::size_t>(product(shape)), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->values.size(), 0.0f);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  auto v = t.values_mut();
  std::fill(v.begin(), v.end(), value);
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<float> values,
                           bool requires_grad) {
  const int n = product(shape);
  if (static_cast<std::size_t>(n) != values.size()) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->values.size(), 0.0f);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::numel() const { return static_cast<int>(impl_->values.size()); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const float> Tensor::values() const {
  return {impl_->values.data(), impl_->values.size()};
}

std::span<float> Tensor::values_mut() {
  return {impl_->values.data(), impl_->values.size()};
}

std::span<const float> Tensor::grad() const {
  if (!impl_ || impl_->grad.empty()) return {};
  return {impl_->grad.data(), impl_->grad.size()};
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor is not scalar, shape " +
                     shape_str(impl_->shape));
  }
  return impl_->values[0];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;
  impl->op = "detach";
  return Tensor(std::move(impl));
}

void Tensor::zero_grad() const {
  if (impl_ && !impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
}

void Tensor::backward() const {
  if (!impl_) throw ConfigError("backward: undefined tensor");
  if (numel() != 1) {
    throw ConfigError("backward: loss must be scalar, got shape " +
                      shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) return;  // constant graph, nothing to do

  // Iterative post-order DFS for topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  impl_->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_node(a.shape(), {a, b}, "add");
  const float* av = a.values().data();
  const float* bv = b.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    auto pa = a.ptr(), pb = b.ptr();
    out.ptr()->backward_fn = [pa, pb, n](TensorImpl& self) {
      const float* g = self.grad.data();
      if (float* ga = grad_of(pa)) {
        for (int i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (float* gb = grad_of(pb)) {
        for (int i = 0; i < n; ++i) gb[i] += g[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_node(a.shape(), {a, b}, "sub");
  const float* av = a.values().data();
  const float* bv = b.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    auto pa = a.ptr(), pb = b.ptr();
    out.ptr()->backward_fn = [pa, pb, n](TensorImpl& self) {
      const float* g = self.grad.data();
      if (float* ga = grad_of(pa)) {
        for (int i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (float* gb = grad_of(pb)) {
        for (int i = 0; i < n; ++i) gb[i] -= g[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_node(a.shape(), {a, b}, "mul");
  const float* av = a.values().data();
  const float* bv = b.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    auto pa = a.ptr(), pb = b.ptr();
    out.ptr()->backward_fn = [pa, pb, n](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* av2 = pa->values.data();
      const float* bv2 = pb->values.data();
      if (float* ga = grad_of(pa)) {
        for (int i = 0; i < n; ++i) ga[i] += g[i] * bv2[i];
      }
      if (float* gb = grad_of(pb)) {
        for (int i = 0; i < n; ++i) gb[i] += g[i] * av2[i];
      }
    };
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b, float eps) {
  check_same_shape(a, b, "div");
  Tensor out = make_node(a.shape(), {a, b}, "div");
  const float* av = a.values().data();
  const float* bv = b.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] / (bv[i] + eps);
  if (out.requires_grad()) {
    auto pa = a.ptr(), pb = b.ptr();
    out.ptr()->backward_fn = [pa, pb, n, eps](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* av2 = pa->values.data();
      const float* bv2 = pb->values.data();
      if (float* ga = grad_of(pa)) {
        for (int i = 0; i < n; ++i) ga[i] += g[i] / (bv2[i] + eps);
      }
      if (float* gb = grad_of(pb)) {
        for (int i = 0; i < n; ++i) {
          const float d = bv2[i] + eps;
          gb[i] -= g[i] * av2[i] / (d * d);
        }
      }
    };
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float s) {
  Tensor out = make_node(a.shape(), {a}, "add_scalar");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] + s;
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g[i];
    };
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, float s) {
  Tensor out = make_node(a.shape(), {a}, "mul_scalar");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] * s;
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n, s](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g[i] * s;
    };
  }
  return out;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor relu(const Tensor& a) {
  Tensor out = make_node(a.shape(), {a}, "relu");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] > 0.0f ? av[i] : 0.0f;
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* av2 = pa->values.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) {
        if (av2[i] > 0.0f) ga[i] += g[i];
      }
    };
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_node(a.shape(), {a}, "sigmoid");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) {
    const float x = av[i];
    if (x >= 0.0f) {
      ov[i] = 1.0f / (1.0f + std::exp(-x));
    } else {
      const float e = std::exp(x);
      ov[i] = e / (1.0f + e);
    }
  }
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* ov2 = self.values.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g[i] * ov2[i] * (1.0f - ov2[i]);
    };
  }
  return out;
}

Tensor abs_val(const Tensor& a) {
  Tensor out = make_node(a.shape(), {a}, "abs");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = std::fabs(av[i]);
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* av2 = pa->values.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) {
        if (av2[i] > 0.0f) {
          ga[i] += g[i];
        } else if (av2[i] < 0.0f) {
          ga[i] -= g[i];
        }
      }
    };
  }
  return out;
}

Tensor clamp_max(const Tensor& a, float hi) {
  Tensor out = make_node(a.shape(), {a}, "clamp_max");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const int n = out.numel();
  for (int i = 0; i < n; ++i) ov[i] = av[i] < hi ? av[i] : hi;
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n, hi](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* av2 = pa->values.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) {
        if (av2[i] < hi) ga[i] += g[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel ops
// ---------------------------------------------------------------------------

Tensor softmax_channels(const Tensor& a) {
  check_chw(a, "softmax_channels");
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  const int plane = h * w;
  Tensor out = make_node(a.shape(), {a}, "softmax_channels");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  for (int p = 0; p < plane; ++p) {
    float mx = av[p];
    for (int k = 1; k < c; ++k) mx = std::max(mx, av[k * plane + p]);
    float s = 0.0f;
    for (int k = 0; k < c; ++k) {
      const float e = std::exp(av[k * plane + p] - mx);
      ov[k * plane + p] = e;
      s += e;
    }
    const float inv = 1.0f / s;
    for (int k = 0; k < c; ++k) ov[k * plane + p] *= inv;
  }
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, c, plane](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* o = self.values.data();
      float* ga = pa->grad.data();
      for (int p = 0; p < plane; ++p) {
        float dot = 0.0f;
        for (int k = 0; k < c; ++k) dot += g[k * plane + p] * o[k * plane + p];
        for (int k = 0; k < c; ++k) {
          ga[k * plane + p] += o[k * plane + p] * (g[k * plane + p] - dot);
        }
      }
    };
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  check_chw(parts[0], "concat_channels");
  const int h = parts[0].shape()[1], w = parts[0].shape()[2];
  int total_c = 0;
  for (const Tensor& p : parts) {
    check_chw(p, "concat_channels");
    if (p.shape()[1] != h || p.shape()[2] != w) {
      throw ShapeError("concat_channels: shape mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total_c += p.shape()[0];
  }
  Tensor out = make_node({total_c, h, w}, parts, "concat_channels");
  float* ov = out.values_mut().data();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const auto v = p.values();
    std::copy(v.begin(), v.end(), ov + off);
    off += v.size();
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorImpl>> ps;
    for (const Tensor& p : parts) ps.push_back(p.ptr());
    out.ptr()->backward_fn = [ps](TensorImpl& self) {
      const float* g = self.grad.data();
      std::size_t off2 = 0;
      for (const auto& p : ps) {
        const std::size_t n = p->values.size();
        if (float* gp = grad_of(p)) {
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[off2 + i];
        }
        off2 += n;
      }
    };
  }
  return out;
}

Tensor slice_channel(const Tensor& a, int channel) {
  check_chw(a, "slice_channel");
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  if (channel < 0 || channel >= c) {
    throw ShapeError("slice_channel: channel " + std::to_string(channel) +
                     " out of range for " + shape_str(a.shape()));
  }
  const int plane = h * w;
  Tensor out = make_node({1, h, w}, {a}, "slice_channel");
  const float* av = a.values().data() + static_cast<std::size_t>(channel) * plane;
  float* ov = out.values_mut().data();
  std::copy(av, av + plane, ov);
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, channel, plane](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data() + static_cast<std::size_t>(channel) * plane;
      for (int i = 0; i < plane; ++i) ga[i] += g[i];
    };
  }
  return out;
}

Tensor expand_channels(const Tensor& a, int channels) {
  check_chw(a, "expand_channels");
  if (a.shape()[0] != 1) {
    throw ShapeError("expand_channels: expected single-channel input, got " +
                     shape_str(a.shape()));
  }
  const int h = a.shape()[1], w = a.shape()[2];
  const int plane = h * w;
  Tensor out = make_node({channels, h, w}, {a}, "expand_channels");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  for (int k = 0; k < channels; ++k) {
    std::copy(av, av + plane, ov + static_cast<std::size_t>(k) * plane);
  }
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, channels, plane](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data();
      for (int k = 0; k < channels; ++k) {
        const float* gk = g + static_cast<std::size_t>(k) * plane;
        for (int i = 0; i < plane; ++i) ga[i] += gk[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  Tensor out = make_node({1}, {a}, "sum");
  const float* av = a.values().data();
  const int n = a.numel();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += av[i];
  out.values_mut()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float g = self.grad[0];
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g;
    };
  }
  return out;
}

Tensor mean(const Tensor& a) {
  Tensor out = make_node({1}, {a}, "mean");
  const float* av = a.values().data();
  const int n = a.numel();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += av[i];
  out.values_mut()[0] = static_cast<float>(acc / n);
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n](TensorImpl& self) {
      const float g = self.grad[0] / static_cast<float>(n);
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g;
    };
  }
  return out;
}

Tensor l2_norm(const Tensor& a) {
  Tensor out = make_node({1}, {a}, "l2_norm");
  const float* av = a.values().data();
  const int n = a.numel();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += static_cast<double>(av[i]) * av[i];
  const float norm = static_cast<float>(std::sqrt(acc + 1e-12));
  out.values_mut()[0] = norm;
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, n, norm](TensorImpl& self) {
      const float g = self.grad[0] / norm;
      const float* av2 = pa->values.data();
      float* ga = pa->grad.data();
      for (int i = 0; i < n; ++i) ga[i] += g * av2[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  int c, h, w;      // input
  int o, kh, kw;    // weight
  int oh, ow;       // output
  int stride, pad;
};

// Valid output range [lo, hi) such that i_out*stride + k - pad lands
// inside [0, extent).
inline void valid_range(int extent, int out_extent, int stride, int pad, int k,
                        int& lo, int& hi) {
  lo = 0;
  while (lo * stride + k - pad < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride + k - pad >= extent) --hi;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
  check_chw(input, "conv2d(input)");
  if (weight.shape().size() != 4) {
    throw ShapeError("conv2d: weight must be {O,C,kh,kw}, got " +
                     shape_str(weight.shape()));
  }
  ConvGeom g;
  g.c = input.shape()[0];
  g.h = input.shape()[1];
  g.w = input.shape()[2];
  g.o = weight.shape()[0];
  g.kh = weight.shape()[2];
  g.kw = weight.shape()[3];
  g.stride = stride;
  g.pad = pad;
  if (weight.shape()[1] != g.c) {
    throw ShapeError("conv2d: input channels mismatch " +
                     shape_str(input.shape()) + " vs " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != g.o)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(g.o) + " outputs");
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                     " too large for input " + shape_str(input.shape()));
  }

  std::vector<Tensor> parents = {input, weight};
  if (bias.defined()) parents.push_back(bias);
  Tensor out = make_node({g.o, g.oh, g.ow}, parents, "conv2d");

  const float* in = input.values().data();
  const float* wv = weight.values().data();
  float* ov = out.values_mut().data();

  for (int o = 0; o < g.o; ++o) {
    float* out_o = ov + static_cast<std::size_t>(o) * g.oh * g.ow;
    const float b = bias.defined() ? bias.values()[o] : 0.0f;
    std::fill(out_o, out_o + g.oh * g.ow, b);
    for (int c = 0; c < g.c; ++c) {
      const float* in_c = in + static_cast<std::size_t>(c) * g.h * g.w;
      const float* w_oc =
          wv + (static_cast<std::size_t>(o) * g.c + c) * g.kh * g.kw;
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx) {
          const float wgt = w_oc[ky * g.kw + kx];
          int ylo, yhi, xlo, xhi;
          valid_range(g.h, g.oh, stride, pad, ky, ylo, yhi);
          valid_range(g.w, g.ow, stride, pad, kx, xlo, xhi);
          for (int yo = ylo; yo < yhi; ++yo) {
            const float* in_row = in_c + (yo * stride + ky - pad) * g.w;
            float* out_row = out_o + yo * g.ow;
            if (stride == 1) {
              const float* in_shift = in_row + kx - pad;
              for (int xo = xlo; xo < xhi; ++xo) {
                out_row[xo] += wgt * in_shift[xo];
              }
            } else {
              for (int xo = xlo; xo < xhi; ++xo) {
                out_row[xo] += wgt * in_row[xo * stride + kx - pad];
              }
            }
          }
        }
      }
    }
  }

  if (out.requires_grad()) {
    auto pin = input.ptr(), pw = weight.ptr();
    std::shared_ptr<TensorImpl> pb = bias.defined() ? bias.ptr() : std::shared_ptr<TensorImpl>();
    out.ptr()->backward_fn = [pin, pw, pb, g](TensorImpl& self) {
      const float* gout = self.grad.data();
      const float* in2 = pin->values.data();
      const float* wv2 = pw->values.data();
      float* gin = grad_of(pin);
      float* gw = grad_of(pw);
      float* gb = pb ? grad_of(pb) : nullptr;
      for (int o = 0; o < g.o; ++o) {
        const float* gout_o = gout + static_cast<std::size_t>(o) * g.oh * g.ow;
        if (gb) {
          double acc = 0.0;
          for (int i = 0; i < g.oh * g.ow; ++i) acc += gout_o[i];
          gb[o] += static_cast<float>(acc);
        }
        for (int c = 0; c < g.c; ++c) {
          const float* in_c = in2 + static_cast<std::size_t>(c) * g.h * g.w;
          float* gin_c =
              gin ? gin + static_cast<std::size_t>(c) * g.h * g.w : nullptr;
          const std::size_t w_base =
              (static_cast<std::size_t>(o) * g.c + c) * g.kh * g.kw;
          for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
              const float wgt = wv2[w_base + ky * g.kw + kx];
              int ylo, yhi, xlo, xhi;
              valid_range(g.h, g.oh, g.stride, g.pad, ky, ylo, yhi);
              valid_range(g.w, g.ow, g.stride, g.pad, kx, xlo, xhi);
              double wacc = 0.0;
              for (int yo = ylo; yo < yhi; ++yo) {
                const int yi = yo * g.stride + ky - g.pad;
                const float* grow = gout_o + yo * g.ow;
                const float* in_row = in_c + yi * g.w;
                float* gin_row = gin_c ? gin_c + yi * g.w : nullptr;
                if (g.stride == 1) {
                  const float* in_shift = in_row + kx - g.pad;
                  if (gin_row) {
                    float* gin_shift = gin_row + kx - g.pad;
                    for (int xo = xlo; xo < xhi; ++xo) {
                      gin_shift[xo] += wgt * grow[xo];
                    }
                  }
                  if (gw) {
                    for (int xo = xlo; xo < xhi; ++xo) {
                      wacc += static_cast<double>(grow[xo]) * in_shift[xo];
                    }
                  }
                } else {
                  for (int xo = xlo; xo < xhi; ++xo) {
                    const int xi = xo * g.stride + kx - g.pad;
                    if (gin_row) gin_row[xi] += wgt * grow[xo];
                    if (gw) wacc += static_cast<double>(grow[xo]) * in_row[xi];
                  }
                }
              }
              if (gw) gw[w_base + ky * g.kw + kx] += static_cast<float>(wacc);
            }
          }
        }
      }
    };
  }
  return out;
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight,
                        const Tensor& bias, int stride, int pad) {
  check_chw(input, "conv_transpose2d(input)");
  if (weight.shape().size() != 4) {
    throw ShapeError("conv_transpose2d: weight must be {C,O,kh,kw}, got " +
                     shape_str(weight.shape()));
  }
  ConvGeom g;
  g.c = input.shape()[0];
  g.h = input.shape()[1];
  g.w = input.shape()[2];
  g.o = weight.shape()[1];
  g.kh = weight.shape()[2];
  g.kw = weight.shape()[3];
  g.stride = stride;
  g.pad = pad;
  if (weight.shape()[0] != g.c) {
    throw ShapeError("conv_transpose2d: input channels mismatch " +
                     shape_str(input.shape()) + " vs " +
                     shape_str(weight.shape()));
  }
  g.oh = (g.h - 1) * stride - 2 * pad + g.kh;
  g.ow = (g.w - 1) * stride - 2 * pad + g.kw;
  if (g.oh <= 0 || g.ow <= 0) {
    throw ShapeError("conv_transpose2d: degenerate output for input " +
                     shape_str(input.shape()));
  }

  std::vector<Tensor> parents = {input, weight};
  if (bias.defined()) parents.push_back(bias);
  Tensor out = make_node({g.o, g.oh, g.ow}, parents, "conv_transpose2d");

  const float* in = input.values().data();
  const float* wv = weight.values().data();
  float* ov = out.values_mut().data();

  if (bias.defined()) {
    for (int o = 0; o < g.o; ++o) {
      float* out_o = ov + static_cast<std::size_t>(o) * g.oh * g.ow;
      std::fill(out_o, out_o + g.oh * g.ow, bias.values()[o]);
    }
  }

  // Input pixel (yi, xi) scatters to output (yi*s + ky - pad, xi*s + kx - pad).
  for (int c = 0; c < g.c; ++c) {
    const float* in_c = in + static_cast<std::size_t>(c) * g.h * g.w;
    for (int o = 0; o < g.o; ++o) {
      float* out_o = ov + static_cast<std::size_t>(o) * g.oh * g.ow;
      const std::size_t w_base =
          (static_cast<std::size_t>(c) * g.o + o) * g.kh * g.kw;
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx) {
          const float wgt = wv[w_base + ky * g.kw + kx];
          int ylo, yhi, xlo, xhi;
          valid_range(g.oh, g.h, stride, pad, ky, ylo, yhi);
          valid_range(g.ow, g.w, stride, pad, kx, xlo, xhi);
          for (int yi = ylo; yi < yhi; ++yi) {
            const float* in_row = in_c + yi * g.w;
            float* out_row = out_o + (yi * stride + ky - pad) * g.ow;
            for (int xi = xlo; xi < xhi; ++xi) {
              out_row[xi * stride + kx - pad] += wgt * in_row[xi];
            }
          }
        }
      }
    }
  }

  if (out.requires_grad()) {
    auto pin = input.ptr(), pw = weight.ptr();
    std::shared_ptr<TensorImpl> pb = bias.defined() ? bias.ptr() : std::shared_ptr<TensorImpl>();
    out.ptr()->backward_fn = [pin, pw, pb, g](TensorImpl& self) {
      const float* gout = self.grad.data();
      const float* in2 = pin->values.data();
      const float* wv2 = pw->values.data();
      float* gin = grad_of(pin);
      float* gw = grad_of(pw);
      float* gb = pb ? grad_of(pb) : nullptr;
      if (gb) {
        for (int o = 0; o < g.o; ++o) {
          const float* gout_o =
              gout + static_cast<std::size_t>(o) * g.oh * g.ow;
          double acc = 0.0;
          for (int i = 0; i < g.oh * g.ow; ++i) acc += gout_o[i];
          gb[o] += static_cast<float>(acc);
        }
      }
      for (int c = 0; c < g.c; ++c) {
        const float* in_c = in2 + static_cast<std::size_t>(c) * g.h * g.w;
        float* gin_c =
            gin ? gin + static_cast<std::size_t>(c) * g.h * g.w : nullptr;
        for (int o = 0; o < g.o; ++o) {
          const float* gout_o =
              gout + static_cast<std::size_t>(o) * g.oh * g.ow;
          const std::size_t w_base =
              (static_cast<std::size_t>(c) * g.o + o) * g.kh * g.kw;
          for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
              const float wgt = wv2[w_base + ky * g.kw + kx];
              int ylo, yhi, xlo, xhi;
              valid_range(g.oh, g.h, g.stride, g.pad, ky, ylo, yhi);
              valid_range(g.ow, g.w, g.stride, g.pad, kx, xlo, xhi);
              double wacc = 0.0;
              for (int yi = ylo; yi < yhi; ++yi) {
                const float* in_row = in_c + yi * g.w;
                float* gin_row = gin_c ? gin_c + yi * g.w : nullptr;
                const float* grow =
                    gout_o + (yi * g.stride + ky - g.pad) * g.ow;
                for (int xi = xlo; xi < xhi; ++xi) {
                  const float go = grow[xi * g.stride + kx - g.pad];
                  if (gin_row) gin_row[xi] += wgt * go;
                  if (gw) wacc += static_cast<double>(go) * in_row[xi];
                }
              }
              if (gw) gw[w_base + ky * g.kw + kx] += static_cast<float>(wacc);
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

Tensor upsample_nearest2x(const Tensor& a) {
  check_chw(a, "upsample_nearest2x");
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  Tensor out = make_node({c, 2 * h, 2 * w}, {a}, "upsample_nearest2x");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  for (int k = 0; k < c; ++k) {
    const float* in_k = av + static_cast<std::size_t>(k) * h * w;
    float* out_k = ov + static_cast<std::size_t>(k) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      const float* in_row = in_k + (y / 2) * w;
      float* out_row = out_k + y * 2 * w;
      for (int x = 0; x < 2 * w; ++x) out_row[x] = in_row[x / 2];
    }
  }
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, c, h, w](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data();
      for (int k = 0; k < c; ++k) {
        const float* g_k = g + static_cast<std::size_t>(k) * 4 * h * w;
        float* ga_k = ga + static_cast<std::size_t>(k) * h * w;
        for (int y = 0; y < 2 * h; ++y) {
          const float* g_row = g_k + y * 2 * w;
          float* ga_row = ga_k + (y / 2) * w;
          for (int x = 0; x < 2 * w; ++x) ga_row[x / 2] += g_row[x];
        }
      }
    };
  }
  return out;
}

namespace {

struct BilinearTap {
  int x0, x1, y0, y1;
  float fx, fy;
};

inline BilinearTap bilinear_tap(float sx, float sy, int w, int h) {
  BilinearTap t;
  sx = std::min(std::max(sx, 0.0f), static_cast<float>(w - 1));
  sy = std::min(std::max(sy, 0.0f), static_cast<float>(h - 1));
  t.x0 = static_cast<int>(std::floor(sx));
  t.y0 = static_cast<int>(std::floor(sy));
  t.x0 = std::min(t.x0, w - 1);
  t.y0 = std::min(t.y0, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = sx - static_cast<float>(t.x0);
  t.fy = sy - static_cast<float>(t.y0);
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& a, int out_h, int out_w) {
  check_chw(a, "upsample_bilinear");
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  Tensor out = make_node({c, out_h, out_w}, {a}, "upsample_bilinear");
  const float* av = a.values().data();
  float* ov = out.values_mut().data();
  const float sy = static_cast<float>(h) / out_h;
  const float sx = static_cast<float>(w) / out_w;
  for (int yo = 0; yo < out_h; ++yo) {
    for (int xo = 0; xo < out_w; ++xo) {
      const BilinearTap t = bilinear_tap((xo + 0.5f) * sx - 0.5f,
                                         (yo + 0.5f) * sy - 0.5f, w, h);
      for (int k = 0; k < c; ++k) {
        const float* in_k = av + static_cast<std::size_t>(k) * h * w;
        const float top =
            (1 - t.fx) * in_k[t.y0 * w + t.x0] + t.fx * in_k[t.y0 * w + t.x1];
        const float bot =
            (1 - t.fx) * in_k[t.y1 * w + t.x0] + t.fx * in_k[t.y1 * w + t.x1];
        ov[(static_cast<std::size_t>(k) * out_h + yo) * out_w + xo] =
            (1 - t.fy) * top + t.fy * bot;
      }
    }
  }
  if (out.requires_grad()) {
    auto pa = a.ptr();
    out.ptr()->backward_fn = [pa, c, h, w, out_h, out_w, sy,
                              sx](TensorImpl& self) {
      const float* g = self.grad.data();
      float* ga = pa->grad.data();
      for (int yo = 0; yo < out_h; ++yo) {
        for (int xo = 0; xo < out_w; ++xo) {
          const BilinearTap t = bilinear_tap((xo + 0.5f) * sx - 0.5f,
                                             (yo + 0.5f) * sy - 0.5f, w, h);
          for (int k = 0; k < c; ++k) {
            const float gv =
                g[(static_cast<std::size_t>(k) * out_h + yo) * out_w + xo];
            float* ga_k = ga + static_cast<std::size_t>(k) * h * w;
            ga_k[t.y0 * w + t.x0] += gv * (1 - t.fx) * (1 - t.fy);
            ga_k[t.y0 * w + t.x1] += gv * t.fx * (1 - t.fy);
            ga_k[t.y1 * w + t.x0] += gv * (1 - t.fx) * t.fy;
            ga_k[t.y1 * w + t.x1] += gv * t.fx * t.fy;
          }
        }
      }
    };
  }
  return out;
}

Tensor grid_sample(const Tensor& input, const Tensor& coords) {
  check_chw(input, "grid_sample(input)");
  check_chw(coords, "grid_sample(coords)");
  if (coords.shape()[0] != 2) {
    throw ShapeError("grid_sample: coords must be {2,H,W}, got " +
                     shape_str(coords.shape()));
  }
  const int c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int oh = coords.shape()[1], ow = coords.shape()[2];
  const int oplane = oh * ow;
  Tensor out = make_node({c, oh, ow}, {input, coords}, "grid_sample");
  const float* in = input.values().data();
  const float* cv = coords.values().data();
  float* ov = out.values_mut().data();
  for (int p = 0; p < oplane; ++p) {
    const BilinearTap t = bilinear_tap(cv[p], cv[oplane + p], w, h);
    for (int k = 0; k < c; ++k) {
      const float* in_k = in + static_cast<std::size_t>(k) * h * w;
      const float top =
          (1 - t.fx) * in_k[t.y0 * w + t.x0] + t.fx * in_k[t.y0 * w + t.x1];
      const float bot =
          (1 - t.fx) * in_k[t.y1 * w + t.x0] + t.fx * in_k[t.y1 * w + t.x1];
      ov[static_cast<std::size_t>(k) * oplane + p] = (1 - t.fy) * top + t.fy * bot;
    }
  }
  if (out.requires_grad()) {
    auto pin = input.ptr(), pc = coords.ptr();
    out.ptr()->backward_fn = [pin, pc, c, h, w, oplane](TensorImpl& self) {
      const float* g = self.grad.data();
      const float* in2 = pin->values.data();
      const float* cv2 = pc->values.data();
      float* gin = grad_of(pin);
      float* gc = grad_of(pc);
      for (int p = 0; p < oplane; ++p) {
        const float rx = cv2[p];
        const float ry = cv2[oplane + p];
        const BilinearTap t = bilinear_tap(rx, ry, w, h);
        // Clamped coordinates have zero slope outside the open domain.
        const bool x_in = rx > 0.0f && rx < static_cast<float>(w - 1);
        const bool y_in = ry > 0.0f && ry < static_cast<float>(h - 1);
        float dx_acc = 0.0f, dy_acc = 0.0f;
        for (int k = 0; k < c; ++k) {
          const float gv = g[static_cast<std::size_t>(k) * oplane + p];
          if (gv == 0.0f && !gc) continue;
          const float* in_k = in2 + static_cast<std::size_t>(k) * h * w;
          const float v00 = in_k[t.y0 * w + t.x0];
          const float v01 = in_k[t.y0 * w + t.x1];
          const float v10 = in_k[t.y1 * w + t.x0];
          const float v11 = in_k[t.y1 * w + t.x1];
          if (gin) {
            float* gin_k = gin + static_cast<std::size_t>(k) * h * w;
            gin_k[t.y0 * w + t.x0] += gv * (1 - t.fx) * (1 - t.fy);
            gin_k[t.y0 * w + t.x1] += gv * t.fx * (1 - t.fy);
            gin_k[t.y1 * w + t.x0] += gv * (1 - t.fx) * t.fy;
            gin_k[t.y1 * w + t.x1] += gv * t.fx * t.fy;
          }
          if (gc) {
            dx_acc += gv * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            dy_acc += gv * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          }
        }
        if (gc) {
          if (x_in) gc[p] += dx_acc;
          if (y_in) gc[oplane + p] += dy_acc;
        }
      }
    };
  }
  return out;
}

}  // namespace moseg
