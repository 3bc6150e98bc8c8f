#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moseg/common.hpp"

namespace moseg {

namespace detail {
struct TensorImpl;
}

// Dense float32 tensor with tape-based reverse-mode autodiff. Value-like
// handle: copying a Tensor shares the underlying node. The tape is rebuilt
// on every forward pass; calling backward() on a scalar fills the grad
// buffers of every reachable tensor that requires grad, accumulating
// additively across uses.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value,
                     bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int numel() const;
  bool requires_grad() const;

  std::span<const float> values() const;
  std::span<float> values_mut();
  std::span<const float> grad() const;  // empty when not tracked
  float item() const;                   // scalar tensors only

  // Copy of the values with gradient tracking severed.
  Tensor detach() const;

  void zero_grad() const;
  void backward() const;  // throws unless this is a tracked scalar

  const std::shared_ptr<detail::TensorImpl>& ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// While alive, newly created ops do not record the tape (outputs are plain
// values). Used for validation, inference and confidence scoring.
class GradGuard {
 public:
  GradGuard();
  ~GradGuard();
  GradGuard(const GradGuard&) = delete;
  GradGuard& operator=(const GradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

std::string shape_str(const std::vector<int>& shape);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Denominator is guarded: a / (b + eps). eps defaults to 1e-8; callers pass
// the loss-specific epsilon where one is defined.
Tensor div(const Tensor& a, const Tensor& b, float eps = 1e-8f);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs_val(const Tensor& a);
// min(a, hi); gradient passes where a < hi.
Tensor clamp_max(const Tensor& a, float hi);

// ---- shape / channel ops (maps are {C,H,W}) ----
Tensor softmax_channels(const Tensor& a);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channel(const Tensor& a, int channel);
Tensor expand_channels(const Tensor& a, int channels);  // {1,H,W} -> {C,H,W}

// ---- reductions (scalar {1} outputs) ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// sqrt(sum(x^2) + 1e-12); the small bias keeps the gradient finite at 0.
Tensor l2_norm(const Tensor& a);

// ---- conv / resampling ----
// input {C,H,W}, weight {O,C,kh,kw}, bias {O} (may be undefined).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);
// input {C,H,W}, weight {C,O,kh,kw}, bias {O}; output (H-1)*stride-2*pad+kh.
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight,
                        const Tensor& bias, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& a);
Tensor upsample_bilinear(const Tensor& a, int out_h, int out_w);
// coords {2,OH,OW}: absolute sample positions (x, y) in input pixel units.
// Bilinear, clamp-to-border; differentiable in both input and coords.
Tensor grid_sample(const Tensor& input, const Tensor& coords);

}  // namespace moseg
