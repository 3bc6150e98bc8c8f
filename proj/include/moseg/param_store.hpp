#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "moseg/tensor.hpp"

namespace moseg {

// Ordered collection of trainable tensors plus their Adam state. Iteration
// order is insertion order, which keeps optimizer sweeps and checkpoint
// files deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<int> shape);
  Tensor& create(const std::string& name, std::vector<int> shape,
                 std::vector<float> values);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::int64_t total_params() const;

  void zero_grads();

  // Deep copy of parameter values; optimizer state starts fresh.
  ParamStore clone() const;

  // Checkpoint layout: magic "DYSTAB01", then per parameter in insertion
  // order: u32 LE name length, name bytes, u32 LE rank, u32 LE extents,
  // raw little-endian f32 payload. Round trip is bit-exact.
  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

 private:
  struct Entry {
    Tensor param;
    std::vector<float> m;  // first moment
    std::vector<float> v;  // second moment
    std::int64_t step = 0;
  };

  std::vector<std::string> order_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Entry> entries_;

  friend void adam_step(ParamStore& params, float lr, float beta1, float beta2,
                        float eps);
};

// Bias-corrected Adam update on every parameter with a populated gradient;
// gradients are zeroed afterwards.
void adam_step(ParamStore& params, float lr, float beta1 = 0.9f,
               float beta2 = 0.999f, float eps = 1e-8f);

}  // namespace moseg
