#include "moseg/param_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "moseg/common.hpp"

namespace moseg {

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'S', 'T', 'A', 'B', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, const float* data, std::size_t n) {
  // Little-endian host; raw write matches the format.
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(data), 4 * n);
}

}  // namespace

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) {
    throw ConfigError("ParamStore: duplicate parameter name '" + name + "'");
  }
  Entry e;
  e.param = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  e.m.assign(e.param.numel(), 0.0f);
  e.v.assign(e.param.numel(), 0.0f);
  index_[name] = entries_.size();
  order_.push_back(name);
  entries_.push_back(std::move(e));
  return entries_.back().param;
}

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape,
                           std::vector<float> values) {
  Tensor& t = create(name, std::move(shape));
  if (static_cast<std::size_t>(t.numel()) != values.size()) {
    throw ShapeError("ParamStore: value count mismatch for '" + name + "'");
  }
  std::copy(values.begin(), values.end(), t.values_mut().begin());
  return t;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  }
  return entries_[it->second].param;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  }
  return entries_[it->second].param;
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::int64_t ParamStore::total_params() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_) n += e.param.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (Entry& e : entries_) e.param.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    const Tensor& src = entries_[i].param;
    Tensor& dst = out.create(order_[i], src.shape());
    std::copy(src.values().begin(), src.values().end(),
              dst.values_mut().begin());
  }
  return out;
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for write");
  os.write(kMagic, 8);
  for (std::size_t i = 0; i < order_.size(); ++i) {
    const std::string& name = order_[i];
    const Tensor& t = entries_[i].param;
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = t.shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (const int d : shape) write_u32(os, static_cast<std::uint32_t>(d));
    write_f32(os, t.values().data(), t.values().size());
  }
  if (!os) throw FormatError("checkpoint: write failed for '" + path + "'");
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic in '" + path + "'");
  }
  ParamStore out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(read_u32(is));
      numel *= static_cast<std::size_t>(shape[d]);
    }
    std::vector<float> values(numel);
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(4 * numel));
    if (!is) throw FormatError("checkpoint: truncated payload in '" + path + "'");
    out.create(name, std::move(shape), std::move(values));
  }
  return out;
}

void adam_step(ParamStore& params, float lr, float beta1, float beta2,
               float eps) {
  for (auto& e : params.entries_) {
    auto vals = e.param.values_mut();
    const auto g = e.param.grad();
    if (g.empty()) continue;
    e.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), e.step);
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), e.step);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      e.m[i] = beta1 * e.m[i] + (1.0f - beta1) * g[i];
      e.v[i] = beta2 * e.v[i] + (1.0f - beta2) * g[i] * g[i];
      const float mhat = static_cast<float>(e.m[i] / bc1);
      const float vhat = static_cast<float>(e.v[i] / bc2);
      vals[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    e.param.zero_grad();
  }
}

}  // namespace moseg
