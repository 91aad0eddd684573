#include "udhf2/nn.hpp"

#include <cmath>

namespace udhf2 {

ParameterRegistry::ParameterRegistry(std::uint64_t seed, DType dtype) : rng_(seed), dtype_(dtype) {}

Tensor ParameterRegistry::create(const std::string& name, const Shape& shape, Init init, std::int64_t fan_in) {
  if (contains(name)) throw UsageError("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::zeros(shape, dtype_);
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      t.fill(1.0);
      break;
    case Init::kaiming_uniform: {
      if (fan_in <= 0) throw UsageError("kaiming init of '" + name + "' needs a positive fan-in");
      // Kaiming-uniform with a = sqrt(5): bound = 1 / sqrt(fan_in).
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng_));
      break;
    }
  }
  t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back({name, t, true});
  return t;
}

Tensor ParameterRegistry::create_buffer(const std::string& name, const Shape& shape, double value) {
  if (contains(name)) throw UsageError("duplicate buffer name '" + name + "'");
  Tensor t = Tensor::full(shape, value, dtype_);
  index_[name] = entries_.size();
  entries_.push_back({name, t, false});
  return t;
}

bool ParameterRegistry::contains(const std::string& name) const { return index_.count(name) != 0; }

Tensor ParameterRegistry::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("no parameter named '" + name + "'");
  return entries_[it->second].tensor;
}

std::vector<Tensor> ParameterRegistry::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

std::int64_t ParameterRegistry::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

std::map<std::string, std::int64_t> ParameterRegistry::census(int depth) const {
  std::map<std::string, std::int64_t> out;
  for (const auto& e : entries_) {
    if (!e.trainable) continue;
    std::size_t pos = std::string::npos;
    std::size_t from = 0;
    for (int d = 0; d < depth; ++d) {
      pos = e.name.find('.', from);
      if (pos == std::string::npos) break;
      from = pos + 1;
    }
    out[e.name.substr(0, pos)] += e.tensor.numel();
  }
  return out;
}

void ParameterRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Scope Scope::sub(const std::string& name) const { return Scope(*registry_, this->name(name)); }

std::string Scope::name(const std::string& leaf) const { return prefix_.empty() ? leaf : prefix_ + "." + leaf; }

Conv2d::Conv2d(const Scope& scope, std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride_, int padding_,
               bool with_bias, int groups_, Init init)
    : stride(stride_), padding(padding_), groups(groups_) {
  const auto fan_in = (in_ch / groups) * kernel * kernel;
  weight = scope.registry().create(scope.name("weight"), {out_ch, in_ch / groups, kernel, kernel}, init, fan_in);
  if (with_bias) bias = scope.registry().create(scope.name("bias"), {out_ch}, Init::zeros);
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding, groups); }

LayerNorm::LayerNorm(const Scope& scope, std::int64_t channels) {
  gamma = scope.registry().create(scope.name("gamma"), {channels}, Init::ones);
  beta = scope.registry().create(scope.name("beta"), {channels}, Init::zeros);
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, 1, gamma, beta); }

BatchNorm::BatchNorm(const Scope& scope, std::int64_t channels) : registry(&scope.registry()) {
  gamma = scope.registry().create(scope.name("gamma"), {channels}, Init::ones);
  beta = scope.registry().create(scope.name("beta"), {channels}, Init::zeros);
  running_mean = scope.registry().create_buffer(scope.name("running_mean"), {channels}, 0.0);
  running_var = scope.registry().create_buffer(scope.name("running_var"), {channels}, 1.0);
}

Tensor BatchNorm::operator()(const Tensor& x) const {
  Tensor rm = running_mean, rv = running_var;
  return batch_norm(x, gamma, beta, rm, rv, registry->training());
}

Tensor normalize(const Tensor& x, NormKind kind, const Tensor& scale, const Tensor& shift, double eps) {
  if (kind == NormKind::layer) return layer_norm(x, 1, scale, shift, eps);
  Tensor rm = Tensor::zeros({x.dim(1)}, x.dtype());
  Tensor rv = Tensor::full({x.dim(1)}, 1.0, x.dtype());
  return batch_norm(x, scale, shift, rm, rv, true, 0.1, eps);
}

}  // namespace udhf2
