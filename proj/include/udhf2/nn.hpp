#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "udhf2/ops.hpp"
#include "udhf2/tensor.hpp"

namespace udhf2 {

enum class Init { kaiming_uniform, zeros, ones };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Owns every learned tensor of a model under a unique dotted name, in
/// creation order. Initial values are drawn from a seeded generator so a
/// (seed, architecture) pair fully determines the initial weights.
class ParameterRegistry {
 public:
  explicit ParameterRegistry(std::uint64_t seed = 0, DType dtype = default_dtype());

  Tensor create(const std::string& name, const Shape& shape, Init init, std::int64_t fan_in = 0);
  /// Non-trainable state saved with the model (e.g. running statistics).
  Tensor create_buffer(const std::string& name, const Shape& shape, double value);

  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;

  /// Number of trainable scalars.
  std::int64_t parameter_count() const;
  /// Trainable scalar count grouped by the first `depth` dotted name components.
  std::map<std::string, std::int64_t> census(int depth = 1) const;

  DType dtype() const { return dtype_; }
  bool training() const { return training_; }
  void set_training(bool training) { training_ = training; }
  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
  std::map<std::string, std::size_t> index_;
  std::mt19937_64 rng_;
  DType dtype_;
  bool training_ = true;
};

/// Name prefix bound to a registry.
class Scope {
 public:
  Scope(ParameterRegistry& registry, std::string prefix) : registry_(&registry), prefix_(std::move(prefix)) {}

  Scope sub(const std::string& name) const;
  std::string name(const std::string& leaf) const;
  ParameterRegistry& registry() const { return *registry_; }

 private:
  ParameterRegistry* registry_;
  std::string prefix_;
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(const Scope& scope, std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride, int padding,
         bool with_bias = true, int groups = 1, Init init = Init::kaiming_uniform);

  Tensor operator()(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Layer normalization across the channel axis of NCHW input (per pixel).
struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(const Scope& scope, std::int64_t channels);
  Tensor operator()(const Tensor& x) const;

  Tensor gamma;
  Tensor beta;
};

struct BatchNorm {
  BatchNorm() = default;
  BatchNorm(const Scope& scope, std::int64_t channels);
  Tensor operator()(const Tensor& x) const;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  ParameterRegistry* registry = nullptr;
};

enum class NormKind { layer, batch };

/// Functional normalization without running statistics: `layer` normalizes
/// each position across axis 1, `batch` normalizes each axis-1 channel across
/// every other axis using the statistics of the given input.
Tensor normalize(const Tensor& x, NormKind kind, const Tensor& scale, const Tensor& shift, double eps = 1e-5);

}  // namespace udhf2
