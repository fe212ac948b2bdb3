#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdtaf/tensor.hpp"

namespace mdtaf {

enum class InitKind { kTruncNormal, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::kTruncNormal;
};

// Ordered declaration of every learnable tensor of a model. Declaration order
// is the iteration and serialization order.
class ParamLayout {
 public:
  void add(std::string name, Shape shape, InitKind init);
  // Convenience for the common weight/bias pairs.
  void add_weight_bias(const std::string& prefix, Shape weight_shape, std::int64_t bias_extent);
  void add_norm(const std::string& prefix, std::int64_t channels);

  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::int64_t total_count() const;

 private:
  std::vector<ParamSpec> specs_;
  std::map<std::string, std::size_t> index_;
};

// Named, ordered collection of learnable tensors.
template <typename T>
class ParamStore {
 public:
  void insert(const std::string& name, Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  // Throws ShapeError naming the missing tensor.
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  std::int64_t total_count() const;

  void zero_grad();
  void set_requires_grad(bool on);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Weights ~ N(0, 0.02) truncated at +-2 sigma, biases and position tables 0,
// norm scales and attention temperatures 1. Deterministic in `seed`.
ParamStore<float> init_params(const ParamLayout& layout, std::uint64_t seed);

template <typename To, typename From>
ParamStore<To> cast_store(const ParamStore<From>& src) {
  ParamStore<To> out;
  for (std::size_t i = 0; i < src.size(); ++i) out.insert(src.names()[i], tensor_cast<To>(src.tensors()[i]));
  return out;
}

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace mdtaf
