#include "mdtaf/param_store.hpp"

#include <random>

namespace mdtaf {

void ParamLayout::add(std::string name, Shape shape, InitKind init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  index_[name] = specs_.size();
  specs_.push_back(ParamSpec{std::move(name), std::move(shape), init});
}

void ParamLayout::add_weight_bias(const std::string& prefix, Shape weight_shape, std::int64_t bias_extent) {
  add(prefix + ".weight", std::move(weight_shape), InitKind::kTruncNormal);
  add(prefix + ".bias", Shape{bias_extent}, InitKind::kZeros);
}

void ParamLayout::add_norm(const std::string& prefix, std::int64_t channels) {
  add(prefix + ".weight", Shape{channels}, InitKind::kOnes);
  add(prefix + ".bias", Shape{channels}, InitKind::kZeros);
}

std::int64_t ParamLayout::total_count() const {
  std::int64_t n = 0;
  for (const auto& s : specs_) n += shape_numel(s.shape);
  return n;
}

template <typename T>
void ParamStore<T>::insert(const std::string& name, Tensor<T> tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  index_[name] = names_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("parameter '" + name + "' not found");
  return tensors_[it->second];
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("parameter '" + name + "' not found");
  return tensors_[it->second];
}

template <typename T>
std::int64_t ParamStore<T>::total_count() const {
  std::int64_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& t : tensors_) t.set_requires_grad(on);
}

ParamStore<float> init_params(const ParamLayout& layout, std::uint64_t seed) {
  constexpr double kStd = 0.02;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kStd);
  ParamStore<float> store;
  for (const auto& spec : layout.specs()) {
    Tensor<float> t(spec.shape);
    auto d = t.mutable_data();
    switch (spec.init) {
      case InitKind::kTruncNormal:
        for (auto& v : d) {
          double s = normal(rng);
          while (std::abs(s) > 2.0 * kStd) s = normal(rng);
          v = static_cast<float>(s);
        }
        break;
      case InitKind::kZeros:
        break;
      case InitKind::kOnes:
        for (auto& v : d) v = 1.0f;
        break;
    }
    store.insert(spec.name, std::move(t));
  }
  return store;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace mdtaf
