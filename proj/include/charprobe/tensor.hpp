#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace charprobe {

// Dense row-major float32 tensor. This is the unit of persistence for traces
// and checkpoints, so it stays float regardless of compute precision.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims)
      : shape(std::move(dims)), data(element_count(shape), 0.0f) {}

  static std::size_t element_count(std::span<const std::size_t> dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return shape.empty(); }

  template <typename... Idx>
  float& at(Idx... idx) {
    return data[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  float at(Idx... idx) const {
    return data[offset({static_cast<std::size_t>(idx)...})];
  }

  // Contiguous trailing slice for a fixed prefix of leading indices.
  std::span<const float> slice(std::initializer_list<std::size_t> lead) const {
    std::size_t stride = 1;
    for (std::size_t i = lead.size(); i < shape.size(); ++i) stride *= shape[i];
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto v : lead) off = off * shape[k++] + v;
    return {data.data() + off * stride, stride};
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto v : idx) off = off * shape[k++] + v;
    return off;
  }
};

}  // namespace charprobe
