#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "voxelsr/autodiff/tensor.hpp"

namespace voxelsr::ad {

// Gradients keyed by tensor identity.
template <typename T>
class GradMap {
public:
    void insert(const Tensor<T>& param, Tensor<T> grad);
    [[nodiscard]] bool contains(const Tensor<T>& param) const { return entries_.count(param.id()) > 0; }
    // Throws GraphError when `param` has no gradient.
    [[nodiscard]] const Tensor<T>& at(const Tensor<T>& param) const;
    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

private:
    struct Entry {
        Tensor<T> param;
        Tensor<T> grad;
    };
    std::unordered_map<const void*, Entry> entries_;
};

// Gradients of a scalar loss for every requires_grad leaf reachable from it.
// Each node is visited once, in reverse topological order.
template <typename T>
GradMap<T> backward(const Tensor<T>& loss);

// What grad() does for a wrt tensor the loss does not depend on.
enum class Unreachable { error, zero };

// d loss / d wrt for each entry of `wrt` (leaf or interior). With
// create_graph the backward pass is recorded, so the returned gradients can
// themselves be differentiated. Unreachable wrt throw GraphError, or get a
// constant zero gradient under Unreachable::zero.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss, std::span<const Tensor<T>> wrt, bool create_graph = false,
                            Unreachable policy = Unreachable::error);

template <typename T>
Tensor<T> grad(const Tensor<T>& loss, const Tensor<T>& wrt, bool create_graph = false,
               Unreachable policy = Unreachable::error);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                                     double h);

// max_i |a_i - b_i| / max(max_i |b_i|, floor): elementwise error measured
// against the scale of the reference gradient.
template <typename T>
double relative_error(const Tensor<T>& analytic, const Tensor<T>& reference, double floor = 1e-12);

}  // namespace voxelsr::ad
