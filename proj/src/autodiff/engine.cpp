#include "voxelsr/autodiff/engine.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "voxelsr/autodiff/ops.hpp"

namespace voxelsr::ad {

template <typename T>
void GradMap<T>::insert(const Tensor<T>& param, Tensor<T> grad) {
    entries_.insert_or_assign(param.id(), Entry{param, std::move(grad)});
}

template <typename T>
const Tensor<T>& GradMap<T>::at(const Tensor<T>& param) const {
    auto it = entries_.find(param.id());
    if (it == entries_.end()) throw GraphError("no gradient recorded for tensor of shape " + param.shape().str());
    return it->second.grad;
}

namespace {

// Tensors reachable from `root` through requires_grad edges, ordered so every
// tensor precedes the inputs of its producing node.
template <typename T>
std::vector<Tensor<T>> reverse_topological(const Tensor<T>& root) {
    std::vector<Tensor<T>> post;
    std::unordered_set<const void*> seen;
    struct Frame {
        Tensor<T> t;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root.id());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const Node<T>* fn = f.t.grad_fn();
        if (fn && f.next < fn->inputs().size()) {
            const Tensor<T>& in = fn->inputs()[f.next++];
            if (in.requires_grad() && seen.insert(in.id()).second) stack.push_back({in, 0});
            continue;
        }
        post.push_back(f.t);
        stack.pop_back();
    }
    std::reverse(post.begin(), post.end());
    return post;
}

// Gradients of `loss` for every reachable tensor. Interior gradients are
// dropped once consumed unless `keep_interior` is set.
template <typename T>
std::unordered_map<const void*, Tensor<T>> run_backward(const Tensor<T>& loss, bool create_graph, bool keep_interior) {
    if (!loss.defined() || loss.numel() != 1) {
        throw GraphError("backward requires a scalar loss");
    }
    if (!loss.requires_grad()) {
        throw GraphError("backward: loss does not depend on any tensor that requires a gradient");
    }
    GradModeGuard mode(create_graph);
    std::unordered_map<const void*, Tensor<T>> grads;
    grads.emplace(loss.id(), Tensor<T>::ones(loss.shape()));
    for (const auto& t : reverse_topological(loss)) {
        const Node<T>* fn = t.grad_fn();
        if (!fn) continue;
        auto it = grads.find(t.id());
        if (it == grads.end()) continue;
        auto input_grads = fn->backward(it->second);
        if (!keep_interior) grads.erase(it);
        const auto& ins = fn->inputs();
        for (std::size_t i = 0; i < ins.size(); ++i) {
            if (!ins[i].requires_grad() || !input_grads[i].defined()) continue;
            auto [slot, fresh] = grads.try_emplace(ins[i].id(), input_grads[i]);
            if (!fresh) slot->second = add(slot->second, input_grads[i]);
        }
    }
    return grads;
}

}  // namespace

template <typename T>
GradMap<T> backward(const Tensor<T>& loss) {
    auto grads = run_backward(loss, false, false);
    GradMap<T> out;
    for (const auto& t : reverse_topological(loss)) {
        if (!t.is_leaf()) continue;
        auto it = grads.find(t.id());
        if (it != grads.end()) out.insert(t, it->second);
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss, std::span<const Tensor<T>> wrt, bool create_graph,
                            Unreachable policy) {
    if (policy == Unreachable::zero && loss.defined() && loss.numel() == 1 && !loss.requires_grad()) {
        std::vector<Tensor<T>> zeros;
        for (const auto& w : wrt) zeros.push_back(Tensor<T>::zeros(w.shape()));
        return zeros;
    }
    const bool interior = std::any_of(wrt.begin(), wrt.end(), [](const Tensor<T>& t) { return !t.is_leaf(); });
    auto grads = run_backward(loss, create_graph, interior);
    std::vector<Tensor<T>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto it = grads.find(w.id());
        if (it == grads.end() && policy == Unreachable::zero) {
            out.push_back(Tensor<T>::zeros(w.shape()));
            continue;
        }
        if (it == grads.end()) {
            throw GraphError("grad: tensor of shape " + w.shape().str() + " is not reachable from the loss");
        }
        out.push_back(it->second);
    }
    return out;
}

template <typename T>
Tensor<T> grad(const Tensor<T>& loss, const Tensor<T>& wrt, bool create_graph, Unreachable policy) {
    return grad(loss, std::span<const Tensor<T>>(&wrt, 1), create_graph, policy).front();
}

template <typename T>
Tensor<T> finite_difference_gradient(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                                     double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
    NoGradGuard no_grad;
    std::vector<T> probe = x.to_vector();
    std::vector<T> out(probe.size());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const T orig = probe[i];
        probe[i] = static_cast<T>(orig + h);
        const double up = f(Tensor<T>(x.shape(), probe));
        probe[i] = static_cast<T>(orig - h);
        const double down = f(Tensor<T>(x.shape(), probe));
        probe[i] = orig;
        out[i] = static_cast<T>((up - down) / (2.0 * h));
    }
    return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
double relative_error(const Tensor<T>& analytic, const Tensor<T>& reference, double floor) {
    if (!(analytic.shape() == reference.shape())) {
        throw ShapeError("relative_error: " + analytic.shape().str() + " vs " + reference.shape().str());
    }
    auto a = analytic.values();
    auto r = reference.values();
    double scale = floor;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        scale = std::max(scale, std::abs(static_cast<double>(r[i])));
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(r[i])));
    }
    return worst / scale;
}

template class GradMap<float>;
template class GradMap<double>;
template GradMap<float> backward<float>(const Tensor<float>&);
template GradMap<double> backward<double>(const Tensor<double>&);
template std::vector<Tensor<float>> grad<float>(const Tensor<float>&, std::span<const Tensor<float>>, bool, Unreachable);
template std::vector<Tensor<double>> grad<double>(const Tensor<double>&, std::span<const Tensor<double>>, bool, Unreachable);
template Tensor<float> grad<float>(const Tensor<float>&, const Tensor<float>&, bool, Unreachable);
template Tensor<double> grad<double>(const Tensor<double>&, const Tensor<double>&, bool, Unreachable);
template Tensor<float> finite_difference_gradient<float>(const std::function<double(const Tensor<float>&)>&,
                                                         const Tensor<float>&, double);
template Tensor<double> finite_difference_gradient<double>(const std::function<double(const Tensor<double>&)>&,
                                                           const Tensor<double>&, double);
template double relative_error<float>(const Tensor<float>&, const Tensor<float>&, double);
template double relative_error<double>(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace voxelsr::ad
