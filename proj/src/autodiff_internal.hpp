#pragma once

// Shared plumbing for translation units that define autodiff ops: node
// allocation, graph wiring, and the debug finiteness scan. Not installed;
// include from src/ only.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "longiseg/error.hpp"
#include "longiseg/tensor.hpp"

namespace longiseg::detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
NodePtr<T> new_node(Shape shape) {
    auto n = std::make_shared<TensorNode<T>>();
    const auto count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(std::size_t(count), T(0));
    return n;
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (const T x : v)
        if (!std::isfinite(double(x)))
            throw NumericError(std::string(op) + " produced a non-finite value");
}

/// Wires the node into the graph when recording applies, runs the optional
/// debug finiteness scan, and wraps the node in a Tensor.
template <typename T>
Tensor<T> attach(const char* op, NodePtr<T> out, std::vector<NodePtr<T>> parents,
                 std::function<void()> backward_fn) {
    if (debug_checks())
        check_finite(op, out->value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents)
            any = any || p->requires_grad;
        if (any) {
            out->requires_grad = true;
            out->parents = std::move(parents);
            out->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor<T>(std::move(out));
}

}  // namespace longiseg::detail
