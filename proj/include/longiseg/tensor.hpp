#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "longiseg/error.hpp"

namespace longiseg {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Reverse-mode autodiff records a graph while grad mode is on (the default).
/// NoGradGuard turns recording off for the current thread (inference,
/// optimizer updates); guards nest.
bool grad_enabled();

class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool saved_;
};

/// When on, every op scans its forward output for non-finite values and
/// throws NumericError naming the op. Off by default (hot path).
bool debug_checks();
void set_debug_checks(bool on);

/// One graph node: the materialized value plus, when it participates in
/// differentiation, a lazily allocated gradient buffer, parent links, and a
/// closure that pushes this node's gradient into its parents' buffers.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;  // captures raw Node*; parents vector keeps them alive

    std::vector<T>& grad_ref() {
        if (grad.size() != value.size())
            grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Cheap shared handle to a TensorNode. T is float for training/inference
/// and double for verification mode.
template <typename T>
class Tensor {
   public:
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T fill, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return std::int64_t(node_->value.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() { return node_->grad_ref(); }
    const std::vector<T>& grad() const { return const_cast<Node*>(node_.get())->grad_ref(); }
    void zero_grad() {
        if (!node_->grad.empty())
            node_->grad.assign(node_->value.size(), T(0));
    }

    /// Value of a one-element tensor.
    T item() const {
        if (node_->value.size() != 1)
            throw UsageError("item() requires a scalar tensor, got shape " + shape_str(node_->shape));
        return node_->value[0];
    }

    /// Copy of the value as a fresh leaf outside the graph.
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(n);
    }

    /// Reverse pass from a scalar loss: seeds d(loss)/d(loss)=1 and visits the
    /// recorded graph once in reverse topological order.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    Node* raw() const { return node_.get(); }

   private:
    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace longiseg
