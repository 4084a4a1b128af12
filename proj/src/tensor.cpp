#include "longiseg/tensor.hpp"

#include <unordered_set>
#include <utility>

namespace longiseg {

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i)
            out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s)
        n *= d;
    return n;
}

namespace {
thread_local bool g_grad_enabled = true;
bool g_debug_checks = false;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

bool debug_checks() { return g_debug_checks; }
void set_debug_checks(bool on) { g_debug_checks = on; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
    auto n = std::make_shared<Node>();
    const auto count = shape_numel(shape);
    if (count < 0)
        throw ShapeError("negative dimension in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.assign(std::size_t(count), fill);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != std::int64_t(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

template <typename T>
void Tensor<T>::backward() const {
    if (!defined())
        throw UsageError("backward() on an undefined tensor");
    if (node_->value.size() != 1)
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(node_->shape));

    // Iterative post-order DFS; recursion would overflow on deep graphs.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        Node* n = stack.back().first;
        const std::size_t i = stack.back().second;
        if (i < n->parents.size()) {
            stack.back().second = i + 1;
            Node* p = n->parents[i].get();
            if (visited.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_ref()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn)
            (*it)->backward_fn();
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace longiseg
