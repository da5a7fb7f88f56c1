#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rmarn/num/tensor.hpp"

namespace rmarn::num {

// Dynamic reverse-mode tape. Every operation that sees a grad-requiring input
// while grad mode is on appends a node; backward() walks the DAG once in
// reverse topological order. Tensors are treated as immutable inside a taped
// forward; parameter updates happen between tapes.

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode() { return detail::grad_enabled; }

// RAII guard disabling tape recording (evaluation / finite differences).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // allocated on first contribution
    bool requires_grad = false;
    std::string name;  // nonempty for named leaves (parameters)
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward;

    void accumulate(const TensorT<T>& g) {
        if (grad.empty()) grad = TensorT<T>(value.shape());
        T* dst = grad.data();
        const T* src = g.data();
        for (int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
    }
};

template <typename T>
class VarT {
public:
    VarT() = default;

    static VarT leaf(TensorT<T> value, bool requires_grad = false, std::string name = {}) {
        VarT v;
        v.n_ = std::make_shared<NodeT<T>>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = requires_grad;
        v.n_->name = std::move(name);
        return v;
    }

    static VarT scalar(T x) { return leaf(TensorT<T>::scalar(x)); }

    bool defined() const noexcept { return n_ != nullptr; }
    const TensorT<T>& value() const { return n_->value; }
    // Mutable access for optimizer steps and finite-difference probes only;
    // never call during a taped forward.
    TensorT<T>& value_mut() { return n_->value; }
    TensorT<T>& grad() { return n_->grad; }
    const TensorT<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    const std::string& name() const { return n_->name; }

    std::shared_ptr<NodeT<T>> node() const { return n_; }

    void zero_grad() {
        if (!n_->grad.empty()) n_->grad.fill(T(0));
    }

    // Reverse pass from a scalar root. Seeds d(root)/d(root) = 1.
    void backward() const {
        require(n_ != nullptr, ErrorKind::argument, "backward on undefined variable");
        require(n_->value.numel() == 1, ErrorKind::argument,
                "backward requires a scalar root, got shape " + n_->value.shape_str());
        backward_seeded(TensorT<T>::scalar(T(1)));
    }

    // Reverse pass with an explicit upstream gradient; used when the root is
    // an interior value of a larger computation (the pairwise grid).
    void backward_seeded(const TensorT<T>& seed) const {
        require(n_ != nullptr, ErrorKind::argument, "backward on undefined variable");
        require(seed.same_shape(n_->value), ErrorKind::argument,
                "backward seed shape mismatch");
        std::vector<NodeT<T>*> order;
        topo_sort(order);
        n_->accumulate(seed);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* node = *it;
            if (node->backward && !node->grad.empty()) {
                node->backward(*node);
            }
        }
    }

    // Internal: used by op constructors.
    static VarT make(TensorT<T> value, std::vector<VarT> parents,
                     std::function<void(NodeT<T>&)> backward) {
        bool need = false;
        if (grad_mode()) {
            for (const VarT& p : parents) {
                if (p.defined() && p.requires_grad()) {
                    need = true;
                    break;
                }
            }
        }
        VarT v;
        v.n_ = std::make_shared<NodeT<T>>();
        v.n_->value = std::move(value);
        if (need) {
            v.n_->requires_grad = true;
            v.n_->parents.reserve(parents.size());
            for (VarT& p : parents) v.n_->parents.push_back(p.node());
            v.n_->backward = std::move(backward);
        }
        return v;
    }

private:
    void topo_sort(std::vector<NodeT<T>*>& order) const {
        // Iterative post-order DFS; graphs can be deep for long tapes.
        std::unordered_set<NodeT<T>*> visited;
        std::vector<std::pair<NodeT<T>*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                NodeT<T>* parent = node->parents[idx++].get();
                if (parent->requires_grad && visited.insert(parent).second) {
                    stack.emplace_back(parent, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<NodeT<T>> n_;
};

using VarF = VarT<float>;
using VarD = VarT<double>;

}  // namespace rmarn::num
