#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mtpose {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename Real>
class Tensor;

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename Real>
struct Node {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const std::vector<Real>&)> backward_fn;

    std::vector<Real>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
        return grad;
    }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense row-major array with optional gradient tracking.
///
/// A Tensor is a handle: copies share storage and graph position. Use
/// clone() for an independent deep copy.
template <typename Real>
class Tensor {
  public:
    using value_type = Real;
    using NodePtr = std::shared_ptr<detail::Node<Real>>;

    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0)) : node_(std::make_shared<detail::Node<Real>>()) {
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        }
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<Real> data) : node_(std::make_shared<detail::Node<Real>>()) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Real(0)); }
    static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

    template <typename Rng>
    static Tensor uniform(Shape shape, Real lo, Real hi, Rng& rng) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : t.node_->data) v = static_cast<Real>(dist(rng));
        return t;
    }

    template <typename Rng>
    static Tensor normal(Shape shape, Real mean, Real stddev, Rng& rng) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
        for (auto& v : t.node_->data) v = static_cast<Real>(dist(rng));
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    explicit operator bool() const { return defined(); }

    const Shape& shape() const { return node().shape; }
    int rank() const { return static_cast<int>(node().shape.size()); }
    int dim(int i) const {
        const auto& s = node().shape;
        if (i < 0) i += static_cast<int>(s.size());
        return s.at(static_cast<std::size_t>(i));
    }
    std::size_t numel() const { return node().data.size(); }

    std::span<Real> data() { return node_->data; }
    std::span<const Real> data() const { return node().data; }
    const std::vector<Real>& values() const { return node().data; }

    /// Empty span when no gradient has been accumulated.
    std::span<const Real> grad() const { return node().grad; }
    std::span<Real> grad_mut() { return node_->grad_buffer(); }
    bool has_grad() const { return node().grad.size() == node().data.size() && !node().grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    const char* op() const { return node().op; }

    Real item() const {
        if (numel() != 1) {
            throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
        }
        return node().data[0];
    }
    Real operator[](std::size_t i) const { return node().data[i]; }
    Real& operator[](std::size_t i) { return node_->data[i]; }

    Tensor clone() const {
        Tensor t(shape(), node().data);
        t.node_->requires_grad = node().requires_grad;
        return t;
    }
    Tensor detach() const { return Tensor(shape(), node().data); }

    template <typename Other>
    Tensor<Other> cast() const {
        std::vector<Other> out(numel());
        std::transform(node().data.begin(), node().data.end(), out.begin(),
                       [](Real v) { return static_cast<Other>(v); });
        return Tensor<Other>(shape(), std::move(out));
    }

    const NodePtr& node_ptr() const { return node_; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  private:
    const detail::Node<Real>& node() const {
        if (!node_) throw std::logic_error("use of undefined tensor");
        return *node_;
    }

    NodePtr node_;

    template <typename R>
    friend Tensor<R> make_result(const char*, Shape, std::vector<R>, const std::vector<Tensor<R>>&,
                                 std::function<void(const std::vector<R>&)>);
};

/// Builds the output of a differentiable op. `backward` receives the output
/// gradient and accumulates into the inputs it captured; it is dropped when
/// no input requires a gradient or recording is disabled.
template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> data, const std::vector<Tensor<Real>>& inputs,
                         std::function<void(const std::vector<Real>&)> backward) {
    Tensor<Real> out(std::move(shape), std::move(data));
    out.node_->op = op;
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (const auto& in : inputs) {
        if (in.requires_grad()) out.node_->parents.push_back(in.node_ptr());
    }
    out.node_->backward_fn = std::move(backward);
    return out;
}

/// Accumulate `g` into `t`'s gradient when `t` participates in the graph.
template <typename Real>
inline Real* grad_target(const Tensor<Real>& t) {
    return t.requires_grad() ? t.node_ptr()->grad_buffer().data() : nullptr;
}

/// Reverse-mode sweep from a scalar loss. Each reachable node runs its
/// backward closure exactly once, in reverse topological order.
template <typename Real>
void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    using NodeP = detail::Node<Real>*;
    std::vector<NodeP> order;
    std::unordered_set<NodeP> visited;
    std::vector<std::pair<NodeP, std::size_t>> stack;
    stack.emplace_back(loss.node_ptr().get(), 0);
    visited.insert(loss.node_ptr().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeP parent = node->parents[next++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node_ptr()->grad_buffer()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeP node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
    }
}

}  // namespace mtpose
