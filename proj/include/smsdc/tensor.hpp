#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "smsdc/errors.hpp"

namespace smsdc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

/// Debug-mode finiteness checking. On by default in debug builds; tests and
/// callers can toggle it at runtime. When on, every tensor created from data
/// and every op output is scanned for NaN/Inf.
inline std::atomic<bool>& finite_checks_flag() {
#ifdef NDEBUG
    static std::atomic<bool> flag{false};
#else
    static std::atomic<bool> flag{true};
#endif
    return flag;
}

inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }
inline bool finite_checks_enabled() { return finite_checks_flag().load(); }

namespace detail {

/// One primitive application (or leaf) in the computation graph.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::string name;  // parameter path; empty for anonymous nodes
    std::vector<std::shared_ptr<Node>> parents;
    // Propagates this->grad into parents' grad buffers. Null for leaves.
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline void check_finite(const std::vector<double>& v, const char* what) {
    if (!finite_checks_enabled()) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(std::string("non-finite value in ") + what + " at flat index " +
                               std::to_string(i));
        }
    }
}

}  // namespace detail

/// Dense row-major tensor of doubles participating in a dynamically built
/// reverse-mode graph. Copies share the underlying node (handle semantics);
/// ops on tensors record new nodes whose parents keep the graph alive.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        detail::check_finite(data, "tensor data");
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    /// i.i.d. uniform on [lo, hi). Draw order is row-major and fixed.
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> d(shape_numel(shape));
        for (double& x : d) x = dist(rng);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t extent(std::size_t dim) const { return node_->shape.at(dim); }

    const std::vector<double>& value() const { return node_->value; }
    /// Mutable access to raw values. Only sensible on leaves (e.g. finite
    /// difference probes, optimizer updates); downstream nodes are not
    /// recomputed.
    std::vector<double>& mutable_value() { return node_->value; }

    double operator()(std::size_t i) const { return node_->value.at(i); }
    double operator()(std::size_t i, std::size_t j) const {
        return node_->value.at(i * node_->shape.at(1) + j);
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) throw ContractError("tensor has no gradient buffer");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    void set_name(std::string name) { node_->name = std::move(name); }
    const std::string& name() const { return node_->name; }

    /// Identity of the underlying node; two handles alias iff these compare equal.
    const detail::Node* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::Node> node_;

    friend class Graph;
    friend Tensor make_op(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backward_fn);
    friend const std::shared_ptr<detail::Node>& node_of(const Tensor& t);
};

inline const std::shared_ptr<detail::Node>& node_of(const Tensor& t) { return t.node_; }

/// Records one primitive application. requires_grad propagates from parents;
/// the backward_fn is dropped when no parent needs gradients.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward_fn) {
    if (shape_numel(shape) != value.size()) {
        throw ContractError("op produced " + std::to_string(value.size()) +
                            " values for shape " + shape_str(shape));
    }
    detail::check_finite(value, "op output");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) {
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(node_of(p));
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Tensor(std::move(n));
}

/// Topologically ordered record of the primitive applications reaching one
/// output. Acyclic by construction; backward visits each node exactly once.
class Graph {
public:
    static Graph trace(const Tensor& output) {
        Graph g;
        g.root_ = node_of(output);
        // Iterative post-order DFS: parents precede their consumers in order_.
        std::unordered_set<const detail::Node*> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(g.root_.get(), 0);
        visited.insert(g.root_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* p = node->parents[next++].get();
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                g.order_.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }

    std::size_t size() const { return order_.size(); }

    /// Seeds the traced output with gradient 1 and accumulates gradients into
    /// every requires_grad node reachable from it. The output must be scalar.
    void backward() {
        if (!root_ || root_->numel() != 1) {
            throw ContractError("backward requires a scalar seed, got shape " +
                                (root_ ? shape_str(root_->shape) : std::string("<empty>")));
        }
        if (!root_->requires_grad) return;  // nothing to differentiate
        root_->ensure_grad();
        root_->grad[0] += 1.0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* n = *it;
            if (!n->requires_grad || n->grad.empty() || !n->backward_fn) continue;
            for (auto& p : n->parents) {
                if (p->requires_grad) p->ensure_grad();
            }
            n->backward_fn(*n);
        }
    }

private:
    std::vector<detail::Node*> order_;
    std::shared_ptr<detail::Node> root_;  // keeps the traced graph alive
};

/// Convenience: trace from `loss` and run the backward sweep.
inline void backward(const Tensor& loss) { Graph::trace(loss).backward(); }

}  // namespace smsdc
