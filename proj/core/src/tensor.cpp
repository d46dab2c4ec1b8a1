#include "treemil/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace treemil {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::TensorNode> make_node(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("Tensor: zero-length axis in shape " + shape_str(shape));
        }
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

} // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

detail::TensorNode* Tensor::node() const {
    if (!node_) {
        throw ShapeError("Tensor: use of an undefined tensor");
    }
    return node_.get();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    Tensor t;
    t.node_ = make_node(std::move(shape), std::move(data), requires_grad);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw ShapeError("Tensor::rows: expected rank 2, got shape " + shape_str(shape()));
    }
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw ShapeError("Tensor::cols: expected rank 2, got shape " + shape_str(shape()));
    }
    return shape()[1];
}

std::span<const double> Tensor::grad() const {
    auto* n = node();
    if (n->grad.empty()) {
        throw ShapeError("Tensor::grad: gradient not populated; run backward() first");
    }
    return n->grad;
}

std::span<double> Tensor::grad_mut() {
    auto* n = node();
    if (n->grad.empty()) {
        throw ShapeError("Tensor::grad: gradient not populated; run backward() first");
    }
    return n->grad;
}

void Tensor::zero_grad() {
    auto* n = node();
    std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ShapeError("Tensor::value: expected a scalar, got shape " + shape_str(shape()));
    }
    return node()->data[0];
}

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backward) {
    bool track = g_grad_enabled &&
                 std::any_of(parents.begin(), parents.end(),
                             [](const Tensor& p) { return p.requires_grad(); });
    Tensor out = Tensor::from_data(std::move(shape), std::move(data), track);
    if (track) {
        auto* n = out.node();
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(p.node_);
        n->backward_fn = std::move(backward);
    }
    return out;
}

void Tensor::backward() const {
    auto* loss = node();
    if (loss->numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " +
                         shape_str(loss->shape));
    }
    if (!loss->requires_grad) {
        throw ShapeError("backward: loss is not connected to any trainable tensor");
    }

    // Iterative post-order DFS over requires_grad ancestors.
    std::vector<detail::TensorNode*> topo;
    std::unordered_set<detail::TensorNode*> seen;
    struct Frame {
        detail::TensorNode* n;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss, 0});
    seen.insert(loss);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            detail::TensorNode* p = f.n->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    // Recompute from zero so a repeated backward() yields identical grads.
    for (detail::TensorNode* n : topo) {
        n->grad.assign(n->data.size(), 0.0);
    }
    loss->grad[0] = 1.0;

    // topo is post-order: parents precede children, so walk it backwards.
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (n->backward_fn) {
            n->backward_fn(*n);
        }
    }
}

} // namespace treemil
