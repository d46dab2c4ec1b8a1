#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "treemil/errors.hpp"

namespace treemil {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

// One vertex of the computation graph. Results of recorded operations keep
// shared ownership of their operands, so a graph stays alive exactly as long
// as some tensor handle into it does. Graphs are single-use per forward pass;
// a new forward pass builds a new graph.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // sized lazily by backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this->grad and accumulates into parents' grad buffers.
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return data.size(); }
};

} // namespace detail

// Value-semantic handle to a graph node. Copies alias the same storage.
//
// backward() semantics: gradients of every node reachable from the loss are
// recomputed from zero on each call, so invoking backward() twice on the same
// graph yields identical gradients (the call is idempotent).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    std::size_t rank() const { return node()->shape.size(); }
    std::size_t numel() const { return node()->data.size(); }

    // Rank-2 convenience accessors.
    std::size_t rows() const;
    std::size_t cols() const;

    bool requires_grad() const { return node()->requires_grad; }

    std::span<const double> data() const { return node()->data; }
    // In-place mutation is intended for leaves (parameters) between forward
    // passes; mutating an interior node of a live graph invalidates it.
    std::span<double> data_mut() { return node()->data; }

    bool has_grad() const { return !node()->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();

    // Scalar read; throws ShapeError unless numel() == 1.
    double value() const;

    // Reverse-mode sweep from a scalar loss. Populates grad for every
    // requires_grad tensor reachable from this node.
    void backward() const;

    detail::TensorNode* node() const;

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

    friend Tensor make_op_result(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorNode&)> backward);

    std::shared_ptr<detail::TensorNode> node_;
};

// Graph recording switch, thread-local. While a guard is alive, operations
// compute values but record no provenance; backward() through such results
// is impossible. Used for inference.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Creates the result node of an operation. When recording is enabled and at
// least one parent requires grad, the parents and backward function are
// attached and the result itself requires grad; otherwise the result is a
// detached constant.
Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backward);

} // namespace treemil
