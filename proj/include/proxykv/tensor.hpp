// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace proxykv {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);

// One node of the dynamically recorded tape. `backprop` reads this node's
// grad and accumulates into the parents' grads; it is only recorded when at
// least one parent requires gradients.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

// Dense row-major float64 tensor with shared-node value semantics. Copying a
// Tensor aliases the same storage; ops produce fresh nodes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t dim() const;
    int64_t size(int64_t axis) const;
    int64_t numel() const;

    const std::vector<double>& data() const;
    // Direct storage access for leaves (parameter updates, buffers). Must not
    // be called on tensors that participate in a live tape.
    std::vector<double>& raw_data();

    double item() const;
    double at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    const std::vector<double>& grad() const;
    void zero_grad();

    // Reverse-mode sweep from a scalar root; accumulates into every
    // requires_grad node reachable through the tape.
    void backward() const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> node_ptr() const { return node_; }

    static Tensor adopt(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    std::shared_ptr<TensorNode> node_;
};

// Per-(batch, layer, head) nonnegative importance scores over the token axis.
using ScoreTensor = Tensor;

namespace detail {

// Builds an op result node; wires parents and the backward closure only when
// gradients can flow.
Tensor make_result(Shape shape,
                   std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorNode&)> backprop);

}  // namespace detail

}  // namespace proxykv
