// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#include "proxykv/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "proxykv/common.hpp"

namespace proxykv {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += ",";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

static void validate_shape(const Shape& shape) {
    for (int64_t e : shape) {
        PKV_CHECK_SHAPE(e > 0, "tensor extents must be positive, got ", shape_str(shape));
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->value.assign(static_cast<size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    PKV_CHECK_SHAPE(static_cast<int64_t>(data.size()) == shape_numel(shape),
                    "data length ", data.size(), " does not match shape ", shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    PKV_CHECK_VALUE(node_, "shape() on undefined tensor");
    return node_->shape;
}

int64_t Tensor::dim() const {
    return static_cast<int64_t>(shape().size());
}

int64_t Tensor::size(int64_t axis) const {
    const Shape& s = shape();
    if (axis < 0) {
        axis += static_cast<int64_t>(s.size());
    }
    PKV_CHECK_SHAPE(axis >= 0 && axis < static_cast<int64_t>(s.size()),
                    "axis ", axis, " out of range for shape ", shape_str(s));
    return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const {
    PKV_CHECK_VALUE(node_, "numel() on undefined tensor");
    return node_->numel();
}

const std::vector<double>& Tensor::data() const {
    PKV_CHECK_VALUE(node_, "data() on undefined tensor");
    return node_->value;
}

std::vector<double>& Tensor::raw_data() {
    PKV_CHECK_VALUE(node_, "raw_data() on undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    PKV_CHECK_SHAPE(numel() == 1, "item() needs a scalar, got shape ", shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    const Shape& s = shape();
    PKV_CHECK_SHAPE(index.size() == s.size(), "index rank ", index.size(),
                    " does not match tensor rank ", s.size());
    const auto strides = row_major_strides(s);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : index) {
        PKV_CHECK_SHAPE(i >= 0 && i < s[d], "index ", i, " out of range at axis ", d,
                        " for shape ", shape_str(s));
        off += i * strides[d];
        ++d;
    }
    return node_->value[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const {
    return node_ && node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
    PKV_CHECK_VALUE(node_, "set_requires_grad() on undefined tensor");
    PKV_CHECK_VALUE(node_->parents.empty(), "requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
    if (!flag) {
        node_->grad.clear();
    }
}

const std::vector<double>& Tensor::grad() const {
    PKV_CHECK_VALUE(node_, "grad() on undefined tensor");
    PKV_CHECK_VALUE(node_->requires_grad, "grad() on tensor without requires_grad");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    PKV_CHECK_VALUE(node_, "zero_grad() on undefined tensor");
    if (!node_->grad.empty()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

void Tensor::backward() const {
    PKV_CHECK_VALUE(node_, "backward() on undefined tensor");
    PKV_CHECK_SHAPE(node_->numel() == 1, "backward() needs a scalar root, got shape ",
                    shape_str(node_->shape));
    PKV_CHECK_VALUE(node_->requires_grad, "backward() on a graph with no gradient-requiring leaves");

    // Iterative post-order DFS over gradient-requiring nodes.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.next_parent < top.node->parents.size()) {
            TensorNode* parent = top.node->parents[top.next_parent++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.push_back({parent, 0});
            }
        } else {
            order.push_back(top.node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order) {
        n->ensure_grad();
    }
    node_->grad[0] += 1.0;

    // `order` is post-order, so walking it backwards visits every node before
    // any of its parents.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) {
            n->backprop(*n);
        }
    }
}

namespace detail {

Tensor make_result(Shape shape,
                   std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorNode&)> backprop) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs_grad = false;
    for (const Tensor& t : inputs) {
        needs_grad = needs_grad || t.requires_grad();
    }
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            node->parents.push_back(t.node_ptr());
        }
        node->backprop = std::move(backprop);
    }
    return Tensor::adopt(std::move(node));
}

}  // namespace detail

}  // namespace proxykv
