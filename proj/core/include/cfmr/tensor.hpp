#pragma once

// Dense n-dimensional tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle: copies share the same underlying buffer. Values
// are immutable after construction except through mutable_values(), which
// exists for the optimizer and checkpoint loader. The grad buffer is the one
// mutable slot used by the reverse pass.
//
// A Tape records the backward closure of every differentiable op executed
// while it is the active tape (activation is RAII: constructing a Tape pushes
// it, destroying pops). Tape::backward(loss) zeroes the gradients of every
// tensor the tape touched, seeds d(loss)/d(loss) = 1 and replays the closures
// in reverse; running it twice therefore yields identical gradients.
//
// Concurrency: a tape and the tensors recorded on it belong to one logical
// thread. Distinct model instances on distinct threads share nothing.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cfmr/common.hpp"

namespace cfmr {

template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.p_ = std::make_shared<Payload>();
        t.p_->shape = std::move(shape);
        t.p_->values.assign(static_cast<size_t>(numel_of(t.p_->shape)), Real(0));
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, Real value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (Real& x : t.p_->values) x = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(values.size())) {
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.p_ = std::make_shared<Payload>();
        t.p_->shape = std::move(shape);
        t.p_->values = std::move(values);
        t.p_->requires_grad = requires_grad;
        return t;
    }

    // Rank-0 scalar.
    static Tensor scalar(Real value, bool requires_grad = false) {
        return from(Shape{}, {value}, requires_grad);
    }

    static Tensor uniform(Shape shape, const Rng& rng, Real lo, Real hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        auto& v = t.p_->values;
        for (size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<Real>(rng.uniform(i, static_cast<double>(lo), static_cast<double>(hi)));
        }
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }

    const Shape& shape() const { return p_->shape; }
    int64_t rank() const { return static_cast<int64_t>(p_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(p_->values.size()); }

    int64_t dim(int64_t i) const {
        const int64_t r = rank();
        if (i < 0) i += r;
        if (i < 0 || i >= r) throw ContractError("dim index out of range");
        return p_->shape[static_cast<size_t>(i)];
    }

    const std::vector<Real>& values() const { return p_->values; }

    // For the optimizer, checkpoint loading and test setup only; everything
    // else treats values as immutable after construction.
    std::vector<Real>& mutable_values() { return p_->values; }

    bool requires_grad() const { return p_ && p_->requires_grad; }
    void set_requires_grad(bool rg) { p_->requires_grad = rg; }

    bool has_grad() const { return p_ && !p_->grad.empty(); }

    const std::vector<Real>& grad() const {
        if (!has_grad()) throw ContractError("gradient not populated");
        return p_->grad;
    }

    // Allocates (zero-filled) on first use.
    std::vector<Real>& grad_buffer() {
        if (p_->grad.empty()) p_->grad.assign(p_->values.size(), Real(0));
        return p_->grad;
    }

    void zero_grad() {
        if (!p_->grad.empty()) p_->grad.assign(p_->values.size(), Real(0));
    }

    void drop_grad() { p_->grad.clear(); }

    Real item() const {
        if (numel() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(p_->shape));
        }
        return p_->values[0];
    }

    // Detached deep copy (fresh buffer, no grad, same requires_grad flag).
    Tensor clone() const {
        Tensor t = from(p_->shape, p_->values, p_->requires_grad);
        return t;
    }

    // Identity used to detect aliasing (two handles to one buffer).
    const void* id() const { return p_.get(); }

private:
    struct Payload {
        Shape shape;
        std::vector<Real> values;
        std::vector<Real> grad;
        bool requires_grad = false;
    };

    std::shared_ptr<Payload> p_;
};

template <class Real>
class Tape {
public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() { current_ = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    // Register a backward closure plus the tensors whose grads it may touch.
    void record(std::function<void()> fn, std::initializer_list<Tensor<Real>> touched) {
        ops_.push_back(std::move(fn));
        for (const auto& t : touched) {
            if (t.defined()) touched_.push_back(t);
        }
    }

    size_t size() const { return ops_.size(); }

    // Pure reverse pass: zero every touched grad, seed the root with 1,
    // replay closures newest-first. Graph construction order is a valid
    // topological order, so reverse construction order is correct.
    void backward(Tensor<Real> root) {
        if (root.numel() != 1) {
            throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape()));
        }
        for (auto& t : touched_) t.zero_grad();
        root.grad_buffer()[0] = Real(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> ops_;
    std::vector<Tensor<Real>> touched_;
    Tape* prev_ = nullptr;
    static inline thread_local Tape* current_ = nullptr;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cfmr
