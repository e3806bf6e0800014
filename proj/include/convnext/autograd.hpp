#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "convnext/rng.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Named trainable tensor. grad accumulates additively across backward passes
// until zero_grad() is called.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T(0)); }
    Param deep_copy() const {
        Param p;
        p.name = name;
        p.value = value.clone();
        p.grad = grad.clone();
        return p;
    }
};

template <class T>
class Tape;

// A value flowing through a computation. Without a tape node it is a constant.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> v) : value_(std::move(v)) {}

    const Tensor<T>& value() const { return value_; }
    const Shape& shape() const { return value_.shape(); }
    bool requires_grad() const { return tape_ != nullptr && node_ >= 0; }
    Tape<T>* tape() const { return tape_; }
    int node() const { return node_; }

private:
    friend class Tape<T>;
    Tensor<T> value_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
};

// Backward callbacks receive one of these to deposit parent gradients.
template <class T>
class GradSink {
public:
    GradSink(Tape<T>& tape, const std::vector<int>& parents) : tape_(tape), parents_(parents) {}
    bool wants(std::size_t i) const { return parents_.at(i) >= 0; }
    void add(std::size_t i, Tensor<T> g);

private:
    Tape<T>& tape_;
    const std::vector<int>& parents_;
};

// Define-by-run operation record. Nodes are appended in execution order, so
// parents always precede children; backward walks them once in reverse.
template <class T>
class Tape {
public:
    using GradFn = std::function<void(const Tensor<T>& grad_out, GradSink<T>& sink)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value) {
        check_open();
        Node n;
        n.shape = value.shape();
        return push(std::move(value), std::move(n));
    }

    // Leaf whose gradient is accumulated into p.grad by backward().
    Var<T> param(Param<T>& p) {
        check_open();
        Node n;
        n.shape = p.value.shape();
        n.param = &p;
        return push(p.value, std::move(n));
    }

    // Records an op if any input requires grad; otherwise returns a constant.
    static Var<T> record(Tensor<T> out, std::initializer_list<const Var<T>*> inputs, GradFn fn) {
        return record(std::move(out), std::vector<const Var<T>*>(inputs), std::move(fn));
    }

    static Var<T> record(Tensor<T> out, const std::vector<const Var<T>*>& inputs, GradFn fn) {
        Tape* tape = nullptr;
        for (const Var<T>* v : inputs) {
            if (!v->requires_grad()) continue;
            if (tape && tape != v->tape()) throw TapeError("inputs recorded on different tapes");
            tape = v->tape();
        }
        if (!tape) return Var<T>(std::move(out));
        tape->check_open();
        Node n;
        n.shape = out.shape();
        n.fn = std::move(fn);
        for (const Var<T>* v : inputs) n.parents.push_back(v->requires_grad() ? v->node() : -1);
        return tape->push(std::move(out), std::move(n));
    }

    void backward(const Var<T>& loss) {
        if (consumed_) throw TapeError("backward called twice on the same tape");
        if (loss.value().numel() != 1) {
            throw TapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (loss.tape() != this) throw TapeError("loss was not recorded on this tape");
        consumed_ = true;
        grads_[loss.node()] = Tensor<T>(loss.shape(), T(1));
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!grads_[i].defined()) {
                n.fn = nullptr;
                continue;
            }
            if (n.param) {
                add_inplace(n.param->grad, grads_[i]);
                grads_[i] = Tensor<T>();
            } else if (n.fn) {
                GradSink<T> sink(*this, n.parents);
                n.fn(grads_[i], sink);
                n.fn = nullptr;
                grads_[i] = Tensor<T>();
            }
            // plain leaves keep their gradient for grad()
        }
    }

    // Gradient of a leaf() after backward; zeros if the loss did not reach it.
    Tensor<T> grad(const Var<T>& v) const {
        if (v.tape() != this || v.node() < 0) throw TapeError("grad() of a value not on this tape");
        const auto& g = grads_[v.node()];
        return g.defined() ? g : Tensor<T>(nodes_[v.node()].shape);
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

private:
    friend class GradSink<T>;

    struct Node {
        std::vector<int> parents;
        GradFn fn;
        Param<T>* param = nullptr;
        Shape shape;
    };

    void check_open() const {
        if (consumed_) throw TapeError("recording on a consumed tape");
    }

    Var<T> push(Tensor<T> value, Node n) {
        Var<T> v(std::move(value));
        v.tape_ = this;
        v.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(std::move(n));
        grads_.emplace_back();
        return v;
    }

    void accumulate(int node, Tensor<T> g) {
        if (g.shape() != nodes_[node].shape) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                             shape_str(nodes_[node].shape));
        }
        Tensor<T>& slot = grads_[node];
        if (!slot.defined()) {
            slot = std::move(g);
            return;
        }
        if (!slot.sole_owner()) slot = slot.clone();
        add_inplace(slot, g);
    }

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    bool consumed_ = false;
};

template <class T>
void GradSink<T>::add(std::size_t i, Tensor<T> g) {
    const int p = parents_.at(i);
    if (p >= 0) tape_.accumulate(p, std::move(g));
}

// Lazily binds each Param to a tape leaf at most once per forward pass. With
// no tape, params are used as constants.
template <class T>
class ParamBinder {
public:
    explicit ParamBinder(Tape<T>* tape) : tape_(tape) {}

    Var<T> operator()(Param<T>& p) {
        if (!tape_) return Var<T>(p.value);
        for (auto& [ptr, var] : bound_)
            if (ptr == &p) return var;
        Var<T> v = tape_->param(p);
        bound_.emplace_back(&p, v);
        return v;
    }

    Tape<T>* tape() const { return tape_; }

private:
    Tape<T>* tape_;
    std::vector<std::pair<Param<T>*, Var<T>>> bound_;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

inline std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (max_coords > 0 && max_coords < n) {
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(max_coords);
    }
    return idx;
}

}  // namespace detail

// Compares the tape gradient of scalar f at x against central differences.
// max_coords > 0 checks a seeded random subset of coordinates.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f,
                           const Tensor<T>& x, double eps = 1e-5, std::size_t max_coords = 0,
                           std::uint64_t seed = 0) {
    Tensor<T> analytic;
    {
        Tape<T> tape;
        Var<T> xv = tape.leaf(x.clone());
        Var<T> y = f(tape, xv);
        if (y.value().numel() != 1) throw TapeError("grad_check needs a scalar-valued function");
        if (!std::isfinite(static_cast<double>(y.value().item())))
            throw NonFiniteError("grad_check: non-finite function value at the base point");
        if (y.requires_grad()) {
            tape.backward(y);
            analytic = tape.grad(xv);
        } else {
            analytic = Tensor<T>(x.shape());
        }
    }
    auto eval = [&](const Tensor<T>& xp, std::size_t coord) {
        Tape<T> tape;
        Var<T> y = f(tape, Var<T>(xp));
        const double v = static_cast<double>(y.value().item());
        if (!std::isfinite(v)) {
            throw NonFiniteError("grad_check: non-finite value while perturbing coordinate " +
                                 std::to_string(coord));
        }
        return v;
    };
    GradCheckResult res;
    Tensor<T> xp = x.clone();
    for (std::size_t i : detail::pick_coords(x.numel(), max_coords, seed)) {
        const T orig = xp[i];
        xp[i] = static_cast<T>(orig + eps);
        const double fp = eval(xp, i);
        xp[i] = static_cast<T>(orig - eps);
        const double fm = eval(xp, i);
        xp[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = detail::rel_error(static_cast<double>(analytic[i]), numeric);
        if (!std::isfinite(static_cast<double>(analytic[i]))) {
            throw NonFiniteError("grad_check: non-finite analytic gradient at coordinate " +
                                 std::to_string(i));
        }
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst_index = i;
        }
        ++res.checked;
    }
    return res;
}

// Same check, perturbing the value of a Param that f binds on its tape.
template <class T>
GradCheckResult grad_check_param(const std::function<Var<T>(Tape<T>&)>& f, Param<T>& p,
                                 double eps = 1e-5, std::size_t max_coords = 0,
                                 std::uint64_t seed = 0) {
    const Tensor<T> saved_grad = p.grad.clone();
    p.zero_grad();
    {
        Tape<T> tape;
        Var<T> y = f(tape);
        if (y.value().numel() != 1) throw TapeError("grad_check needs a scalar-valued function");
        if (y.requires_grad()) tape.backward(y);
    }
    const Tensor<T> analytic = p.grad.clone();
    p.grad = saved_grad;
    auto eval = [&](std::size_t coord) {
        Tape<T> tape;
        const double v = static_cast<double>(f(tape).value().item());
        if (!std::isfinite(v)) {
            throw NonFiniteError("grad_check: non-finite value while perturbing " + p.name + "[" +
                                 std::to_string(coord) + "]");
        }
        return v;
    };
    GradCheckResult res;
    for (std::size_t i : detail::pick_coords(p.value.numel(), max_coords, seed)) {
        const T orig = p.value[i];
        p.value[i] = static_cast<T>(orig + eps);
        const double fp = eval(i);
        p.value[i] = static_cast<T>(orig - eps);
        const double fm = eval(i);
        p.value[i] = orig;
        const double err = detail::rel_error(static_cast<double>(analytic[i]), (fp - fm) / (2.0 * eps));
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst_index = i;
        }
        ++res.checked;
    }
    return res;
}

}  // namespace cnx
