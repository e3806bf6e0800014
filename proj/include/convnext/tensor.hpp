#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cnx {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

const char* dtype_name(DType d);

// Live/peak byte accounting for every tensor buffer. The efficiency benchmark
// reads the high-water mark from here.
namespace memory {

struct Stats {
    std::size_t live_bytes = 0;
    std::size_t peak_bytes = 0;
};

Stats stats();
void reset_peak();
void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);

}  // namespace memory

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        memory::on_alloc(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        memory::on_free(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

// Dense row-major array. Copies share storage (like a handle); use clone()
// for an independent copy. Images and feature maps are NHWC.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), buf_(std::make_shared<Buffer<T>>(numel_of(shape_), fill)) {}
    Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
        if (values.size() != numel_of(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape_));
        }
        buf_ = std::make_shared<Buffer<T>>(values.begin(), values.end());
    }
    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(T v) { return Tensor(Shape{}, v); }

    bool defined() const { return static_cast<bool>(buf_); }
    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return buf_ ? buf_->size() : 0; }

    T* data() { return buf_->data(); }
    const T* data() const { return buf_->data(); }
    std::span<T> span() { return {buf_->data(), buf_->size()}; }
    std::span<const T> span() const { return {buf_->data(), buf_->size()}; }

    T& operator[](std::size_t i) { return (*buf_)[i]; }
    const T& operator[](std::size_t i) const { return (*buf_)[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return (*buf_)[0];
    }

    Tensor clone() const {
        Tensor out;
        out.shape_ = shape_;
        if (buf_) out.buf_ = std::make_shared<Buffer<T>>(*buf_);
        return out;
    }

    // Same storage, new shape.
    Tensor reshaped(Shape shape) const {
        if (numel_of(shape) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    bool sole_owner() const { return buf_.use_count() == 1; }

    void fill(T v) { std::fill(buf_->begin(), buf_->end(), v); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*buf_)[i]);
        return out;
    }

private:
    Shape shape_;
    std::shared_ptr<Buffer<T>> buf_;
};

// a += b elementwise, same shape.
template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add_inplace shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    T* pa = a.data();
    const T* pb = b.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pa[i] += pb[i];
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
bool all_finite(const Tensor<T>& a);

}  // namespace cnx
