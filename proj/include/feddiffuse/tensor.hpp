#pragma once

#include <cmath>
#include <cstddef>
#include <new>
#include <stdexcept>
#include <vector>

namespace feddiffuse {

// 64-byte-aligned storage for numeric buffers.  Vectorized expression
// evaluation splits scalar/packet work based on the buffer's address, so a
// fixed alignment is required for results to be reproducible across
// allocations.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t{alignment});
    }

    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
    friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense NCHW tensor. Value-semantic; all layer code indexes it directly.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    AlignedVector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T{0}) {}

    std::size_t size() const { return v.size(); }
    std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
    std::size_t image_size() const { return static_cast<std::size_t>(c) * h * w; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T* image(int i) { return v.data() + static_cast<std::size_t>(i) * image_size(); }
    const T* image(int i) const { return v.data() + static_cast<std::size_t>(i) * image_size(); }

    T* plane(int i, int ch) { return image(i) + static_cast<std::size_t>(ch) * plane_size(); }
    const T* plane(int i, int ch) const { return image(i) + static_cast<std::size_t>(ch) * plane_size(); }

    T& at(int i, int ch, int y, int x) { return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
    const T& at(int i, int ch, int y, int x) const {
        return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
    }

    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
};

// Pixel batches handed between modules are double precision in [-1, 1].
using ImageBatch = Tensor<double>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
    Tensor<To> out(src.n, src.c, src.h, src.w);
    for (std::size_t i = 0; i < src.v.size(); ++i) out.v[i] = static_cast<To>(src.v[i]);
    return out;
}

inline void require_same_shape(const ImageBatch& a, const ImageBatch& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": tensor shapes differ");
}

}  // namespace feddiffuse
