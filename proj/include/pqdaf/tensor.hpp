#pragma once

#include "pqdaf/error.hpp"
#include "pqdaf/image.hpp"

#include <cstddef>
#include <utility>
#include <vector>

namespace pqdaf {

// Dense channel-major feature map: v[(c * h + y) * w + x]. Plain vectors are
// stored as (c = length, h = w = 1).
template <typename T>
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, T fill = T(0))
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

    T& at(int ci, int yi, int xi) {
        return v[(static_cast<std::size_t>(ci) * h + yi) * w + xi];
    }
    T at(int ci, int yi, int xi) const {
        return v[(static_cast<std::size_t>(ci) * h + yi) * w + xi];
    }

    std::size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    void fill(T value) { std::fill(v.begin(), v.end(), value); }
};

template <typename T>
Tensor<T> from_vector(std::vector<T> values) {
    Tensor<T> t(static_cast<int>(values.size()), 1, 1);
    t.v = std::move(values);
    return t;
}

// Converts a unit-range image into a tensor (and back). Model-facing data
// always uses the [-1, 1] convention.
template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img) {
    if (img.range != PixelRange::Unit)
        throw validation_error("to_tensor expects a unit-range image");
    Tensor<T> t(img.channels, img.height, img.width);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] = static_cast<T>(img.values[i]);
    return t;
}

template <typename T>
ImageBuffer to_image(const Tensor<T>& t) {
    ImageBuffer img(t.w, t.h, t.c, PixelRange::Unit);
    for (std::size_t i = 0; i < t.v.size(); ++i) img.values[i] = static_cast<float>(t.v[i]);
    return img;
}

// Activation tape for backpropagation. Forward passes push what their
// backward pass needs; backward passes pop in exact reverse order. Inference
// runs with a null tape and allocates nothing.
template <typename T>
class Tape {
public:
    void push(Tensor<T> t) { stack_.push_back(std::move(t)); }

    Tensor<T> pop() {
        if (stack_.empty()) throw validation_error("activation tape underflow");
        Tensor<T> t = std::move(stack_.back());
        stack_.pop_back();
        return t;
    }

    bool empty() const { return stack_.empty(); }
    std::size_t depth() const { return stack_.size(); }

private:
    std::vector<Tensor<T>> stack_;
};

} // namespace pqdaf
