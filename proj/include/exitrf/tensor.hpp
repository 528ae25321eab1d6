#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace exitrf::cvnn {

struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    std::string str() const;
    bool operator==(const Shape4&) const = default;
};

/// Complex activation or feature map held as paired real/imaginary planes,
/// both laid out [batch][channel][row][col].
struct ComplexTensor {
    Shape4 shape;
    std::vector<double> re;
    std::vector<double> im;

    ComplexTensor() = default;
    explicit ComplexTensor(Shape4 s) : shape(s), re(s.size(), 0.0), im(s.size(), 0.0) {}

    std::size_t index(int n, int c, int h, int w) const noexcept {
        return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w;
    }
    /// Offset of the (n, c) plane.
    std::size_t plane_offset(int n, int c) const noexcept {
        return (static_cast<std::size_t>(n) * shape.c + c) * shape.plane();
    }

    /// Copy of samples [first, first + count).
    ComplexTensor slice(int first, int count) const;
    bool all_finite() const noexcept;

    bool operator==(const ComplexTensor&) const = default;
};

/// Stacks single-sample tensors along the batch axis.
ComplexTensor concat_batch(const std::vector<const ComplexTensor*>& parts);

}  // namespace exitrf::cvnn
