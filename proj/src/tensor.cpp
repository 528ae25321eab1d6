#include "exitrf/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace exitrf::cvnn {

std::string Shape4::str() const {
    return "[" + std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) + "]";
}

ComplexTensor ComplexTensor::slice(int first, int count) const {
    if (first < 0 || count < 0 || first + count > shape.n) throw std::out_of_range("ComplexTensor::slice");
    Shape4 s = shape;
    s.n = count;
    ComplexTensor out(s);
    const std::size_t per = static_cast<std::size_t>(shape.c) * shape.plane();
    std::copy_n(re.begin() + static_cast<std::ptrdiff_t>(first * per), count * per, out.re.begin());
    std::copy_n(im.begin() + static_cast<std::ptrdiff_t>(first * per), count * per, out.im.begin());
    return out;
}

bool ComplexTensor::all_finite() const noexcept {
    auto fin = [](double v) { return std::isfinite(v); };
    return std::all_of(re.begin(), re.end(), fin) && std::all_of(im.begin(), im.end(), fin);
}

ComplexTensor concat_batch(const std::vector<const ComplexTensor*>& parts) {
    if (parts.empty()) return {};
    Shape4 s = parts.front()->shape;
    s.n = 0;
    for (const auto* p : parts) {
        if (p->shape.c != s.c || p->shape.h != s.h || p->shape.w != s.w) {
            throw std::invalid_argument("concat_batch: shape mismatch " + p->shape.str());
        }
        s.n += p->shape.n;
    }
    ComplexTensor out(s);
    std::size_t off = 0;
    for (const auto* p : parts) {
        std::copy(p->re.begin(), p->re.end(), out.re.begin() + static_cast<std::ptrdiff_t>(off));
        std::copy(p->im.begin(), p->im.end(), out.im.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->re.size();
    }
    return out;
}

}  // namespace exitrf::cvnn
