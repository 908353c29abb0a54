#include "nappure/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace nappure {

FlatVector operator+(FlatVector a, const FlatVector& b) {
    a += b;
    return a;
}

FlatVector operator-(FlatVector a, const FlatVector& b) {
    a -= b;
    return a;
}

FlatVector operator*(double s, FlatVector a) {
    a *= s;
    return a;
}

double dot(const FlatVector& a, const FlatVector& b) {
    a.check_same_size(b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2_squared(const FlatVector& a) { return dot(a, a); }

double norm_inf(const FlatVector& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

bool ImageTensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

ImageTensor from_flat(const TensorShape& shape, const FlatVector& v) {
    if (v.size() != shape.size())
        throw std::invalid_argument("from_flat: length " + std::to_string(v.size()) +
                                    " does not match shape " + shape.str());
    return ImageTensor(shape, v.data);
}

ImageTensor clamp(const ImageTensor& t, double lo, double hi) {
    ImageTensor out = t;
    clamp_in_place(out, lo, hi);
    return out;
}

void clamp_in_place(ImageTensor& t, double lo, double hi) {
    for (double& v : t.data) v = std::min(hi, std::max(lo, v));
}

void clamp_in_place(FlatVector& v, double lo, double hi) {
    for (double& x : v.data) x = std::min(hi, std::max(lo, x));
}

double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
    if (!(a.shape == b.shape))
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace nappure
