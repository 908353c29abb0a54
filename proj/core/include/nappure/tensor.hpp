#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nappure {

// Shape of a dense image tensor, (channels, height, width), row-major storage.
struct TensorShape {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * height * width;
    }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

    bool operator==(const TensorShape&) const = default;

    void validate() const {
        if (channels <= 0 || height <= 0 || width <= 0)
            throw std::invalid_argument("TensorShape: dimensions must be positive");
    }

    std::string str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" +
               std::to_string(width);
    }
};

// Fixed-length vector of finite doubles. Arithmetic is only defined between
// vectors of equal length.
struct FlatVector {
    std::vector<double> data;

    FlatVector() = default;
    explicit FlatVector(std::size_t n, double fill = 0.0) : data(n, fill) {}
    explicit FlatVector(std::vector<double> d) : data(std::move(d)) {}

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    FlatVector& operator+=(const FlatVector& o) {
        check_same_size(o);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    FlatVector& operator-=(const FlatVector& o) {
        check_same_size(o);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    FlatVector& operator*=(double s) {
        for (double& v : data) v *= s;
        return *this;
    }

    void check_same_size(const FlatVector& o) const {
        if (o.data.size() != data.size())
            throw std::invalid_argument("FlatVector: size mismatch " +
                                        std::to_string(data.size()) + " vs " +
                                        std::to_string(o.data.size()));
    }
};

FlatVector operator+(FlatVector a, const FlatVector& b);
FlatVector operator-(FlatVector a, const FlatVector& b);
FlatVector operator*(double s, FlatVector a);

double dot(const FlatVector& a, const FlatVector& b);
double norm2_squared(const FlatVector& a);
double norm_inf(const FlatVector& a);

// Dense C x H x W image tensor of doubles, nominal value range [0,1].
struct ImageTensor {
    TensorShape shape;
    std::vector<double> data;

    ImageTensor() = default;
    ImageTensor(TensorShape s, double fill = 0.0) : shape(s), data(s.size(), fill) {
        shape.validate();
    }
    ImageTensor(TensorShape s, std::vector<double> d) : shape(s), data(std::move(d)) {
        shape.validate();
        if (data.size() != shape.size())
            throw std::invalid_argument("ImageTensor: payload length " +
                                        std::to_string(data.size()) +
                                        " does not match shape " + shape.str());
    }

    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
    }

    std::size_t size() const { return data.size(); }

    FlatVector flatten() const { return FlatVector(data); }

    bool all_finite() const;
};

ImageTensor from_flat(const TensorShape& shape, const FlatVector& v);

// Elementwise clamp into [lo, hi].
ImageTensor clamp(const ImageTensor& t, double lo, double hi);
void clamp_in_place(ImageTensor& t, double lo, double hi);
void clamp_in_place(FlatVector& v, double lo, double hi);

double max_abs_diff(const ImageTensor& a, const ImageTensor& b);

}  // namespace nappure
