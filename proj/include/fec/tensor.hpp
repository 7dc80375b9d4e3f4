#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fec {

using Timestep = int;

/// Latent geometry: channels x height x width, channel-major storage.
struct Shape {
    std::size_t channels = 4;
    std::size_t height = 16;
    std::size_t width = 16;

    std::size_t spatial() const { return height * width; }
    std::size_t size() const { return channels * height * width; }
    friend bool operator==(const Shape&, const Shape&) = default;
    std::string to_string() const;
};

/// The working tensor z_t. Values are 64-bit; down-conversion happens only in the file writers.
class Latent {
public:
    Latent() = default;
    explicit Latent(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
    Latent(Shape shape, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t c, std::size_t h, std::size_t w) { return data_[(c * shape_.height + h) * shape_.width + w]; }
    double at(std::size_t c, std::size_t h, std::size_t w) const { return data_[(c * shape_.height + h) * shape_.width + w]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool all_finite() const;

    Latent& operator+=(const Latent& other);
    Latent& operator-=(const Latent& other);
    Latent& operator*=(double s);

    friend Latent operator+(Latent a, const Latent& b) { return a += b; }
    friend Latent operator-(Latent a, const Latent& b) { return a -= b; }
    friend Latent operator*(Latent a, double s) { return a *= s; }
    friend Latent operator*(double s, Latent a) { return a *= s; }
    friend bool operator==(const Latent&, const Latent&) = default;

private:
    Shape shape_{};
    std::vector<double> data_;
};

void require_same_shape(const Latent& a, const Latent& b, const char* what);

/// Largest absolute element-wise difference; shapes must match.
double max_abs_diff(const Latent& a, const Latent& b);

/// Dense row-major matrix used inside the attention network.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace fec
