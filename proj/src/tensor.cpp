#include "fec/tensor.hpp"

#include <cmath>

namespace fec {

std::string Shape::to_string() const
{
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

Latent::Latent(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data))
{
    if (data_.size() != shape_.size()) {
        throw std::invalid_argument("latent data size " + std::to_string(data_.size()) + " does not match shape " +
                                    shape_.to_string());
    }
}

bool Latent::all_finite() const
{
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

Latent& Latent::operator+=(const Latent& other)
{
    require_same_shape(*this, other, "latent +=");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Latent& Latent::operator-=(const Latent& other)
{
    require_same_shape(*this, other, "latent -=");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= other.data_[i];
    }
    return *this;
}

Latent& Latent::operator*=(double s)
{
    for (double& v : data_) {
        v *= s;
    }
    return *this;
}

void require_same_shape(const Latent& a, const Latent& b, const char* what)
{
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape().to_string() + " vs " +
                                    b.shape().to_string());
    }
}

double max_abs_diff(const Latent& a, const Latent& b)
{
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace fec
