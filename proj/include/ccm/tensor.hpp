// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ccm {

// Dense row-major tensor of 64-bit floats. Values are expected to stay
// finite; ops that can produce NaN/Inf call check_finite on their result.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Indexed access for ranks 2..4; row-major.
    double& at(int i, int j);
    double at(int i, int j) const;
    double& at(int i, int j, int k);
    double at(int i, int j, int k) const;
    double& at(int i, int j, int k, int l);
    double at(int i, int j, int k, int l) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    double sum() const;
    double abs_max() const;
    bool all_finite() const;
    // Throws NumericalError naming `what` if any element is NaN/Inf.
    void check_finite(const char* what) const;

    // Binary tensor container: magic "CCTN", version u16, rank u16,
    // extents u64[rank], little-endian f64 payload.
    void save(std::ostream& os) const;
    static Tensor load(std::istream& is);
    void save_file(const std::string& path) const;
    static Tensor load_file(const std::string& path);

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

} // namespace ccm
