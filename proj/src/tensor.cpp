// SPDX-License-Identifier: Apache-2.0
#include "ccm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ccm/error.hpp"

namespace ccm {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0)
            throw ShapeError("negative extent in shape");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
        throw ShapeError("tensor data size does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<int> shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t({1});
    t.data_[0] = value;
    return t;
}

double& Tensor::at(int i, int j) {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
}
double Tensor::at(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
}
double& Tensor::at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double Tensor::at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i)
        os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_)
        s += v;
    return s;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : data_)
        m = std::max(m, std::fabs(v));
    return m;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v))
            return false;
    return true;
}

void Tensor::check_finite(const char* what) const {
    if (!all_finite())
        throw NumericalError(std::string("non-finite values in ") + what);
}

namespace {

constexpr char kMagic[4] = {'C', 'C', 'T', 'N'};
constexpr std::uint16_t kVersion = 1;

void write_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

bool is_little_endian() {
    std::uint16_t x = 1;
    return *reinterpret_cast<unsigned char*>(&x) == 1;
}

} // namespace

void Tensor::save(std::ostream& os) const {
    os.write(kMagic, 4);
    write_u16(os, kVersion);
    write_u16(os, static_cast<std::uint16_t>(shape_.size()));
    for (int d : shape_)
        write_u64(os, static_cast<std::uint64_t>(d));
    if (is_little_endian()) {
        os.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size() * sizeof(double)));
    } else {
        for (double v : data_) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            write_u64(os, bits);
        }
    }
    if (!os)
        throw IoError("failed writing tensor container");
}

Tensor Tensor::load(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad tensor container magic");
    std::uint16_t version = read_u16(is);
    if (version != kVersion)
        throw IoError("unsupported tensor container version");
    std::uint16_t rank = read_u16(is);
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i)
        shape[static_cast<size_t>(i)] = static_cast<int>(read_u64(is));
    std::int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    if (is_little_endian()) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    } else {
        for (auto& v : data) {
            std::uint64_t bits = read_u64(is);
            std::memcpy(&v, &bits, 8);
        }
    }
    if (!is)
        throw IoError("truncated tensor container");
    return Tensor(std::move(shape), std::move(data));
}

void Tensor::save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open for write: " + path);
    save(os);
}

Tensor Tensor::load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open for read: " + path);
    return load(is);
}

} // namespace ccm
