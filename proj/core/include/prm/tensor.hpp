#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace prm {

class Rng;

/// Dense row-major matrix of 64-bit floats. The only tensor type in the
/// library; row and column vectors are 1xN / Nx1.
struct Tensor2 {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor2() = default;
    Tensor2(int r, int c);
    Tensor2(int r, int c, std::vector<double> values);

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    const double& at(int r, int c) const {
        return data[static_cast<std::size_t>(r) * cols + c];
    }

    int size() const { return rows * cols; }
    bool same_shape(const Tensor2& other) const {
        return rows == other.rows && cols == other.cols;
    }
    bool all_finite() const;
    std::string shape_str() const;  // "[3x4]"

    void fill(double v);

    static Tensor2 zeros(int r, int c);
    static Tensor2 full(int r, int c, double v);
    static Tensor2 identity(int n);
    static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);

    /// Uniform Glorot: limit = sqrt(6 / (fan_in + fan_out)).
    static Tensor2 glorot_uniform(int r, int c, Rng& rng);
    static Tensor2 randn(int r, int c, Rng& rng, double stddev = 1.0);
};

/// Throws ShapeError naming both shapes if a and b differ.
void check_same_shape(const Tensor2& a, const Tensor2& b, const char* op);

Tensor2 matmul_value(const Tensor2& a, const Tensor2& b);
Tensor2 transpose_value(const Tensor2& a);

/// Concatenate along columns; all parts must share the row count.
Tensor2 hconcat_value(const std::vector<const Tensor2*>& parts);

}  // namespace prm
