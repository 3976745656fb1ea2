#include "prm/tensor.hpp"

#include <cmath>

#include "prm/errors.hpp"
#include "prm/rng.hpp"

namespace prm {

Tensor2::Tensor2(int r, int c)
    : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {
    if (r < 0 || c < 0) {
        throw ShapeError("negative tensor dimension [" + std::to_string(r) + "x" +
                         std::to_string(c) + "]");
    }
}

Tensor2::Tensor2(int r, int c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
    if (static_cast<std::size_t>(r) * static_cast<std::size_t>(c) != data.size()) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape [" + std::to_string(r) + "x" +
                         std::to_string(c) + "]");
    }
}

bool Tensor2::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor2::shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

void Tensor2::fill(double v) {
    for (double& x : data) {
        x = v;
    }
}

Tensor2 Tensor2::zeros(int r, int c) { return Tensor2(r, c); }

Tensor2 Tensor2::full(int r, int c, double v) {
    Tensor2 t(r, c);
    t.fill(v);
    return t;
}

Tensor2 Tensor2::identity(int n) {
    Tensor2 t(n, n);
    for (int i = 0; i < n; ++i) {
        t.at(i, i) = 1.0;
    }
    return t;
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Tensor2 t(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) {
            throw ShapeError("ragged initializer rows");
        }
        int j = 0;
        for (double v : row) {
            t.at(i, j++) = v;
        }
        ++i;
    }
    return t;
}

Tensor2 Tensor2::glorot_uniform(int r, int c, Rng& rng) {
    Tensor2 t(r, c);
    const double limit = std::sqrt(6.0 / (r + c));
    for (double& v : t.data) {
        v = rng.uniform(-limit, limit);
    }
    return t;
}

Tensor2 Tensor2::randn(int r, int c, Rng& rng, double stddev) {
    Tensor2 t(r, c);
    for (double& v : t.data) {
        v = rng.normal() * stddev;
    }
    return t;
}

void check_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

Tensor2 matmul_value(const Tensor2& a, const Tensor2& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions disagree " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    Tensor2 out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* brow = &b.data[static_cast<std::size_t>(k) * b.cols];
            double* orow = &out.data[static_cast<std::size_t>(i) * out.cols];
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Tensor2 transpose_value(const Tensor2& a) {
    Tensor2 out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

Tensor2 hconcat_value(const std::vector<const Tensor2*>& parts) {
    if (parts.empty()) {
        throw ShapeError("hconcat: no parts");
    }
    const int rows = parts.front()->rows;
    int cols = 0;
    for (const Tensor2* p : parts) {
        if (p->rows != rows) {
            throw ShapeError("hconcat: row mismatch " + parts.front()->shape_str() + " vs " +
                             p->shape_str());
        }
        cols += p->cols;
    }
    Tensor2 out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        int offset = 0;
        for (const Tensor2* p : parts) {
            for (int j = 0; j < p->cols; ++j) {
                out.at(i, offset + j) = p->at(i, j);
            }
            offset += p->cols;
        }
    }
    return out;
}

}  // namespace prm
