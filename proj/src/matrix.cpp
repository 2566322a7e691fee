#include "mmlora/matrix.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mmlora {

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) {
        throw ShapeError("matrix dimensions must be non-negative, got " + std::to_string(rows) +
                         "x" + std::to_string(cols));
    }
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> values) : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != static_cast<std::size_t>(rows) * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::ones(int rows, int cols) {
    Matrix m(rows, cols);
    m.fill(1.0);
    return m;
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) throw ShapeError("from_rows: ragged row lengths");
        int j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

Matrix Matrix::row_vector(std::initializer_list<double> values) {
    Matrix m(1, static_cast<int>(values.size()));
    int j = 0;
    for (double v : values) m(0, j++) = v;
    return m;
}

Matrix Matrix::col_vector(std::initializer_list<double> values) {
    Matrix m(static_cast<int>(values.size()), 1);
    int i = 0;
    for (double v : values) m(i++, 0) = v;
    return m;
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Matrix::bits_equal(const Matrix& o) const {
    if (!same_shape(o)) return false;
    return data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
}

void Matrix::fill(double v) {
    for (double& x : data_) x = v;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

namespace {

template <typename T>
void matmul_impl(const Matrix& a, const Matrix& b, Matrix& out) {
    const int m = a.rows(), n = a.cols(), p = b.cols();
    std::vector<T> acc(static_cast<std::size_t>(p));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < p; ++j) acc[j] = T(0);
        for (int k = 0; k < n; ++k) {
            const T aik = static_cast<T>(a(i, k));
            const double* brow = b.data() + static_cast<std::size_t>(k) * p;
            for (int j = 0; j < p; ++j) acc[j] += aik * static_cast<T>(brow[j]);
        }
        double* orow = out.data() + static_cast<std::size_t>(i) * p;
        for (int j = 0; j < p; ++j) orow[j] = static_cast<double>(acc[j]);
    }
}

template <typename T, typename F>
Matrix elementwise_binary(const Matrix& a, const Matrix& b, F f) {
    Matrix out(a.rows(), a.cols());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        out.values()[i] = static_cast<double>(f(static_cast<T>(a.values()[i]), static_cast<T>(b.values()[i])));
    }
    return out;
}

template <typename T>
void softmax_rows_impl(const Matrix& a, Matrix& out) {
    const int r = a.rows(), c = a.cols();
    for (int i = 0; i < r; ++i) {
        T mx = static_cast<T>(a(i, 0));
        for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<T>(a(i, j)));
        T sum = T(0);
        for (int j = 0; j < c; ++j) {
            const T e = std::exp(static_cast<T>(a(i, j)) - mx);
            out(i, j) = static_cast<double>(e);
            sum += e;
        }
        for (int j = 0; j < c; ++j) out(i, j) = static_cast<double>(static_cast<T>(out(i, j)) / sum);
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, Dtype dt) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() + " * " + b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    if (dt == Dtype::f64) {
        matmul_impl<double>(a, b, out);
    } else {
        matmul_impl<float>(a, b, out);
    }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b, Dtype dt) {
    require_same_shape(a, b, "add");
    if (dt == Dtype::f64) return elementwise_binary<double>(a, b, [](double x, double y) { return x + y; });
    return elementwise_binary<float>(a, b, [](float x, float y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b, Dtype dt) {
    require_same_shape(a, b, "sub");
    if (dt == Dtype::f64) return elementwise_binary<double>(a, b, [](double x, double y) { return x - y; });
    return elementwise_binary<float>(a, b, [](float x, float y) { return x - y; });
}

Matrix elem_mul(const Matrix& a, const Matrix& b, Dtype dt) {
    require_same_shape(a, b, "elem_mul");
    if (dt == Dtype::f64) return elementwise_binary<double>(a, b, [](double x, double y) { return x * y; });
    return elementwise_binary<float>(a, b, [](float x, float y) { return x * y; });
}

Matrix scale(const Matrix& a, double c, Dtype dt) {
    Matrix out(a.rows(), a.cols());
    const std::size_t n = a.size();
    if (dt == Dtype::f64) {
        for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * c;
    } else {
        const float cf = static_cast<float>(c);
        for (std::size_t i = 0; i < n; ++i) {
            out.values()[i] = static_cast<double>(static_cast<float>(a.values()[i]) * cf);
        }
    }
    return out;
}

Matrix relu(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return out;
}

Matrix relu_mask(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] > 0.0 ? 1.0 : 0.0;
    return out;
}

Matrix elem_log(const Matrix& a, Dtype dt) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a.values()[i];
        if (!(v > 0.0)) {
            throw DomainError("log: non-positive entry " + std::to_string(v) + " at flat index " +
                              std::to_string(i));
        }
        out.values()[i] = dt == Dtype::f64 ? std::log(v) : static_cast<double>(std::log(static_cast<float>(v)));
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    }
    return out;
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("concat_cols: row mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix out(a.rows(), a.cols() + b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (int j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

Matrix mean_rows(const Matrix& a, Dtype dt) {
    if (a.rows() < 1) throw ShapeError("mean_rows: needs at least one row, got " + a.shape_str());
    Matrix out(1, a.cols());
    if (dt == Dtype::f64) {
        for (int j = 0; j < a.cols(); ++j) {
            double s = 0.0;
            for (int i = 0; i < a.rows(); ++i) s += a(i, j);
            out(0, j) = s / a.rows();
        }
    } else {
        for (int j = 0; j < a.cols(); ++j) {
            float s = 0.0f;
            for (int i = 0; i < a.rows(); ++i) s += static_cast<float>(a(i, j));
            out(0, j) = static_cast<double>(s / static_cast<float>(a.rows()));
        }
    }
    return out;
}

Matrix reshape(const Matrix& a, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != a.size()) {
        throw ShapeError("reshape: cannot view " + a.shape_str() + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    return Matrix(rows, cols, a.values());
}

Matrix softmax_rows(const Matrix& a, Dtype dt) {
    if (a.cols() < 1) throw ShapeError("softmax: needs at least one column, got " + a.shape_str());
    Matrix out(a.rows(), a.cols());
    if (dt == Dtype::f64) {
        softmax_rows_impl<double>(a, out);
    } else {
        softmax_rows_impl<float>(a, out);
    }
    return out;
}

void accumulate(Matrix& dst, const Matrix& src) {
    if (dst.empty() && dst.rows() == 0) {
        dst = src;
        return;
    }
    require_same_shape(dst, src, "accumulate");
    for (std::size_t i = 0; i < src.size(); ++i) dst.values()[i] += src.values()[i];
}

Matrix take_rows(const Matrix& a, const std::vector<int>& idx) {
    Matrix out(static_cast<int>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = a.data() + static_cast<std::size_t>(idx[i]) * a.cols();
        double* dst = out.data() + i * a.cols();
        std::memcpy(dst, src, sizeof(double) * a.cols());
    }
    return out;
}

int argmax_row(const Matrix& a, int row) {
    int best = 0;
    for (int j = 1; j < a.cols(); ++j) {
        if (a(row, j) > a(row, best)) best = j;
    }
    return best;
}

Matrix round_to_f32(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.values()[i] = static_cast<double>(static_cast<float>(a.values()[i]));
    }
    return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t matrix_hash(const Matrix& a) {
    const std::int64_t shape[2] = {a.rows(), a.cols()};
    std::uint64_t h = fnv1a(shape, sizeof(shape));
    return fnv1a(a.data(), a.size() * sizeof(double), h);
}

}  // namespace mmlora
