// Dense row-major matrix storage and the arithmetic kernels shared by the
// autodiff engine and the inference paths. Values are held as f64; kernels
// can run their arithmetic in f32 (Dtype::f32) for the reduced-precision
// mode, storing the exactly-widened results.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmlora {

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "f32"; }

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

class Matrix {
  public:
    Matrix() = default;
    Matrix(int rows, int cols);  // zero-filled
    Matrix(int rows, int cols, std::vector<double> values);

    static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
    static Matrix ones(int rows, int cols);
    static Matrix identity(int n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix row_vector(std::initializer_list<double> values);
    static Matrix col_vector(std::initializer_list<double> values);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const;
    bool all_finite() const;
    // Bitwise comparison, used by the freeze/zero-delta contracts.
    bool bits_equal(const Matrix& o) const;

    void fill(double v);

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Throws ShapeError naming both shapes when the check fails.
void require_same_shape(const Matrix& a, const Matrix& b, const char* op);

// ---- kernels -------------------------------------------------------------
// `dt` selects the arithmetic precision; data movement ops take no dtype.

Matrix matmul(const Matrix& a, const Matrix& b, Dtype dt = Dtype::f64);
Matrix add(const Matrix& a, const Matrix& b, Dtype dt = Dtype::f64);
Matrix sub(const Matrix& a, const Matrix& b, Dtype dt = Dtype::f64);
Matrix scale(const Matrix& a, double c, Dtype dt = Dtype::f64);
Matrix relu(const Matrix& a);
Matrix relu_mask(const Matrix& a);  // 1 where a > 0, else 0 (subgradient 0 at 0)
Matrix elem_log(const Matrix& a, Dtype dt = Dtype::f64);
Matrix elem_mul(const Matrix& a, const Matrix& b, Dtype dt = Dtype::f64);
Matrix transpose(const Matrix& a);
Matrix concat_cols(const Matrix& a, const Matrix& b);
Matrix mean_rows(const Matrix& a, Dtype dt = Dtype::f64);
Matrix reshape(const Matrix& a, int rows, int cols);
// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& a, Dtype dt = Dtype::f64);

// dst += src (allocates dst to src's shape when empty)
void accumulate(Matrix& dst, const Matrix& src);

Matrix take_rows(const Matrix& a, const std::vector<int>& idx);
int argmax_row(const Matrix& a, int row);  // ties resolve to the lowest index

// Round every entry to the nearest f32 value (exact widening back to f64).
Matrix round_to_f32(const Matrix& a);

// FNV-1a over shape and payload bytes; checkpoint checksums and freeze hashes.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t matrix_hash(const Matrix& a);

}  // namespace mmlora
