#ifndef OTFE_MATRIX_HPP
#define OTFE_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "otfe/common.hpp"

namespace otfe {

// Dense row-major matrix. T is float (training/eval) or double (gradient
// verification); the two instantiations are the engine's precision modes.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, T fill = T(0))
        : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ShapeError("matrix: negative dimension");
    }

    static Matrix from(std::initializer_list<std::initializer_list<T>> rows) {
        Matrix m(static_cast<int>(rows.size()), rows.size() ? static_cast<int>(rows.begin()->size()) : 0);
        int r = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != m.cols_) throw ShapeError("matrix: ragged initializer");
            int c = 0;
            for (T x : row) m(r, c++) = x;
            ++r;
        }
        return m;
    }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    T& operator()(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
    T operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }
    T* row(int r) { return v_.data() + static_cast<std::size_t>(r) * cols_; }
    const T* row(int r) const { return v_.data() + static_cast<std::size_t>(r) * cols_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (T x : v_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < v_.size(); ++i) out.data()[i] = static_cast<U>(v_[i]);
        return out;
    }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (T& x : v_) x = static_cast<T>(rng.uniform(lo, hi));
    }

    void fill_gaussian(Rng& rng, double sigma) {
        for (T& x : v_) x = static_cast<T>(sigma * rng.gaussian());
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> v_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Active/padding flags for ragged token counts.
class Mask {
public:
    Mask() = default;
    explicit Mask(std::vector<std::uint8_t> flags) : flags_(std::move(flags)) {}

    static Mask all(int n) { return Mask(std::vector<std::uint8_t>(static_cast<std::size_t>(n), 1)); }

    static Mask first(int active, int n) {
        std::vector<std::uint8_t> f(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < active; ++i) f[static_cast<std::size_t>(i)] = 1;
        return Mask(std::move(f));
    }

    int size() const { return static_cast<int>(flags_.size()); }
    bool active(int i) const { return flags_[static_cast<std::size_t>(i)] != 0; }

    int active_count() const {
        int n = 0;
        for (auto f : flags_) n += f ? 1 : 0;
        return n;
    }

    void require_nonempty(const char* where) const {
        if (active_count() == 0) throw ShapeError(std::string(where) + ": mask has no active positions");
    }

    std::vector<std::uint8_t>& flags() { return flags_; }
    const std::vector<std::uint8_t>& flags() const { return flags_; }

private:
    std::vector<std::uint8_t> flags_;
};

}  // namespace otfe

#endif
