#pragma once

#include <cstddef>
#include <span>

// Dense inner loops shared by the transforms, the autodiff engine and the
// model. Every kernel here has an OpenMP version (the default entry points)
// and a plain serial version under `reference` used by the tests and the
// benchmark. Parallel kernels partition output elements across threads and
// never split a reduction, so results do not depend on the thread count.
namespace shno::kernels {

/// c[n,m] = a[n,k] * b[k,m] (or c += a*b when accumulate is set). Row-major.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m, bool accumulate = false);

/// c[n,m] = op(a) * op(b) with op(a) [n,k] and op(b) [k,m]. A transposed
/// operand is stored as its transpose: a as [k,n], b as [m,k].
void gemm(std::span<const double> a, bool trans_a, std::span<const double> b, bool trans_b,
          std::span<double> c, std::size_t n, std::size_t k, std::size_t m, bool accumulate = false);

/// out[cols,rows] = in[rows,cols]^T
void transpose(std::span<const double> in, std::span<double> out, std::size_t rows,
               std::size_t cols);

/// Box average over an s x s neighbourhood of a [nlat, nlon, channels] field.
/// Longitude wraps periodically, latitude indices clamp at the poles.
void box_average(std::span<const double> in, std::span<double> out, std::size_t nlat,
                 std::size_t nlon, std::size_t channels, std::size_t width);

/// Adjoint of box_average: scatters grad_out back onto grad_in (accumulating).
void box_average_adjoint(std::span<const double> grad_out, std::span<double> grad_in,
                         std::size_t nlat, std::size_t nlon, std::size_t channels,
                         std::size_t width);

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m, bool accumulate = false);

void gemm(std::span<const double> a, bool trans_a, std::span<const double> b, bool trans_b,
          std::span<double> c, std::size_t n, std::size_t k, std::size_t m, bool accumulate = false);

void box_average(std::span<const double> in, std::span<double> out, std::size_t nlat,
                 std::size_t nlon, std::size_t channels, std::size_t width);

}  // namespace reference

}  // namespace shno::kernels
