#include "shno/kernels.hpp"

// Threads come from the chunk loop below, never from Eigen itself.
#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <vector>

namespace shno::kernels {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rows of c are cut into fixed chunks, each one an Eigen product. The chunk
// size does not depend on the thread count, so neither does the result.
constexpr std::size_t kRowChunk = 128;

}  // namespace

void gemm(std::span<const double> a, bool trans_a, std::span<const double> b, bool trans_b,
          std::span<double> c, std::size_t n, std::size_t k, std::size_t m, bool accumulate) {
  if (n == 0 || m == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(n * m), 0.0);
    return;
  }
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const Eigen::Map<const RowMajor> as(a.data(), trans_a ? ei(k) : ei(n), trans_a ? ei(n) : ei(k));
  const Eigen::Map<const RowMajor> bs(b.data(), trans_b ? ei(m) : ei(k), trans_b ? ei(k) : ei(m));
  const auto chunks = static_cast<std::int64_t>((n + kRowChunk - 1) / kRowChunk);
  const bool par = chunks > 1 && n * k * m > 32768;
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t ch = 0; ch < chunks; ++ch) {
    const auto i0 = ei(static_cast<std::size_t>(ch) * kRowChunk);
    const auto rows = std::min(ei(kRowChunk), ei(n) - i0);
    Eigen::Map<RowMajor> cm(c.data() + i0 * ei(m), rows, ei(m));
    const auto run = [&](const auto& ablk, const auto& bop) {
      if (accumulate)
        cm.noalias() += ablk * bop;
      else
        cm.noalias() = ablk * bop;
    };
    if (trans_a && trans_b)
      run(as.middleCols(i0, rows).transpose(), bs.transpose());
    else if (trans_a)
      run(as.middleCols(i0, rows).transpose(), bs);
    else if (trans_b)
      run(as.middleRows(i0, rows), bs.transpose());
    else
      run(as.middleRows(i0, rows), bs);
  }
}

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m, bool accumulate) {
  gemm(a, false, b, false, c, n, k, m, accumulate);
}

void transpose(std::span<const double> in, std::span<double> out, std::size_t rows,
               std::size_t cols) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile)
    for (std::size_t j0 = 0; j0 < cols; j0 += tile)
      for (std::size_t i = i0; i < std::min(rows, i0 + tile); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + tile); ++j)
          out[j * rows + i] = in[i * cols + j];
}

namespace {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
  return static_cast<std::size_t>(i);
}

inline std::size_t wrap_index(std::ptrdiff_t j, std::size_t n) {
  const auto nn = static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(((j % nn) + nn) % nn);
}

}  // namespace

void box_average(std::span<const double> in, std::span<double> out, std::size_t nlat,
                 std::size_t nlon, std::size_t channels, std::size_t width) {
  const auto half = static_cast<std::ptrdiff_t>(width / 2);
  const double inv = 1.0 / static_cast<double>(width);
  std::vector<double> tmp(nlat * nlon * channels);
  // longitude pass (periodic)
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < nlon; ++j) {
      double* dst = tmp.data() + (i * nlon + j) * channels;
      std::fill(dst, dst + channels, 0.0);
      for (std::ptrdiff_t d = -half; d <= half; ++d) {
        const double* src =
            in.data() + (i * nlon + wrap_index(static_cast<std::ptrdiff_t>(j) + d, nlon)) * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
      }
      for (std::size_t c = 0; c < channels; ++c) dst[c] *= inv;
    }
  }
  // latitude pass (clamped)
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < nlon; ++j) {
      double* dst = out.data() + (i * nlon + j) * channels;
      std::fill(dst, dst + channels, 0.0);
      for (std::ptrdiff_t d = -half; d <= half; ++d) {
        const double* src =
            tmp.data() + (clamp_index(static_cast<std::ptrdiff_t>(i) + d, nlat) * nlon + j) * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
      }
      for (std::size_t c = 0; c < channels; ++c) dst[c] *= inv;
    }
  }
}

void box_average_adjoint(std::span<const double> grad_out, std::span<double> grad_in,
                         std::size_t nlat, std::size_t nlon, std::size_t channels,
                         std::size_t width) {
  const auto half = static_cast<std::ptrdiff_t>(width / 2);
  const double inv = 1.0 / static_cast<double>(width);
  std::vector<double> tmp(nlat * nlon * channels, 0.0);
  // adjoint of the latitude pass: gather form keeps it race free
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::ptrdiff_t>(ii);
    for (std::ptrdiff_t src_row = 0; src_row < static_cast<std::ptrdiff_t>(nlat); ++src_row) {
      // output row src_row reads input row i (count times)
      int count = 0;
      for (std::ptrdiff_t d = -half; d <= half; ++d)
        if (static_cast<std::ptrdiff_t>(clamp_index(src_row + d, nlat)) == i) ++count;
      if (count == 0) continue;
      const double f = inv * count;
      for (std::size_t j = 0; j < nlon; ++j) {
        const double* g = grad_out.data() + (static_cast<std::size_t>(src_row) * nlon + j) * channels;
        double* dst = tmp.data() + (static_cast<std::size_t>(i) * nlon + j) * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += f * g[c];
      }
    }
  }
  // the periodic longitude pass is symmetric
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < nlon; ++j) {
      double* dst = grad_in.data() + (i * nlon + j) * channels;
      for (std::ptrdiff_t d = -half; d <= half; ++d) {
        const double* src =
            tmp.data() + (i * nlon + wrap_index(static_cast<std::ptrdiff_t>(j) + d, nlon)) * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += inv * src[c];
      }
    }
  }
}

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = accumulate ? c[i * m + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * m + j];
      c[i * m + j] = s;
    }
}

void gemm(std::span<const double> a, bool trans_a, std::span<const double> b, bool trans_b,
          std::span<double> c, std::size_t n, std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = accumulate ? c[i * m + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p)
        s += (trans_a ? a[p * n + i] : a[i * k + p]) * (trans_b ? b[j * k + p] : b[p * m + j]);
      c[i * m + j] = s;
    }
}

void box_average(std::span<const double> in, std::span<double> out, std::size_t nlat,
                 std::size_t nlon, std::size_t channels, std::size_t width) {
  const auto half = static_cast<std::ptrdiff_t>(width / 2);
  const double norm = 1.0 / static_cast<double>(width * width);
  for (std::size_t i = 0; i < nlat; ++i)
    for (std::size_t j = 0; j < nlon; ++j)
      for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t di = -half; di <= half; ++di)
          for (std::ptrdiff_t dj = -half; dj <= half; ++dj) {
            const std::size_t ii = clamp_index(static_cast<std::ptrdiff_t>(i) + di, nlat);
            const std::size_t jj = wrap_index(static_cast<std::ptrdiff_t>(j) + dj, nlon);
            s += in[(ii * nlon + jj) * channels + c];
          }
        out[(i * nlon + j) * channels + c] = s * norm;
      }
}

}  // namespace reference

}  // namespace shno::kernels
