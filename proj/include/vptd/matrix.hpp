#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "vptd/binary_io.hpp"
#include "vptd/error.hpp"

namespace vptd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace io {

/// Writes `rows x cols` as f32 row-major (no header).
inline void write_f32_payload(ByteWriter& w, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(static_cast<float>(m(r, c)));
  }
}

/// Reads an f32 row-major payload, rejecting NaN/Inf with the offending cell.
inline Matrix read_f32_payload(ByteReader& r, std::uint32_t rows, std::uint32_t cols) {
  r.require(static_cast<std::size_t>(rows) * cols * 4);
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      const float v = r.f32();
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::NonFiniteValue,
                    "row " + std::to_string(i) + ", col " + std::to_string(j));
      }
      m(i, j) = v;
    }
  }
  return m;
}

/// Header layout shared by CGCB and CGCH: magic, u32 rows, u32 cols, f32 payload.
inline std::string encode_plain_matrix(std::string_view magic, const Matrix& m) {
  ByteWriter w;
  w.magic(magic);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  write_f32_payload(w, m);
  return w.take();
}

inline Matrix decode_plain_matrix(std::string_view magic, std::string_view bytes, const std::string& what) {
  ByteReader r(bytes, what);
  r.expect_magic(magic);
  const auto rows = r.u32();
  const auto cols = r.u32();
  return read_f32_payload(r, rows, cols);
}

}  // namespace io
}  // namespace vptd
