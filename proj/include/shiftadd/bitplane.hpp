#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "shiftadd/error.hpp"

namespace shiftadd {

/// One packed {-1,+1}^{m x n} binary matrix.
///
/// Bits run along the column (reduction) axis, 8 weights per byte, LSB = lowest column
/// index. A set bit means +1, a clear bit means -1. Each row starts on a byte boundary
/// and the padding bits of the last byte of a row are zero, so byte g of row r is
/// directly the LUT key of column group g.
class BinaryPlane {
 public:
  BinaryPlane() = default;
  BinaryPlane(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), stride_((cols + 7) / 8), bits_(rows * stride_, 0) {}

  /// Adopt packed bytes. Throws Integrity if the length or padding bits are wrong.
  BinaryPlane(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> packed)
      : rows_(rows), cols_(cols), stride_((cols + 7) / 8), bits_(std::move(packed)) {
    if (bits_.size() != rows_ * stride_)
      fail(ErrorKind::Integrity, "bitplane length " + std::to_string(bits_.size()) +
                                     " does not match " + std::to_string(rows_ * stride_));
    if (!padding_clear()) fail(ErrorKind::Integrity, "bitplane padding bits are not zero");
  }

  static BinaryPlane from_signs(std::size_t rows, std::size_t cols, std::span<const std::int8_t> signs) {
    require(signs.size() == rows * cols, "from_signs: size mismatch");
    BinaryPlane p(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.set(r, c, signs[r * cols + c] > 0);
    return p;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t stride() const noexcept { return stride_; }

  bool positive(std::size_t r, std::size_t c) const noexcept {
    return (bits_[r * stride_ + c / 8] >> (c % 8)) & 1u;
  }
  int sign(std::size_t r, std::size_t c) const noexcept { return positive(r, c) ? 1 : -1; }

  void set(std::size_t r, std::size_t c, bool positive) noexcept {
    std::uint8_t& byte = bits_[r * stride_ + c / 8];
    const auto mask = static_cast<std::uint8_t>(1u << (c % 8));
    byte = positive ? static_cast<std::uint8_t>(byte | mask) : static_cast<std::uint8_t>(byte & ~mask);
  }

  std::uint8_t key(std::size_t r, std::size_t group) const noexcept { return bits_[r * stride_ + group]; }

  std::vector<std::int8_t> unpack() const {
    std::vector<std::int8_t> out(rows_ * cols_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) out[r * cols_ + c] = static_cast<std::int8_t>(sign(r, c));
    return out;
  }

  std::span<const std::uint8_t> bytes() const noexcept { return bits_; }
  std::span<std::uint8_t> mutable_bytes() noexcept { return bits_; }

  bool padding_clear() const noexcept {
    const std::size_t tail = cols_ % 8;
    if (tail == 0 || stride_ == 0) return true;
    const auto mask = static_cast<std::uint8_t>(0xFFu << tail);
    for (std::size_t r = 0; r < rows_; ++r)
      if (bits_[r * stride_ + stride_ - 1] & mask) return false;
    return true;
  }

  friend bool operator==(const BinaryPlane&, const BinaryPlane&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t stride_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace shiftadd
