#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace weightlab {

// Storage dtypes of the archive format. All arithmetic in the toolkit runs on
// F64 working values; these only describe how bytes on disk are encoded.
enum class DType : std::uint8_t { F64, F32, F16, BF16 };

constexpr std::size_t byte_width(DType t) {
  switch (t) {
    case DType::F64: return 8;
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
  }
  return 0;
}

std::string_view dtype_name(DType t);
std::optional<DType> parse_dtype(std::string_view s);

// Decodes one little-endian element to F64. Widening is exact for every
// value representable in the source dtype.
double decode_scalar(DType t, const unsigned char* src);

// Encodes one F64 value as little-endian bytes, rounding to nearest-even.
// Returns false when a finite value overflows the target's finite range and
// saturate is off; with saturate it clamps to the largest finite magnitude.
bool encode_scalar(DType t, double v, unsigned char* dst, bool saturate);

void decode_span(DType t, const unsigned char* src, std::size_t count, double* out);

}  // namespace weightlab
