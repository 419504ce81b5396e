#include "weightlab/dtype.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace weightlab {
namespace {

struct FloatFormat {
  int mant_bits;
  int exp_bits;
  int bias;
  int min_exp;  // smallest normal exponent, unbiased
  int max_exp;  // largest normal exponent, unbiased
};

constexpr FloatFormat kF16{10, 5, 15, -14, 15};
constexpr FloatFormat kBF16{7, 8, 127, -126, 127};

std::uint16_t load_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (std::uint16_t(p[1]) << 8));
}

std::uint32_t load_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

std::uint64_t load_u64(const unsigned char* p) {
  return std::uint64_t(load_u32(p)) | (std::uint64_t(load_u32(p + 4)) << 32);
}

void store_u16(unsigned char* p, std::uint16_t v) {
  p[0] = static_cast<unsigned char>(v & 0xff);
  p[1] = static_cast<unsigned char>(v >> 8);
}

void store_u32(unsigned char* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}

void store_u64(unsigned char* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}

double decode_small(std::uint16_t bits, const FloatFormat& f) {
  const int sign = bits >> (f.mant_bits + f.exp_bits);
  const int exp_field = (bits >> f.mant_bits) & ((1 << f.exp_bits) - 1);
  const int mant = bits & ((1 << f.mant_bits) - 1);
  double mag;
  if (exp_field == (1 << f.exp_bits) - 1) {
    mag = mant ? std::numeric_limits<double>::quiet_NaN()
               : std::numeric_limits<double>::infinity();
  } else if (exp_field == 0) {
    mag = std::ldexp(static_cast<double>(mant), f.min_exp - f.mant_bits);
  } else {
    mag = std::ldexp(static_cast<double>(mant + (1 << f.mant_bits)),
                     exp_field - f.bias - f.mant_bits);
  }
  return sign ? -mag : mag;
}

// Direct double -> small-float quantization. Scaling by a power of two is
// exact, so std::rint performs the one and only rounding step (ties to even
// under the default rounding mode). Going through float first would risk
// double rounding near bf16 halfway points.
bool encode_small(double v, const FloatFormat& f, bool saturate, std::uint16_t* out) {
  const int exp_all_ones = (1 << f.exp_bits) - 1;
  const std::uint16_t sign_bit = static_cast<std::uint16_t>(
      (std::signbit(v) ? 1u : 0u) << (f.mant_bits + f.exp_bits));
  if (std::isnan(v)) {
    *out = static_cast<std::uint16_t>((exp_all_ones << f.mant_bits) |
                                      (1 << (f.mant_bits - 1)));
    return true;
  }
  if (std::isinf(v)) {
    *out = static_cast<std::uint16_t>(sign_bit | (exp_all_ones << f.mant_bits));
    return true;
  }
  const double a = std::fabs(v);
  if (a == 0.0) {
    *out = sign_bit;
    return true;
  }
  int e = std::ilogb(a);
  if (e < f.min_exp) {
    // Subnormal range: round onto the grid of the smallest quantum.
    const auto n = static_cast<std::uint32_t>(
        std::rint(std::ldexp(a, f.mant_bits - f.min_exp)));
    if (n < (1u << f.mant_bits)) {
      *out = static_cast<std::uint16_t>(sign_bit | n);
    } else {
      *out = static_cast<std::uint16_t>(sign_bit | (1 << f.mant_bits));  // rounded up to min normal
    }
    return true;
  }
  auto n = static_cast<std::uint32_t>(std::rint(std::ldexp(a, f.mant_bits - e)));
  if (n == (2u << f.mant_bits)) {
    e += 1;
    n = 1u << f.mant_bits;
  }
  if (e > f.max_exp) {
    if (!saturate) return false;
    *out = static_cast<std::uint16_t>(
        sign_bit | ((exp_all_ones - 1) << f.mant_bits) | ((1 << f.mant_bits) - 1));
    return true;
  }
  *out = static_cast<std::uint16_t>(sign_bit | ((e + f.bias) << f.mant_bits) |
                                    (n - (1u << f.mant_bits)));
  return true;
}

}  // namespace

std::string_view dtype_name(DType t) {
  switch (t) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view s) {
  if (s == "F64") return DType::F64;
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  return std::nullopt;
}

double decode_scalar(DType t, const unsigned char* src) {
  switch (t) {
    case DType::F64: {
      const std::uint64_t u = load_u64(src);
      double d;
      std::memcpy(&d, &u, 8);
      return d;
    }
    case DType::F32: {
      const std::uint32_t u = load_u32(src);
      float fl;
      std::memcpy(&fl, &u, 4);
      return static_cast<double>(fl);
    }
    case DType::F16:
      return decode_small(load_u16(src), kF16);
    case DType::BF16:
      return decode_small(load_u16(src), kBF16);
  }
  return 0.0;
}

bool encode_scalar(DType t, double v, unsigned char* dst, bool saturate) {
  switch (t) {
    case DType::F64: {
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      store_u64(dst, u);
      return true;
    }
    case DType::F32: {
      auto fl = static_cast<float>(v);
      if (std::isinf(fl) && std::isfinite(v)) {
        if (!saturate) return false;
        fl = v > 0 ? std::numeric_limits<float>::max()
                   : -std::numeric_limits<float>::max();
      }
      std::uint32_t u;
      std::memcpy(&u, &fl, 4);
      store_u32(dst, u);
      return true;
    }
    case DType::F16: {
      std::uint16_t u;
      if (!encode_small(v, kF16, saturate, &u)) return false;
      store_u16(dst, u);
      return true;
    }
    case DType::BF16: {
      std::uint16_t u;
      if (!encode_small(v, kBF16, saturate, &u)) return false;
      store_u16(dst, u);
      return true;
    }
  }
  return false;
}

void decode_span(DType t, const unsigned char* src, std::size_t count, double* out) {
  const std::size_t w = byte_width(t);
  for (std::size_t i = 0; i < count; ++i) out[i] = decode_scalar(t, src + i * w);
}

}  // namespace weightlab
