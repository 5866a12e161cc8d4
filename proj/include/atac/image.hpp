#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace atac {

// 8-bit interleaved pixel buffer; channels is 1 (gray) or 3 (rgb).
struct ImageU8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

template <typename T>
struct ImageT {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<T> pixels;  // row-major interleaved, values in [0,1]
};

namespace detail {

// Skips whitespace and '#' comment lines between header fields.
inline std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty())
    throw std::runtime_error("pnm: truncated header in " + path);
  return tok;
}

inline std::size_t pnm_number(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pnm_token(in, path);
  std::size_t v = 0;
  for (char ch : tok) {
    if (ch < '0' || ch > '9')
      throw std::runtime_error(std::string("pnm: bad ") + what + " '" + tok + "' in " + path);
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  return v;
}

}  // namespace detail

// Reads P2/P3 (ascii) and P5/P6 (binary) images with maxval up to 255,
// rescaling samples to the full 8-bit range.
inline ImageU8 read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pnm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (!in || m0 != 'P' || (m1 != '2' && m1 != '3' && m1 != '5' && m1 != '6')) {
    std::ostringstream oss;
    oss << "pnm: unsupported magic bytes 0x" << std::hex << (static_cast<unsigned>(m0) & 0xff)
        << " 0x" << (static_cast<unsigned>(m1) & 0xff) << " in " << path
        << " (want P2/P3/P5/P6)";
    throw std::runtime_error(oss.str());
  }
  const bool ascii = (m1 == '2' || m1 == '3');
  const std::size_t channels = (m1 == '3' || m1 == '6') ? 3 : 1;

  ImageU8 img;
  img.channels = channels;
  img.width = detail::pnm_number(in, path, "width");
  img.height = detail::pnm_number(in, path, "height");
  const std::size_t maxval = detail::pnm_number(in, path, "maxval");
  if (maxval == 0 || maxval > 255)
    throw std::runtime_error("pnm: unsupported maxval " + std::to_string(maxval) + " in " +
                             path + " (8-bit only)");
  const std::size_t count = img.width * img.height * channels;
  img.pixels.resize(count);

  if (ascii) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t v = detail::pnm_number(in, path, "sample");
      if (v > maxval)
        throw std::runtime_error("pnm: sample " + std::to_string(v) + " exceeds maxval in " +
                                 path);
      img.pixels[i] = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    }
  } else {
    // exactly one whitespace byte separates maxval from the raster
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count)
      throw std::runtime_error("pnm: truncated raster in " + path);
    if (maxval != 255)
      for (auto& p : img.pixels)
        p = static_cast<std::uint8_t>((p * std::size_t{255} + maxval / 2) / maxval);
  }
  return img;
}

inline void write_pnm(const std::string& path, const ImageU8& img) {
  ATAC_CHECK(img.channels == 1 || img.channels == 3,
             "pnm: can only write 1- or 3-channel images, got " << img.channels);
  ATAC_CHECK(img.pixels.size() == img.width * img.height * img.channels,
             "pnm: pixel buffer size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pnm: cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("pnm: short write to " + path);
}

template <typename T>
ImageT<T> to_unit(const ImageU8& img) {
  ImageT<T> out;
  out.width = img.width;
  out.height = img.height;
  out.channels = img.channels;
  out.pixels.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    out.pixels[i] = static_cast<T>(img.pixels[i]) / T(255);
  return out;
}

template <typename T>
ImageU8 to_u8(const ImageT<T>& img) {
  ImageU8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = img.channels;
  out.pixels.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const T v = std::clamp(img.pixels[i], T(0), T(1));
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(v) * 255.0));
  }
  return out;
}

// HWC unit image to a C×H×W tensor leaf.
template <typename T>
Tensor<T> to_chw(const ImageT<T>& img) {
  std::vector<T> v(img.pixels.size());
  const std::size_t C = img.channels, H = img.height, W = img.width;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) v[(c * H + y) * W + x] = img.pixels[(y * W + x) * C + c];
  return Tensor<T>::from_values({C, H, W}, std::move(v));
}

template <typename T>
ImageT<T> from_chw(const Tensor<T>& t) {
  ATAC_CHECK(t.ndim() == 3, "from_chw: expected C×H×W, got " << shape_str(t.shape()));
  ImageT<T> img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(t.size());
  const std::size_t C = img.channels, H = img.height, W = img.width;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        img.pixels[(y * W + x) * C + c] = t.values()[(c * H + y) * W + x];
  return img;
}

}  // namespace atac
