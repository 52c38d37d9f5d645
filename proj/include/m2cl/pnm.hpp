#pragma once

// Binary PPM (P6) and PGM (P5) reading and writing. 8- and 16-bit samples.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "m2cl/errors.hpp"

namespace m2cl {

struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 for P5, 3 for P6
  unsigned maxval = 255;
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels
};

namespace detail {

inline std::size_t read_header_int(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  if (ch == EOF || !std::isdigit(ch)) throw DataError("pnm: malformed header in " + path);
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    if (v > (1u << 24)) throw DataError("pnm: header value too large in " + path);
    ch = in.get();
  }
  if (ch == EOF || !std::isspace(ch)) throw DataError("pnm: malformed header in " + path);
  return v;
}

}  // namespace detail

inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("pnm: cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw DataError("pnm: " + path.string() + " is not a binary PPM/PGM (P5/P6) file");
  PnmImage img;
  img.channels = magic[1] == '6' ? 3 : 1;
  img.width = detail::read_header_int(in, path.string());
  img.height = detail::read_header_int(in, path.string());
  const std::size_t maxval = detail::read_header_int(in, path.string());
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535)
    throw DataError("pnm: invalid dimensions or maxval in " + path.string());
  img.maxval = static_cast<unsigned>(maxval);
  const std::size_t count = img.width * img.height * img.channels;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw DataError("pnm: truncated pixel data in " + path.string());
  img.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    img.samples[i] = bytes_per == 1 ? raw[i] : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  for (auto s : img.samples)
    if (s > img.maxval) throw DataError("pnm: sample exceeds maxval in " + path.string());
  return img;
}

/// Writes 8-bit samples; `channels` selects P5 (1) or P6 (3).
inline void write_pnm(const std::filesystem::path& path, std::size_t width, std::size_t height, std::size_t channels,
                      const std::vector<std::uint8_t>& samples) {
  if (channels != 1 && channels != 3) throw DataError("pnm: channels must be 1 or 3");
  if (samples.size() != width * height * channels) throw DataError("pnm: sample count does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("pnm: cannot write " + path.string());
  out << (channels == 3 ? "P6" : "P5") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(samples.data()), static_cast<std::streamsize>(samples.size()));
  if (!out) throw DataError("pnm: write failed for " + path.string());
}

}  // namespace m2cl
