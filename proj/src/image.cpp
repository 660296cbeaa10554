#include "boneage/image.hpp"

#include <fstream>
#include <string>

namespace boneage {

namespace {

// Skips whitespace and '#' comment lines, then reads one unsigned integer.
int read_pnm_int(std::istream& in, const std::filesystem::path& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c))
    throw DataError("malformed PNM header in " + path.string());
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw DataError(path.string() + " is not a binary PGM (P5)");
  const int w = read_pnm_int(in, path);
  const int h = read_pnm_int(in, path);
  const int maxval = read_pnm_int(in, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw DataError("unsupported PGM geometry in " + path.string());
  GrayImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.size()))
    throw DataError("truncated PGM data in " + path.string());
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

void write_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
  GrayImage img(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) img.pixels[i] = mask.bits[i] ? 255 : 0;
  write_pgm(path, img);
}

BinaryMask read_mask_pgm(const std::filesystem::path& path) {
  const GrayImage img = read_pgm(path);
  BinaryMask mask(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) mask.bits[i] = img.pixels[i] >= 128 ? 1 : 0;
  return mask;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace boneage
