#include "meshclick/image_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace meshclick {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Parses a binary PNM header "P5|P6 w h maxval<ws>"; returns the data offset.
std::size_t parse_pnm_header(const std::vector<unsigned char>& bytes, const char* magic, int& w, int& h,
                             const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_ws();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != magic) throw FormatError(path.string() + ": expected " + magic + " image");
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed header");
  }
  ++pos;  // single whitespace before raster
  if (w <= 0 || h <= 0) throw FormatError(path.string() + ": bad dimensions");
  return pos;
}

}  // namespace

std::size_t MaskImage::area() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

void write_mffi(const std::filesystem::path& path, const AttributeImage<float>& image) {
  if (image.values.rows() != static_cast<Eigen::Index>(image.width) * image.height) {
    throw FormatError("write_mffi: value rows do not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write("MFFI", 4);
  put_u32(out, static_cast<std::uint32_t>(image.width));
  put_u32(out, static_cast<std::uint32_t>(image.height));
  put_u32(out, static_cast<std::uint32_t>(image.channels()));
  for (Eigen::Index i = 0; i < image.values.size(); ++i) {
    put_u32(out, std::bit_cast<std::uint32_t>(image.values.data()[i]));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

AttributeImage<float> read_mffi(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "MFFI", 4) != 0) {
    throw FormatError(path.string() + ": not an MFFI feature image");
  }
  AttributeImage<float> img;
  img.width = static_cast<int>(get_u32(bytes.data() + 4));
  img.height = static_cast<int>(get_u32(bytes.data() + 8));
  const auto channels = get_u32(bytes.data() + 12);
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * channels;
  if (bytes.size() != 16 + 4 * count) {
    throw FormatError(path.string() + ": payload size does not match header");
  }
  img.values.resize(static_cast<Eigen::Index>(img.width) * img.height, channels);
  for (std::size_t i = 0; i < count; ++i) {
    img.values.data()[i] = std::bit_cast<float>(get_u32(bytes.data() + 16 + 4 * i));
  }
  return img;
}

void write_mask_pgm(const std::filesystem::path& path, const MaskImage& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  for (auto v : mask.data) out.put(static_cast<char>(v ? 255 : 0));
}

MaskImage read_mask_pgm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  int w = 0;
  int h = 0;
  const std::size_t offset = parse_pnm_header(bytes, "P5", w, h, path);
  if (bytes.size() - offset != static_cast<std::size_t>(w) * h) {
    throw FormatError(path.string() + ": raster size does not match header");
  }
  MaskImage mask(w, h);
  for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = bytes[offset + i] != 0;
  return mask;
}

void write_color_ppm(const std::filesystem::path& path, const AttributeImage<double>& image) {
  if (image.channels() != 3) throw FormatError("write_color_ppm: image must have 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (Eigen::Index i = 0; i < image.values.size(); ++i) {
    const double v = std::clamp(image.values.data()[i], 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

AttributeImage<double> read_color_ppm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  AttributeImage<double> img;
  const std::size_t offset = parse_pnm_header(bytes, "P6", img.width, img.height, path);
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * 3;
  if (bytes.size() - offset != count) throw FormatError(path.string() + ": raster size does not match header");
  img.values.resize(static_cast<Eigen::Index>(img.width) * img.height, 3);
  for (std::size_t i = 0; i < count; ++i) img.values.data()[i] = bytes[offset + i] / 255.0;
  return img;
}

}  // namespace meshclick
