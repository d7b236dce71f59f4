#include "segaware/image_io.hpp"

#include <cmath>
#include <fstream>
#include <vector>

#include "segaware/errors.hpp"

namespace segaware {

namespace {

// Reads the next header token, skipping whitespace and # comment lines.
std::string next_token(std::istream& is, const std::string& path) {
  std::string tok;
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = is.get();
  }
  if (tok.empty()) throw IoError("truncated image header in " + path);
  return tok;
}

std::size_t parse_extent(const std::string& tok, const std::string& path) {
  try {
    const long v = std::stol(tok);
    if (v <= 0) throw IoError("non-positive image extent in " + path);
    return static_cast<std::size_t>(v);
  } catch (const std::invalid_argument&) {
    throw IoError("malformed image header in " + path);
  }
}

unsigned char to_byte(double v) {
  const double scaled = std::lround(std::min(1.0, std::max(0.0, v)) * 255.0);
  return static_cast<unsigned char>(scaled);
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[2] != 3) {
    throw DimensionError("write_ppm expects an HxWx3 tensor, got " + image.shape_str());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P6\n" << image.shape[1] << " " << image.shape[0] << "\n255\n";
  std::vector<unsigned char> row(image.shape[1] * 3);
  for (std::size_t i = 0; i < image.shape[0]; ++i) {
    for (std::size_t j = 0; j < image.shape[1]; ++j)
      for (std::size_t c = 0; c < 3; ++c) row[j * 3 + c] = to_byte(image(i, j, c));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("short write to " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  if (next_token(is, path) != "P6") throw IoError(path + " is not a binary PPM (P6)");
  const std::size_t w = parse_extent(next_token(is, path), path);
  const std::size_t h = parse_extent(next_token(is, path), path);
  if (parse_extent(next_token(is, path), path) != 255) {
    throw IoError(path + " has an unsupported maxval (only 255)");
  }
  Tensor out({h, w, 3});
  std::vector<unsigned char> buf(h * w * 3);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw IoError("truncated pixel data in " + path);
  }
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

void write_pgm(const std::string& path, const LabelMap& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P5\n" << labels.w << " " << labels.h << "\n255\n";
  std::vector<unsigned char> row(labels.w);
  for (std::size_t i = 0; i < labels.h; ++i) {
    for (std::size_t j = 0; j < labels.w; ++j) {
      const int l = labels.at(i, j);
      if (l < 0 || l > 255) {
        throw IoError("label " + std::to_string(l) + " does not fit a PGM byte");
      }
      row[j] = static_cast<unsigned char>(l);
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("short write to " + path);
}

LabelMap read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  if (next_token(is, path) != "P5") throw IoError(path + " is not a binary PGM (P5)");
  const std::size_t w = parse_extent(next_token(is, path), path);
  const std::size_t h = parse_extent(next_token(is, path), path);
  if (parse_extent(next_token(is, path), path) != 255) {
    throw IoError(path + " has an unsupported maxval (only 255)");
  }
  LabelMap out(h, w);
  std::vector<unsigned char> buf(h * w);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw IoError("truncated pixel data in " + path);
  }
  for (std::size_t i = 0; i < buf.size(); ++i) out.labels[i] = buf[i];
  return out;
}

}  // namespace segaware
