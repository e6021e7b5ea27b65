#include "anchornet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace anchornet {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  if (tok.empty()) throw FormatError(path.string() + ": truncated PNM header");
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = header_token(in, path);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad PNM header value '" + tok + "'");
  }
}

void write_pnm(const std::filesystem::path& path, const ImageU8& image,
               const char* magic, int channels) {
  if (image.channels != channels) {
    throw ShapeError(std::string(magic) + " needs " + std::to_string(channels) +
                     " channel(s), image has " + std::to_string(image.channels));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << magic << "\n" << image.width << " " << image.height << "\n255\n";
  std::vector<char> row(static_cast<std::size_t>(image.width) * channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < channels; ++c) {
        row[static_cast<std::size_t>(x) * channels + c] = static_cast<char>(image.at(c, y, x));
      }
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace

ImageU8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string magic = header_token(in, path);
  int channels;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw FormatError(path.string() + ": unsupported magic '" + magic + "'");
  }
  const int width = header_int(in, path);
  const int height = header_int(in, path);
  const int maxval = header_int(in, path);
  if (maxval != 255) {
    throw FormatError(path.string() + ": only maxval 255 is supported");
  }
  // header_token consumed exactly one whitespace byte after maxval.
  ImageU8 image(channels, height, width);
  std::vector<char> row(static_cast<std::size_t>(width) * channels);
  for (int y = 0; y < height; ++y) {
    if (!in.read(row.data(), static_cast<std::streamsize>(row.size()))) {
      throw FormatError(path.string() + ": truncated pixel data");
    }
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        image.at(c, y, x) = static_cast<std::uint8_t>(row[static_cast<std::size_t>(x) * channels + c]);
      }
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const ImageU8& image) {
  write_pnm(path, image, "P6", 3);
}

void write_pgm(const std::filesystem::path& path, const ImageU8& image) {
  write_pnm(path, image, "P5", 1);
}

Tensor<float> to_tensor(const ImageU8& image) {
  Tensor<float> t({1, image.channels, image.height, image.width});
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    t[i] = static_cast<float>(image.data[i]) / 255.0f;
  }
  return t;
}

ImageU8 from_tensor(const Tensor<float>& tensor) {
  const Shape s = tensor.shape();
  if (s.n != 1) throw ShapeError("from_tensor expects a single image");
  ImageU8 image(s.c, s.h, s.w);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double v = std::round(std::clamp(static_cast<double>(tensor[i]), 0.0, 1.0) * 255.0);
    image.data[i] = static_cast<std::uint8_t>(v);
  }
  return image;
}

ImageU8 crop(const ImageU8& image, const PatchBox& box) {
  if (box.top < 0 || box.left < 0 || box.bottom() > image.height ||
      box.right() > image.width) {
    throw RangeError("crop box outside image");
  }
  ImageU8 out(image.channels, box.height, box.width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < box.height; ++y) {
      for (int x = 0; x < box.width; ++x) {
        out.at(c, y, x) = image.at(c, box.top + y, box.left + x);
      }
    }
  }
  return out;
}

ImageU8 heatmap(const std::vector<double>& values, int rows, int cols, int scale) {
  if (rows < 1 || cols < 1 || values.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("heatmap dimensions do not match value count");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  ImageU8 out(1, rows * scale, cols * scale);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = values[static_cast<std::size_t>(r) * cols + c];
      const double norm = span > 0 ? (v - *lo) / span : 0.0;
      const auto byte = static_cast<std::uint8_t>(std::lround(norm * 255.0));
      for (int dy = 0; dy < scale; ++dy) {
        for (int dx = 0; dx < scale; ++dx) out.at(0, r * scale + dy, c * scale + dx) = byte;
      }
    }
  }
  return out;
}

void draw_box(ImageU8& image, const PatchBox& box, std::uint8_t r, std::uint8_t g,
              std::uint8_t b) {
  const std::uint8_t color[3] = {r, g, b};
  auto put = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= image.height || x >= image.width) return;
    for (int c = 0; c < std::min(image.channels, 3); ++c) image.at(c, y, x) = color[c];
  };
  for (int x = box.left; x < box.right(); ++x) {
    put(box.top, x);
    put(box.bottom() - 1, x);
  }
  for (int y = box.top; y < box.bottom(); ++y) {
    put(y, box.left);
    put(y, box.right() - 1);
  }
}

}  // namespace anchornet
