#include "comal/evalcli/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace comal::eval {

const Palette& default_palette() {
  // sky, building, road, sidewalk, vehicle, pedestrian, pole, sign
  static const Palette p = {{70, 130, 180}, {70, 70, 70},  {128, 64, 128}, {244, 35, 232},
                            {0, 0, 142},    {220, 20, 60}, {153, 153, 153}, {220, 220, 0}};
  return p;
}

Raster::Raster(std::size_t h, std::size_t w, Rgb fill) : height(h), width(w), rgb(h * w * 3) {
  for (std::size_t i = 0; i < h * w; ++i) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i * 3));
}

Raster colorize(const world::LabelMap& labels, const Palette& palette) {
  Raster r(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const std::size_t c = labels.labels[i];
    if (c >= palette.size()) {
      throw std::out_of_range("render: label " + std::to_string(c) + " has no palette colour");
    }
    std::copy(palette[c].begin(), palette[c].end(), r.rgb.begin() + static_cast<long>(i * 3));
  }
  return r;
}

Raster to_raster(const world::Image& image) {
  Raster r(image.height, image.width);
  for (std::size_t i = 0; i < image.rgb.size(); ++i) {
    r.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.rgb[i], 0.0, 1.0) * 255.0));
  }
  return r;
}

Raster upscale(const Raster& r, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("upscale: factor must be positive");
  Raster out(r.height * factor, r.width * factor);
  for (std::size_t i = 0; i < out.height; ++i) {
    for (std::size_t j = 0; j < out.width; ++j) {
      const std::size_t src = ((i / factor) * r.width + j / factor) * 3;
      std::copy_n(r.rgb.begin() + static_cast<long>(src), 3,
                  out.rgb.begin() + static_cast<long>((i * out.width + j) * 3));
    }
  }
  return out;
}

Raster tile(const std::vector<std::vector<Raster>>& rows, std::size_t gap, Rgb background) {
  std::size_t cols = 0, th = 0, tw = 0;
  for (const auto& row : rows) {
    cols = std::max(cols, row.size());
    for (const auto& t : row) {
      th = std::max(th, t.height);
      tw = std::max(tw, t.width);
    }
  }
  Raster out(rows.size() * (th + gap) + gap, cols * (tw + gap) + gap, background);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Raster& t = rows[r][c];
      const std::size_t y0 = gap + r * (th + gap), x0 = gap + c * (tw + gap);
      for (std::size_t i = 0; i < t.height; ++i) {
        std::copy_n(t.rgb.begin() + static_cast<long>(i * t.width * 3), t.width * 3,
                    out.rgb.begin() + static_cast<long>(((y0 + i) * out.width + x0) * 3));
      }
    }
  }
  return out;
}

std::string encode_ppm(const Raster& r) {
  std::string out = "P6\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  out.append(r.rgb.begin(), r.rgb.end());
  return out;
}

std::string render(const world::LabelMap& labels, const Palette& palette) {
  return encode_ppm(colorize(labels, palette));
}

PpmHeader parse_ppm_header(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw std::runtime_error("ppm: missing P6 magic");
  }
  std::size_t pos = 2;
  auto next_field = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw std::runtime_error("ppm: malformed header");
    return std::stol(bytes.substr(start, pos - start));
  };
  PpmHeader h;
  h.width = static_cast<std::size_t>(next_field());
  h.height = static_cast<std::size_t>(next_field());
  h.maxval = static_cast<int>(next_field());
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw std::runtime_error("ppm: malformed header");
  }
  h.data_offset = pos + 1;
  return h;
}

Raster decode_ppm(const std::string& bytes) {
  const PpmHeader h = parse_ppm_header(bytes);
  if (h.maxval != 255) throw std::runtime_error("ppm: only maxval 255 is supported");
  Raster r(h.height, h.width);
  if (bytes.size() - h.data_offset != r.rgb.size()) throw std::runtime_error("ppm: truncated payload");
  std::copy(bytes.begin() + static_cast<long>(h.data_offset), bytes.end(), r.rgb.begin());
  return r;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace comal::eval
