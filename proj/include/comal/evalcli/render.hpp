#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "comal/synthworld/world.hpp"

namespace comal::eval {

using Rgb = std::array<std::uint8_t, 3>;
using Palette = std::vector<Rgb>;

/// One distinct colour per synthworld class.
const Palette& default_palette();

/// 8-bit RGB raster.
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  Raster() = default;
  Raster(std::size_t h, std::size_t w, Rgb fill = {0, 0, 0});
};

Raster colorize(const world::LabelMap& labels, const Palette& palette = default_palette());
Raster to_raster(const world::Image& image);
/// Nearest-neighbour enlargement by an integer factor.
Raster upscale(const Raster& r, std::size_t factor);
/// Row-major tiling with a `gap`-pixel border of `background` between tiles.
Raster tile(const std::vector<std::vector<Raster>>& rows, std::size_t gap = 1,
            Rgb background = {255, 255, 255});

/// Binary P6 pixmap bytes.
std::string encode_ppm(const Raster& r);
/// P6 of a label map, one palette colour per pixel. Throws on labels >= palette size.
std::string render(const world::LabelMap& labels, const Palette& palette = default_palette());

struct PpmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};
PpmHeader parse_ppm_header(const std::string& bytes);
Raster decode_ppm(const std::string& bytes);

void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace comal::eval
