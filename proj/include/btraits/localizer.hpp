#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "btraits/png_image.hpp"
#include "btraits/sae.hpp"
#include "btraits/util.hpp"

namespace btraits::localize {

/// grid_h x grid_w activations of one latent over one image's patches.
using Heatmap = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pixel box, [x0, x1) x [y0, y1), plus the patch extent it came from.
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // patch rows/cols, exclusive end
  double mass = 0.0;                           // summed heatmap over the component

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return long(width()) * height(); }
  bool same_geometry(const BoundingBox& o) const {
    return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
  }
  bool operator==(const BoundingBox&) const = default;
};

json to_json(const BoundingBox& b);
BoundingBox box_from_json(const json& j);

/// `codes` is patches x n from sae::patch_codes; patches are row-major over
/// the grid. Throws std::out_of_range for a latent outside [0, n).
Heatmap heatmap(const sae::Matrix<float>& codes, std::uint32_t latent, int grid_h, int grid_w);

struct BoxOptions {
  double rel_threshold = 0.5;  // fraction of the heatmap maximum, in (0, 1]
  int patch_size = 14;
  std::size_t max_boxes = 3;   // 0 keeps every component
};

/// Binarises at rel_threshold * max (cells >= the cut are on), labels
/// 4-connected components and returns one tight box per component, largest
/// activation mass first (ties by first cell in row-major order). An
/// all-zero heatmap yields no boxes.
std::vector<BoundingBox> mask_and_box(const Heatmap& h, const BoxOptions& options = {});

/// Patch (row, col) -> pixel box for a square patch tiling.
BoundingBox patch_box(int row, int col, int patch_size);

/// Rescales a box from the model's input canvas to the image actually on
/// disk, rounding outward.
BoundingBox map_to_image(const BoundingBox& b, int canvas_w, int canvas_h, int image_w,
                         int image_h);

struct BoxStyle {
  int stroke = 2;
  std::uint8_t r = 255, g = 0, b = 0;
  bool crop = false;  // crop to the union of the boxes after drawing
  int crop_margin = 8;
};

/// Draws box outlines inside each box's edge. Boxes are drawn in ascending
/// area so an enclosing box is painted over the ones it contains.
void draw_boxes(RgbImage& image, std::span<const BoundingBox> boxes, const BoxStyle& style = {});

/// Decodes, annotates and re-encodes as PNG. Throws a data error for an
/// undecodable image or a box outside it.
std::vector<std::uint8_t> annotate_image(std::span<const std::uint8_t> source,
                                         std::span<const BoundingBox> boxes,
                                         const BoxStyle& style = {});

}  // namespace btraits::localize
