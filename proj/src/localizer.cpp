#include "btraits/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "btraits/error.hpp"

namespace btraits::localize {

json to_json(const BoundingBox& b) {
  return {{"x0", b.x0},     {"y0", b.y0},     {"x1", b.x1},     {"y1", b.y1},
          {"row0", b.row0}, {"col0", b.col0}, {"row1", b.row1}, {"col1", b.col1},
          {"mass", b.mass}};
}

BoundingBox box_from_json(const json& j) {
  BoundingBox b;
  b.x0 = j.at("x0").get<int>();
  b.y0 = j.at("y0").get<int>();
  b.x1 = j.at("x1").get<int>();
  b.y1 = j.at("y1").get<int>();
  b.row0 = j.value("row0", 0);
  b.col0 = j.value("col0", 0);
  b.row1 = j.value("row1", 0);
  b.col1 = j.value("col1", 0);
  b.mass = j.value("mass", 0.0);
  return b;
}

Heatmap heatmap(const sae::Matrix<float>& codes, std::uint32_t latent, int grid_h, int grid_w) {
  if (latent >= static_cast<std::uint32_t>(codes.cols())) {
    throw std::out_of_range("latent " + std::to_string(latent) + " out of range (n=" +
                            std::to_string(codes.cols()) + ")");
  }
  if (codes.rows() != Eigen::Index{grid_h} * grid_w) {
    throw data_error("code matrix has " + std::to_string(codes.rows()) + " patches, grid is " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  Heatmap h(grid_h, grid_w);
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) h(r, c) = codes(r * grid_w + c, latent);
  }
  return h;
}

BoundingBox patch_box(int row, int col, int patch_size) {
  BoundingBox b;
  b.row0 = row;
  b.col0 = col;
  b.row1 = row + 1;
  b.col1 = col + 1;
  b.x0 = col * patch_size;
  b.y0 = row * patch_size;
  b.x1 = (col + 1) * patch_size;
  b.y1 = (row + 1) * patch_size;
  return b;
}

std::vector<BoundingBox> mask_and_box(const Heatmap& h, const BoxOptions& options) {
  if (!(options.rel_threshold > 0.0 && options.rel_threshold <= 1.0)) {
    throw usage_error("rel_threshold must lie in (0, 1]");
  }
  if (options.patch_size < 1) throw usage_error("patch_size must be >= 1");
  if (h.size() == 0) return {};
  const float peak = h.maxCoeff();
  if (!(peak > 0.0f)) return {};
  const float cut = static_cast<float>(options.rel_threshold * static_cast<double>(peak));

  const int rows = static_cast<int>(h.rows()), cols = static_cast<int>(h.cols());
  std::vector<int> label(std::size_t(rows) * cols, -1);
  struct Component {
    BoundingBox box;
    int first_cell;
  };
  std::vector<Component> comps;
  std::vector<int> stack;
  for (int start = 0; start < rows * cols; ++start) {
    const int sr = start / cols, sc = start % cols;
    if (label[start] >= 0 || !(h(sr, sc) >= cut)) continue;
    const int id = static_cast<int>(comps.size());
    Component comp{{}, start};
    auto& b = comp.box;
    b.row0 = sr;
    b.row1 = sr + 1;
    b.col0 = sc;
    b.col1 = sc + 1;
    label[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const int cell = stack.back();
      stack.pop_back();
      const int r = cell / cols, c = cell % cols;
      b.mass += h(r, c);
      b.row0 = std::min(b.row0, r);
      b.row1 = std::max(b.row1, r + 1);
      b.col0 = std::min(b.col0, c);
      b.col1 = std::max(b.col1, c + 1);
      constexpr int kDr[] = {-1, 1, 0, 0};
      constexpr int kDc[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int nr = r + kDr[k], nc = c + kDc[k];
        if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
        const int ncell = nr * cols + nc;
        if (label[ncell] >= 0 || !(h(nr, nc) >= cut)) continue;
        label[ncell] = id;
        stack.push_back(ncell);
      }
    }
    comps.push_back(comp);
  }

  std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
    if (a.box.mass != b.box.mass) return a.box.mass > b.box.mass;
    return a.first_cell < b.first_cell;
  });
  if (options.max_boxes > 0 && comps.size() > options.max_boxes) comps.resize(options.max_boxes);

  std::vector<BoundingBox> out;
  out.reserve(comps.size());
  for (auto& c : comps) {
    auto& b = c.box;
    b.x0 = b.col0 * options.patch_size;
    b.y0 = b.row0 * options.patch_size;
    b.x1 = b.col1 * options.patch_size;
    b.y1 = b.row1 * options.patch_size;
    out.push_back(b);
  }
  return out;
}

BoundingBox map_to_image(const BoundingBox& b, int canvas_w, int canvas_h, int image_w,
                         int image_h) {
  if (canvas_w == image_w && canvas_h == image_h) return b;
  BoundingBox out = b;
  const double sx = double(image_w) / canvas_w, sy = double(image_h) / canvas_h;
  out.x0 = std::clamp(static_cast<int>(std::floor(b.x0 * sx)), 0, image_w - 1);
  out.y0 = std::clamp(static_cast<int>(std::floor(b.y0 * sy)), 0, image_h - 1);
  out.x1 = std::clamp(static_cast<int>(std::ceil(b.x1 * sx)), out.x0 + 1, image_w);
  out.y1 = std::clamp(static_cast<int>(std::ceil(b.y1 * sy)), out.y0 + 1, image_h);
  return out;
}

void draw_boxes(RgbImage& image, std::span<const BoundingBox> boxes, const BoxStyle& style) {
  for (const auto& b : boxes) {
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > image.width || b.y1 > image.height || b.x0 >= b.x1 ||
        b.y0 >= b.y1) {
      throw data_error("box (" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                       std::to_string(b.x1) + "," + std::to_string(b.y1) +
                       ") lies outside the " + std::to_string(image.width) + "x" +
                       std::to_string(image.height) + " image");
    }
  }
  std::vector<const BoundingBox*> order;
  for (const auto& b : boxes) order.push_back(&b);
  std::stable_sort(order.begin(), order.end(),
                   [](const BoundingBox* a, const BoundingBox* b) { return a->area() < b->area(); });

  const int stroke = std::max(1, style.stroke);
  for (const auto* b : order) {
    for (int y = b->y0; y < b->y1; ++y) {
      for (int x = b->x0; x < b->x1; ++x) {
        const bool edge = x < b->x0 + stroke || x >= b->x1 - stroke || y < b->y0 + stroke ||
                          y >= b->y1 - stroke;
        if (!edge) continue;
        auto* px = image.at(x, y);
        px[0] = style.r;
        px[1] = style.g;
        px[2] = style.b;
      }
    }
  }
}

std::vector<std::uint8_t> annotate_image(std::span<const std::uint8_t> source,
                                         std::span<const BoundingBox> boxes,
                                         const BoxStyle& style) {
  auto image = decode_png(source);
  draw_boxes(image, boxes, style);
  if (style.crop && !boxes.empty()) {
    int x0 = image.width, y0 = image.height, x1 = 0, y1 = 0;
    for (const auto& b : boxes) {
      x0 = std::min(x0, b.x0);
      y0 = std::min(y0, b.y0);
      x1 = std::max(x1, b.x1);
      y1 = std::max(y1, b.y1);
    }
    x0 = std::max(0, x0 - style.crop_margin);
    y0 = std::max(0, y0 - style.crop_margin);
    x1 = std::min(image.width, x1 + style.crop_margin);
    y1 = std::min(image.height, y1 + style.crop_margin);
    RgbImage cropped(x1 - x0, y1 - y0);
    for (int y = y0; y < y1; ++y) {
      std::copy(image.at(x0, y), image.at(x0, y) + 3 * (x1 - x0), cropped.at(0, y - y0));
    }
    image = std::move(cropped);
  }
  return encode_png(image);
}

}  // namespace btraits::localize
