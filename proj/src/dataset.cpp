#include "anchornet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "anchornet/error.hpp"
#include "anchornet/rng.hpp"

namespace anchornet {

void LabeledDataset::validate() const {
  if (num_classes < 1) throw ConstraintError("dataset needs at least one class");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].label < 0 || items[i].label >= num_classes) {
      throw ConstraintError("item " + std::to_string(i) + " has label " +
                            std::to_string(items[i].label) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
}

LabeledDataset LabeledDataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > items.size()) throw RangeError("dataset slice out of range");
  LabeledDataset out;
  out.num_classes = num_classes;
  out.items.assign(items.begin() + static_cast<std::ptrdiff_t>(begin),
                   items.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

void SyntheticConfig::validate() const {
  if (num_classes < 1 || num_classes > 4) {
    throw ConstraintError("synthetic generator supports 1 to 4 classes");
  }
  if (samples_per_class < 1) throw ConstraintError("samples_per_class must be positive");
  if (min_object < 4 || max_object < min_object || max_object > image_size) {
    throw ConstraintError("object size range must satisfy 4 <= min <= max <= image size");
  }
}

int texture_sign(Texture texture, int y, int x) {
  switch (texture) {
    case Texture::kHorizontal: return (y & 1) ? 1 : -1;
    case Texture::kVertical: return (x & 1) ? 1 : -1;
    case Texture::kChecker: return ((x + y) & 1) ? 1 : -1;
    case Texture::kDiagonal: return (((x + y) >> 1) & 1) ? 1 : -1;
  }
  return 0;
}

LabeledImage synthesize_item(const SyntheticConfig& cfg, std::size_t index) {
  auto eng = SeedTree(cfg.seed).split("synthetic").split(index).engine();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.pixel_noise);

  const int size = cfg.image_size;
  const int label = static_cast<int>(index % static_cast<std::size_t>(cfg.num_classes));
  const auto texture = static_cast<Texture>(label);

  // Background: base colour plus a few slow plane waves per channel.
  struct Wave {
    double ky, kx, phase;
  };
  double base[3];
  std::vector<Wave> waves[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.3 + 0.4 * unit(eng);
    for (int k = 0; k < 3; ++k) {
      const double wavelength = 40.0 + 120.0 * unit(eng);
      const double angle = std::numbers::pi * unit(eng);
      const double freq = 2.0 * std::numbers::pi / wavelength;
      waves[c].push_back({freq * std::sin(angle), freq * std::cos(angle),
                          2.0 * std::numbers::pi * unit(eng)});
    }
  }

  std::uniform_int_distribution<int> side_dist(cfg.min_object, cfg.max_object);
  const int side = side_dist(eng);
  std::uniform_int_distribution<int> pos(0, size - side);
  const int top = pos(eng);
  const int left = pos(eng);
  const bool disk = unit(eng) < 0.5;
  const double radius = side / 2.0;
  const double cy = top + radius;
  const double cx = left + radius;

  LabeledImage item;
  item.label = label;
  item.object_box = PatchBox{top, left, side, side};
  item.image = ImageU8(3, size, size);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double v = base[c];
        for (const Wave& w : waves[c]) {
          v += cfg.background_amplitude * std::sin(w.ky * y + w.kx * x + w.phase);
        }
        bool inside = y >= top && y < top + side && x >= left && x < left + side;
        if (inside && disk) {
          const double dy = y + 0.5 - cy;
          const double dx = x + 0.5 - cx;
          inside = dy * dy + dx * dx <= radius * radius;
        }
        if (inside) v += cfg.texture_contrast * texture_sign(texture, y, x);
        v += noise(eng);
        const double byte = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
        item.image.at(c, y, x) = static_cast<std::uint8_t>(byte);
      }
    }
  }
  return item;
}

LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t total =
      static_cast<std::size_t>(cfg.num_classes) * static_cast<std::size_t>(cfg.samples_per_class);
  LabeledDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.items.resize(total);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i) {
    ds.items[static_cast<std::size_t>(i)] = synthesize_item(cfg, static_cast<std::size_t>(i));
  }
  return ds;
}

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw Error("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream index(dir / "index.csv");
  if (!index) throw Error("cannot open " + (dir / "index.csv").string() + " for writing");
  index << "path,label,top,left,height,width\n";
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    const LabeledImage& item = dataset.items[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.ppm", i);
    write_ppm(dir / name, item.image);
    index << name << "," << item.label;
    if (item.object_box) {
      const PatchBox& b = *item.object_box;
      index << "," << b.top << "," << b.left << "," << b.height << "," << b.width << "\n";
    } else {
      index << ",,,,\n";
    }
  }
  if (!index) throw Error("write failed: " + (dir / "index.csv").string());
}

LabeledDataset load_dataset(const std::filesystem::path& dir, std::optional<int> num_classes) {
  const auto index_path = dir / "index.csv";
  std::ifstream index(index_path);
  if (!index) throw Error("cannot open " + index_path.string());
  std::string line;
  if (!std::getline(index, line) || line.rfind("path,label", 0) != 0) {
    throw FormatError(index_path.string() + ": missing header");
  }
  LabeledDataset ds;
  int max_label = -1;
  int line_no = 1;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 6) {
      throw FormatError(index_path.string() + ":" + std::to_string(line_no) +
                        ": expected 6 columns");
    }
    LabeledImage item;
    item.path = fields[0];
    try {
      item.label = std::stoi(fields[1]);
      if (!fields[2].empty()) {
        item.object_box = PatchBox{std::stoi(fields[2]), std::stoi(fields[3]),
                                   std::stoi(fields[4]), std::stoi(fields[5])};
      }
    } catch (const std::exception&) {
      throw FormatError(index_path.string() + ":" + std::to_string(line_no) +
                        ": malformed number");
    }
    item.image = read_pnm(dir / item.path);
    max_label = std::max(max_label, item.label);
    ds.items.push_back(std::move(item));
  }
  ds.num_classes = num_classes.value_or(max_label + 1);
  ds.validate();
  return ds;
}

}  // namespace anchornet
