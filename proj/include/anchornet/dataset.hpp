#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anchornet/image_io.hpp"
#include "anchornet/rf.hpp"

namespace anchornet {

struct LabeledImage {
  ImageU8 image;
  int label = 0;
  std::optional<PatchBox> object_box;
  std::string path;  // relative to the dataset directory, empty if in memory
};

struct LabeledDataset {
  int num_classes = 0;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  /// Throws ConstraintError on a label outside [0, num_classes).
  void validate() const;
  /// Items [begin, end) as a new dataset.
  LabeledDataset slice(std::size_t begin, std::size_t end) const;
};

/// Texture carried by the object of each class. All four have zero local
/// mean, so a class is only recoverable from fine spatial structure.
enum class Texture { kHorizontal, kVertical, kChecker, kDiagonal };

struct SyntheticConfig {
  int num_classes = 4;
  int samples_per_class = 100;
  int image_size = 224;
  int min_object = 48;
  int max_object = 96;
  double texture_contrast = 0.12;
  double background_amplitude = 0.12;  // per low-frequency wave
  double pixel_noise = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Item i gets label i % num_classes and its own sub-seed, so the result does
/// not depend on generation order.
LabeledDataset generate_synthetic(const SyntheticConfig& cfg);

/// One synthetic image; exposed for tests.
LabeledImage synthesize_item(const SyntheticConfig& cfg, std::size_t index);

/// Texture value in {-1, +1} at absolute pixel (y, x).
int texture_sign(Texture texture, int y, int x);

/// Writes images/<index>.ppm and index.csv (path,label,top,left,height,width).
void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir);

/// Reads index.csv from `dir`. num_classes is the largest label + 1 unless
/// given explicitly.
LabeledDataset load_dataset(const std::filesystem::path& dir,
                            std::optional<int> num_classes = std::nullopt);

}  // namespace anchornet
