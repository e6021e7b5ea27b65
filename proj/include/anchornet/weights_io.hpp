#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anchornet/model.hpp"

namespace anchornet {

enum class ModelKind { kAnchorNet, kDownstream };

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// On disk:
///   "ANET1"  magic
///   u32      header length (little-endian)
///   header   text: kind, variant, trained flag, architecture text and one
///            "array <name> <n> <c> <h> <w>" line per array
///   payload  arrays in header order as little-endian float32
struct WeightFile {
  ModelKind kind = ModelKind::kAnchorNet;
  std::optional<DownstreamVariant> variant;
  bool trained = false;
  ArchSpec spec;
  std::vector<NamedArray> arrays;
};

void write_weight_file(const std::filesystem::path& path, const WeightFile& file);
/// Throws FormatError on a bad magic, malformed header or short payload.
WeightFile read_weight_file(const std::filesystem::path& path);

/// Parameters and batchnorm running statistics in a fixed order.
std::vector<NamedArray> snapshot(ConvNet<float>& net);
/// Copies arrays into `net`; names and shapes must match exactly.
void restore(ConvNet<float>& net, const std::vector<NamedArray>& arrays);

void save_anchornet(const std::filesystem::path& path, AnchorNetModel<float>& model);
AnchorNetModel<float> load_anchornet(const std::filesystem::path& path);
void save_downstream(const std::filesystem::path& path, DownstreamModel<float>& model);
DownstreamModel<float> load_downstream(const std::filesystem::path& path);

}  // namespace anchornet
