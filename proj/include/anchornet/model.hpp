#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "anchornet/autograd.hpp"
#include "anchornet/rf.hpp"

namespace anchornet {

enum class StageOp { kConv, kMBConv };

/// One row of the architecture table.
struct StageSpec {
  StageOp op = StageOp::kConv;
  int kernel = 3;
  double expansion = 1.0;  // ignored for plain convolutions
  int out_channels = 1;
  int stride = 1;
  bool operator==(const StageSpec&) const = default;
};

struct HeadSpec {
  /// Width of the 1x1 expansion conv before GAP; 0 disables it.
  int expand_channels = 320;
  int num_classes = 1000;
  bool classifier_bias = false;
  bool operator==(const HeadSpec&) const = default;
};

/// Architecture description with a canonical text form:
///
///   arch anchornet
///   input 3
///   conv 3 - 16 2          # op kernel expansion out stride
///   mbconv 3 1 16 2
///   ...
///   head 320 1000 nobias   # expand_channels num_classes bias|nobias
struct ArchSpec {
  std::string name = "anchornet";
  int in_channels = 3;
  std::vector<StageSpec> stages;
  HeadSpec head;

  /// The padding-free extractor of the patch proposal network (RF 95, stride 8).
  static ArchSpec anchornet(int num_classes = 1000);
  /// Six-layer padding-free classifier for 95x95 inputs.
  static ArchSpec downstream(int num_classes);

  std::string to_text() const;
  static ArchSpec parse(std::string_view text);
  /// Channel counts, kernels and strides are positive; throws ShapeError.
  void validate() const;

  bool operator==(const ArchSpec&) const = default;
};

/// round(in * expansion), at least 1.
int expanded_width(int in_channels, double expansion);

/// Derived per-stage geometry for a concrete input size.
struct StageGeometry {
  StageSpec spec;
  int in_channels = 0;
  int hidden_channels = 0;  // expanded width for MBConv, out for conv
  int out_h = 0;
  int out_w = 0;
  RfState rf;
  bool residual = false;
};

/// Accumulated RF after every spatial conv (1x1 convs leave it unchanged).
RfState rf_state(const ArchSpec& spec);

/// Throws ConstraintError if the accumulated RF exceeds the input.
std::vector<StageGeometry> stage_geometry(const ArchSpec& spec, ImageSize input);

struct LayerFlops {
  std::string name;
  std::string kind;  // conv | bn | silu | add | gap | linear
  std::uint64_t flops = 0;
};

/// 1 multiply-accumulate = 1 FLOP; pointwise ops cost one per element.
struct FlopReport {
  std::vector<LayerFlops> layers;
  std::uint64_t total() const;
};

FlopReport count_flops(const ArchSpec& spec, ImageSize input);

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
};

/// conv -> batchnorm [-> SiLU]
template <typename T>
struct ConvUnit {
  Parameter<T> weight;
  BatchNormLayer<T> bn;
  Stride stride{};
  int groups = 1;
  bool activation = true;
};

/// A plain conv stage or an MBConv block (expand 1x1 -> depthwise kxk ->
/// project 1x1). MBConv carries no squeeze-and-excitation: SE pools over the
/// whole map and would make every location depend on the entire image.
template <typename T>
struct Block {
  StageSpec spec;
  std::optional<ConvUnit<T>> expand;
  ConvUnit<T> spatial;
  std::optional<ConvUnit<T>> project;
  /// Stride-1 blocks with equal in/out width add a center-cropped shortcut.
  bool residual = false;
  int crop_margin = 0;
};

/// Named view of a persistent array (parameter or running statistic).
template <typename T>
struct StateEntry {
  std::string name;
  Shape shape;
  std::span<T> data;
};

/// Sequential padding-free CNN: blocks -> optional 1x1 head -> GAP -> linear.
template <typename T>
class ConvNet {
 public:
  ConvNet(ArchSpec spec, std::uint64_t seed);

  const ArchSpec& spec() const { return spec_; }
  RfState rf_state() const { return anchornet::rf_state(spec_); }

  /// Feature map before GAP.
  Var features(Tape<T>& tape, Var image, NormMode mode);
  Var logits_from_features(Tape<T>& tape, Var features);
  Var logits(Tape<T>& tape, Var image, NormMode mode);

  /// Inference-mode helpers (running statistics, no gradient recording).
  Tensor<T> features(const Tensor<T>& image) const;
  Tensor<T> logits(const Tensor<T>& image) const;
  /// GAP + classifier applied to an already computed feature map.
  Tensor<T> logits_from_features(const Tensor<T>& features) const;
  /// Row-wise softmax of logits, one vector per batch item.
  std::vector<std::vector<T>> probabilities(const Tensor<T>& image) const;

  const Parameter<T>& classifier_weight() const { return classifier_; }
  Parameter<T>& classifier_weight() { return classifier_; }

  std::vector<Parameter<T>*> parameters();
  std::vector<StateEntry<T>> state();
  std::size_t parameter_count() const;

 private:
  Var run_unit(Tape<T>& tape, ConvUnit<T>& unit, Var x, NormMode mode);
  ConvUnit<T> make_unit(const std::string& name, int in, int out, int kernel,
                        int stride, int groups, bool activation,
                        std::mt19937_64& rng);

  ArchSpec spec_;
  std::vector<Block<T>> blocks_;
  std::optional<ConvUnit<T>> head_;
  Parameter<T> classifier_;
  std::optional<Parameter<T>> bias_;
};

/// The patch proposal network.
template <typename T>
struct AnchorNetModel {
  ConvNet<T> net;
  /// Set by Stage I training (or loaded from a trained checkpoint).
  bool trained = false;

  RfState rf_state() const { return net.rf_state(); }
};

enum class DownstreamVariant { kGlobal, kLocal };

std::string to_string(DownstreamVariant v);
DownstreamVariant parse_variant(std::string_view text);

/// Classifier consuming 95x95 inputs (resized image or localized patch).
template <typename T>
struct DownstreamModel {
  ConvNet<T> net;
  DownstreamVariant variant = DownstreamVariant::kGlobal;
};

/// Throws ConstraintError when `declared_input` is smaller than the
/// accumulated receptive field of `spec`.
template <typename T>
AnchorNetModel<T> build_anchornet(const ArchSpec& spec, std::uint64_t seed,
                                  std::optional<ImageSize> declared_input = ImageSize{224, 224});

template <typename T>
DownstreamModel<T> build_downstream(int num_classes, std::uint64_t seed,
                                    DownstreamVariant variant = DownstreamVariant::kGlobal);

/// Softmax class distribution of AnchorNet for a single image.
template <typename T>
std::vector<T> classify(const AnchorNetModel<T>& model, const Tensor<T>& image);

extern template class ConvNet<float>;
extern template class ConvNet<double>;

}  // namespace anchornet
