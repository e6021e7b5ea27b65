#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "anchornet/model.hpp"
#include "anchornet/patch_selector.hpp"

namespace anchornet {

/// Side length of every sequence item (resized image and localized patches).
inline constexpr int kGlanceSize = 95;

enum class ItemSource { kResizedGlobal, kPatch };

struct SequenceItem {
  Tensor<float> image;  // 1x3xSxS
  ItemSource source = ItemSource::kResizedGlobal;
  std::optional<PatchBox> box;
  double activation = 0.0;
};

/// Item 1 is the bilinear resize of the whole image; items 2.. are the
/// AnchorNet patches in selection order.
struct InputSequence {
  std::vector<SequenceItem> items;
  /// Class whose CAM guided the selection (AnchorNet's own argmax), -1 if none ran.
  int cam_class = -1;

  std::size_t size() const { return items.size(); }
};

/// Confidence thresholds rho_1 .. rho_{T-1}, compared against accumulated
/// (un-normalized) softmax sums, so rho_t is meaningful in (0, t].
struct ThresholdSchedule {
  std::vector<double> values;

  /// rho_t = 0 for every stage: every sample exits at stage 1.
  static ThresholdSchedule always_exit(int stages);
  /// rho_t = t: the accumulated maximum can never strictly exceed it.
  static ThresholdSchedule never_exit(int stages);
};

/// FLOPs charged for each pipeline component.
struct CostModel {
  std::uint64_t resize = 0;
  std::uint64_t anchornet = 0;
  std::uint64_t global = 0;
  std::uint64_t local = 0;

  /// resize + f_global, plus AnchorNet (once) and one f_local per extra stage.
  std::uint64_t flops_for(int stages_run) const;

  static CostModel from_models(const ArchSpec& anchornet, const ArchSpec& global,
                               const ArchSpec& local, ImageSize image);
};

struct InferenceTrace {
  int exit_stage = 0;
  int predicted_class = -1;
  int sequence_length = 0;
  std::vector<std::vector<double>> scores;  // accumulated p_t per stage run
  std::vector<double> confidence;           // max_j p_tj per stage run
  std::uint64_t flops = 0;
};

/// A classifier seen by the pipeline: image -> class probabilities.
using ProbabilityFn = std::function<std::vector<double>(const Tensor<float>&)>;

ProbabilityFn as_probability_fn(const DownstreamModel<float>& model);

/// Bilinear resize of the full image to the glance size.
Tensor<float> glance(const Tensor<float>& image);

/// AnchorNet's view of one image: the CAM of its argmax class and the
/// patches selected from it.
struct PatchProposal {
  Cam cam;
  std::vector<SelectedPatch> patches;
  std::vector<double> probabilities;  // AnchorNet softmax
};

PatchProposal propose_patches(const Tensor<float>& image,
                              const AnchorNetModel<float>& anchornet,
                              const SelectionConfig& cfg);

/// Runs AnchorNet on `image`, takes the CAM of its argmax class and builds
/// the input sequence: resized image followed by the selected patches.
InputSequence make_sequence(const Tensor<float>& image,
                            const AnchorNetModel<float>& anchornet,
                            const SelectionConfig& cfg);

/// Sequential early-exit inference over a prepared sequence. Stage 1 uses
/// f_global, later stages f_local; downstream models only run for stages
/// actually reached. Throws RangeError if `thresholds` is too short.
InferenceTrace run_sequence(const ProbabilityFn& f_global,
                            const ProbabilityFn& f_local,
                            const InputSequence& seq,
                            const ThresholdSchedule& thresholds,
                            const CostModel& costs = {});

/// Same exit rule over precomputed per-stage softmax outputs; with
/// `forced_stage` every sample runs exactly min(forced_stage, length) stages.
InferenceTrace replay(std::span<const std::vector<double>> stage_probs,
                      const ThresholdSchedule& thresholds,
                      const CostModel& costs,
                      std::optional<int> forced_stage = std::nullopt);

/// Lazy end-to-end inference: AnchorNet runs only if stage 1 does not exit.
InferenceTrace run_pipeline(const Tensor<float>& image,
                            const AnchorNetModel<float>& anchornet,
                            const DownstreamModel<float>& f_global,
                            const DownstreamModel<float>& f_local,
                            const SelectionConfig& cfg,
                            const ThresholdSchedule& thresholds,
                            const CostModel& costs);

/// Per-sample softmax outputs of every sequence item (not accumulated).
struct StageRecord {
  int label = 0;
  std::vector<std::vector<double>> stage_probs;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_flops = 0.0;
  std::vector<int> exit_counts;  // index t-1 counts exits at stage t
};

/// Anytime prediction: every sample exits at stage `stage`.
EvalResult anytime_eval(std::span<const StageRecord> records, const CostModel& costs,
                        int stage, int max_stages);

/// Budgeted batch classification with a fixed threshold schedule.
EvalResult budgeted_eval(std::span<const StageRecord> records, const CostModel& costs,
                         const ThresholdSchedule& thresholds, int max_stages);

struct TuneResult {
  ThresholdSchedule schedule;
  double exit_rate = 0.0;  // q
  double mean_flops = 0.0;
  int iterations = 0;
};

/// Quantile schedule for exit rate q: rho_t is chosen so that a fraction q
/// of the samples still alive at stage t exits there.
ThresholdSchedule quantile_schedule(std::span<const StageRecord> records, double q,
                                    int max_stages);

/// Bisects q so the replayed mean FLOPs lands within `tolerance` (relative)
/// of `budget`. Throws InfeasibleError outside [stage-1 cost, full cost] or
/// when no schedule meets the tolerance.
TuneResult tune_thresholds(std::span<const StageRecord> records, const CostModel& costs,
                           double budget, int max_stages, double tolerance = 0.02,
                           int max_iterations = 40);

/// Index of the largest entry (first on ties).
int argmax(std::span<const double> values);

}  // namespace anchornet
