#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "anchornet/dataset.hpp"
#include "anchornet/model.hpp"
#include "anchornet/patch_selector.hpp"

namespace anchornet {

enum class LrSchedule { kStepDecay, kCosine };

std::string to_string(LrSchedule s);
LrSchedule parse_schedule(std::string_view text);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 0.1;
  LrSchedule schedule = LrSchedule::kStepDecay;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  /// Global fine-tuning scales each image's loss by 1/|X| (sequence length)
  /// when set; off gives the plain per-image mean.
  bool literal_global_normalization = true;

  void validate() const;
  /// Step decay divides by 10 once 30%, 60% and 90% of the epochs have
  /// passed; cosine anneals from lr to 0 over the run.
  double lr_at(int epoch) const;
};

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad_logits;  // probs - onehot(label)
};

/// -log max(probs[label], 1e-12) and its gradient with respect to the logits
/// that produced `probs` through softmax.
CrossEntropy cross_entropy(std::span<const double> probs, int label);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // epoch objective, accumulated over batches
  double accuracy = 0.0;  // train-mode predictions on the samples seen
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t updates = 0;

  /// CSV with columns epoch,loss,accuracy.
  void write_csv(const std::filesystem::path& path) const;
};

/// Training examples grouped by source image. The objective is
///   (1/|D|) * sum over groups g, samples i in g of scale_i * CE_i
/// where |D| counts every group, including those without samples.
struct SampleSet {
  std::size_t num_groups = 0;
  std::vector<std::size_t> group;  // group of each sample, non-decreasing
  std::vector<int> labels;
  std::vector<double> scales;
  /// Produces sample i as a 1xCxHxW tensor; all samples share one shape.
  std::function<Tensor<float>(std::size_t)> load;

  std::size_t size() const { return labels.size(); }
};

/// Whole images at full resolution, scale 1.
SampleSet anchornet_samples(const LabeledDataset& dataset);
/// Glance-size resized images; scale 1/sequence_length when `literal`.
/// The resized tensors are computed once and owned by the set.
SampleSet global_samples(const LabeledDataset& dataset, int sequence_length, bool literal);
/// One sample per planned patch, scale 1/(1 + patches of that image).
/// Keeps a reference to `dataset`, which must outlive the set.
SampleSet local_samples(const LabeledDataset& dataset,
                        const std::vector<std::vector<PatchBox>>& plan);

/// Selected patch boxes for every image (AnchorNet inference + CAM).
std::vector<std::vector<PatchBox>> plan_patches(const LabeledDataset& dataset,
                                                const AnchorNetModel<float>& anchornet,
                                                const SelectionConfig& cfg);

/// SGD with momentum, v = mu * v + (g + wd * w); w -= lr * v. Parameters
/// flagged decay = false skip the wd term.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}
  void step(std::span<Parameter<float>* const> params, double lr);

 private:
  double momentum_;
  double wd_;
  std::vector<std::vector<float>> velocity_;
};

/// Minibatch training: each epoch shuffles groups with a seeded stream named
/// `stream`, takes batch_size groups per step and weights sample i by
/// scale_i / (groups in batch). Throws DivergenceError on a non-finite loss.
TrainLog train_classifier(ConvNet<float>& net, const SampleSet& samples,
                          const TrainConfig& cfg, std::string_view stream);

struct SetMetrics {
  double objective = 0.0;
  double accuracy = 0.0;
};

/// Inference-mode objective and accuracy, accumulated batch by batch over
/// groups in index order: each batch adds (its group count / |D|) times its
/// batch-normalized loss.
SetMetrics evaluate_set(const ConvNet<float>& net, const SampleSet& samples, int batch_size);

/// Stage I. Sets model.trained.
TrainLog train_anchornet(AnchorNetModel<float>& model, const LabeledDataset& dataset,
                         const TrainConfig& cfg);

/// Stage II on resized whole images.
TrainLog finetune_global(DownstreamModel<float>& f, const LabeledDataset& dataset,
                         const TrainConfig& cfg, int sequence_length);

/// Stage II on AnchorNet patches. Throws StateError for an untrained AnchorNet.
TrainLog finetune_local(DownstreamModel<float>& f, const LabeledDataset& dataset,
                        const AnchorNetModel<float>& anchornet, const SelectionConfig& sel,
                        const TrainConfig& cfg);

}  // namespace anchornet
