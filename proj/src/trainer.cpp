#include "anchornet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <numeric>

#include "anchornet/pipeline.hpp"
#include "anchornet/rng.hpp"

namespace anchornet {

std::string to_string(LrSchedule s) {
  return s == LrSchedule::kStepDecay ? "step" : "cosine";
}

LrSchedule parse_schedule(std::string_view text) {
  if (text == "step") return LrSchedule::kStepDecay;
  if (text == "cosine") return LrSchedule::kCosine;
  throw FormatError("unknown lr schedule '" + std::string(text) + "' (step|cosine)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConstraintError("epochs must be positive");
  if (batch_size < 1) throw ConstraintError("batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConstraintError("learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConstraintError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConstraintError("weight decay must be >= 0");
}

double TrainConfig::lr_at(int epoch) const {
  if (schedule == LrSchedule::kCosine) {
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / epochs));
  }
  double rate = lr;
  for (double frac : {0.3, 0.6, 0.9}) {
    const int milestone = std::max(1, static_cast<int>(std::lround(frac * epochs)));
    if (epoch >= milestone) rate *= 0.1;
  }
  return rate;
}

CrossEntropy cross_entropy(std::span<const double> probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size())) {
    throw RangeError("cross_entropy: label " + std::to_string(label) + " out of range");
  }
  CrossEntropy out;
  out.loss = -std::log(std::max(probs[label], 1e-12));
  out.grad_logits.assign(probs.begin(), probs.end());
  out.grad_logits[label] -= 1.0;
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "epoch,loss,accuracy\n";
  out.precision(9);
  for (const auto& e : epochs) out << e.epoch << "," << e.loss << "," << e.accuracy << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

SampleSet anchornet_samples(const LabeledDataset& dataset) {
  SampleSet set;
  set.num_groups = dataset.size();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    set.group.push_back(i);
    set.labels.push_back(dataset.items[i].label);
    set.scales.push_back(1.0);
  }
  set.load = [&dataset](std::size_t i) { return to_tensor(dataset.items[i].image); };
  return set;
}

SampleSet global_samples(const LabeledDataset& dataset, int sequence_length, bool literal) {
  if (sequence_length < 1) throw ConstraintError("sequence length must be positive");
  auto glances = std::make_shared<std::vector<Tensor<float>>>(dataset.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dataset.size()); ++i) {
    (*glances)[i] = glance(to_tensor(dataset.items[i].image));
  }
  SampleSet set;
  set.num_groups = dataset.size();
  const double scale = literal ? 1.0 / sequence_length : 1.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    set.group.push_back(i);
    set.labels.push_back(dataset.items[i].label);
    set.scales.push_back(scale);
  }
  set.load = [glances](std::size_t i) { return (*glances)[i]; };
  return set;
}

SampleSet local_samples(const LabeledDataset& dataset,
                        const std::vector<std::vector<PatchBox>>& plan) {
  if (plan.size() != dataset.size()) throw ShapeError("patch plan does not match dataset");
  SampleSet set;
  set.num_groups = dataset.size();
  std::vector<std::pair<std::size_t, PatchBox>> where;
  std::optional<std::pair<int, int>> size;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double scale = 1.0 / static_cast<double>(1 + plan[i].size());
    for (const PatchBox& box : plan[i]) {
      if (size && *size != std::pair{box.height, box.width}) {
        throw ShapeError("patches of different sizes cannot share a batch");
      }
      size = std::pair{box.height, box.width};
      set.group.push_back(i);
      set.labels.push_back(dataset.items[i].label);
      set.scales.push_back(scale);
      where.emplace_back(i, box);
    }
  }
  set.load = [&dataset, where = std::move(where)](std::size_t k) {
    return to_tensor(crop(dataset.items[where[k].first].image, where[k].second));
  };
  return set;
}

std::vector<std::vector<PatchBox>> plan_patches(const LabeledDataset& dataset,
                                                const AnchorNetModel<float>& anchornet,
                                                const SelectionConfig& cfg) {
  std::vector<std::vector<PatchBox>> plan(dataset.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dataset.size()); ++i) {
    const auto proposal = propose_patches(to_tensor(dataset.items[i].image), anchornet, cfg);
    for (const auto& p : proposal.patches) plan[i].push_back(p.box);
  }
  return plan;
}

void Sgd::step(std::span<Parameter<float>* const> params, double lr) {
  if (velocity_.empty()) {
    for (const auto* p : params) velocity_.emplace_back(p->value.size(), 0.0f);
  }
  if (velocity_.size() != params.size()) throw StateError("optimizer parameter list changed");
  const auto mu = static_cast<float>(momentum_);
  const auto rate = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<float>& p = *params[k];
    const float wd = p.decay ? static_cast<float>(wd_) : 0.0f;
    auto w = p.value.data();
    auto g = p.grad.data();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * w[i];
      w[i] -= rate * v[i];
    }
  }
}

namespace {

// Sample indices of each group.
std::vector<std::vector<std::size_t>> members(const SampleSet& set) {
  std::vector<std::vector<std::size_t>> out(set.num_groups);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.group[i] >= set.num_groups) throw RangeError("sample group out of range");
    out[set.group[i]].push_back(i);
  }
  return out;
}

struct Batch {
  Tensor<float> inputs;
  std::vector<int> labels;
  std::vector<float> weights;
};

Batch assemble(const SampleSet& set, const std::vector<std::vector<std::size_t>>& by_group,
               std::span<const std::size_t> groups) {
  Batch b;
  std::vector<Tensor<float>> items;
  const double denom = static_cast<double>(groups.size());
  for (std::size_t g : groups) {
    for (std::size_t i : by_group[g]) {
      items.push_back(set.load(i));
      b.labels.push_back(set.labels[i]);
      b.weights.push_back(static_cast<float>(set.scales[i] / denom));
    }
  }
  if (!items.empty()) b.inputs = stack<float>(items);
  return b;
}

int count_correct(const Tensor<float>& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  const int k = s.c * s.h * s.w;
  int correct = 0;
  for (int n = 0; n < s.n; ++n) {
    const float* row = logits.raw() + static_cast<std::size_t>(n) * k;
    correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[n];
  }
  return correct;
}

}  // namespace

TrainLog train_classifier(ConvNet<float>& net, const SampleSet& samples,
                          const TrainConfig& cfg, std::string_view stream) {
  cfg.validate();
  TrainLog log;
  const auto by_group = members(samples);
  const auto params = net.parameters();
  Sgd opt(cfg.momentum, cfg.weight_decay);
  const SeedTree shuffle_seed = SeedTree(cfg.seed).split(stream).split("shuffle");
  std::vector<std::size_t> order(samples.num_groups);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto eng = shuffle_seed.split(static_cast<std::uint64_t>(epoch)).engine();
    std::shuffle(order.begin(), order.end(), eng);

    double objective = 0.0;
    std::size_t seen = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> groups(order.data() + start, end - start);
      Batch batch = assemble(samples, by_group, groups);
      if (batch.labels.empty()) continue;

      Tape<float> tape;
      const Var x = tape.input(std::move(batch.inputs));
      const Var z = net.logits(tape, x, NormMode::kTrain);
      const Var loss = tape.softmax_cross_entropy(z, batch.labels, batch.weights);
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1) +
                              " at batch starting " + std::to_string(start) +
                              " (lr " + std::to_string(lr) + ")");
      }
      for (auto* p : params) p->zero_grad();
      tape.backward(loss);
      opt.step(params, lr);
      ++log.updates;

      objective += value * static_cast<double>(groups.size()) / samples.num_groups;
      correct += count_correct(tape.value(z), batch.labels);
      seen += batch.labels.size();
    }
    log.epochs.push_back({epoch + 1, lr, objective,
                          seen ? static_cast<double>(correct) / seen : 0.0});
  }
  return log;
}

SetMetrics evaluate_set(const ConvNet<float>& net, const SampleSet& samples, int batch_size) {
  if (batch_size < 1) throw ConstraintError("batch_size must be positive");
  const auto by_group = members(samples);
  std::vector<std::size_t> order(samples.num_groups);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SetMetrics m;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> groups(order.data() + start, end - start);
    const Batch batch = assemble(samples, by_group, groups);
    if (batch.labels.empty()) continue;
    const Tensor<float> logits = net.logits(batch.inputs);
    const Tensor<float> probs = kernels::softmax_rows(logits);
    const int k = probs.shape().c;
    double batch_loss = 0.0;
    for (std::size_t n = 0; n < batch.labels.size(); ++n) {
      const double p = probs[n * k + batch.labels[n]];
      batch_loss -= batch.weights[n] * std::log(std::max(p, 1e-12));
    }
    m.objective += batch_loss * static_cast<double>(groups.size()) / samples.num_groups;
    correct += count_correct(logits, batch.labels);
  }
  m.accuracy = samples.size() ? static_cast<double>(correct) / samples.size() : 0.0;
  return m;
}

namespace {

void check_classes(const ConvNet<float>& net, const LabeledDataset& dataset) {
  if (dataset.empty()) throw ConstraintError("training dataset is empty");
  dataset.validate();
  if (net.spec().head.num_classes != dataset.num_classes) {
    throw ShapeError("model predicts " + std::to_string(net.spec().head.num_classes) +
                     " classes, dataset has " + std::to_string(dataset.num_classes));
  }
}

}  // namespace

TrainLog train_anchornet(AnchorNetModel<float>& model, const LabeledDataset& dataset,
                         const TrainConfig& cfg) {
  check_classes(model.net, dataset);
  auto log = train_classifier(model.net, anchornet_samples(dataset), cfg, "anchornet");
  model.trained = true;
  return log;
}

TrainLog finetune_global(DownstreamModel<float>& f, const LabeledDataset& dataset,
                         const TrainConfig& cfg, int sequence_length) {
  check_classes(f.net, dataset);
  const auto set = global_samples(dataset, sequence_length, cfg.literal_global_normalization);
  return train_classifier(f.net, set, cfg, "global");
}

TrainLog finetune_local(DownstreamModel<float>& f, const LabeledDataset& dataset,
                        const AnchorNetModel<float>& anchornet, const SelectionConfig& sel,
                        const TrainConfig& cfg) {
  if (!anchornet.trained) {
    throw StateError("finetune_local needs a trained AnchorNet (run Stage I first)");
  }
  check_classes(f.net, dataset);
  sel.validate();
  const auto plan = plan_patches(dataset, anchornet, sel);
  return train_classifier(f.net, local_samples(dataset, plan), cfg, "local");
}

}  // namespace anchornet
