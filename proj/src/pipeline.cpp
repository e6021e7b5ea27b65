#include "anchornet/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "anchornet/kernels.hpp"

namespace anchornet {

ThresholdSchedule ThresholdSchedule::always_exit(int stages) {
  return {std::vector<double>(std::max(0, stages - 1), 0.0)};
}

ThresholdSchedule ThresholdSchedule::never_exit(int stages) {
  ThresholdSchedule s;
  for (int t = 1; t < stages; ++t) s.values.push_back(static_cast<double>(t));
  return s;
}

std::uint64_t CostModel::flops_for(int stages_run) const {
  if (stages_run < 1) return 0;
  std::uint64_t total = resize + global;
  if (stages_run > 1) total += anchornet + static_cast<std::uint64_t>(stages_run - 1) * local;
  return total;
}

CostModel CostModel::from_models(const ArchSpec& anchornet, const ArchSpec& global,
                                 const ArchSpec& local, ImageSize image) {
  CostModel c;
  c.resize = static_cast<std::uint64_t>(anchornet.in_channels) * kGlanceSize * kGlanceSize;
  c.anchornet = count_flops(anchornet, image).total();
  c.global = count_flops(global, {kGlanceSize, kGlanceSize}).total();
  c.local = count_flops(local, {kGlanceSize, kGlanceSize}).total();
  return c;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw RangeError("argmax of an empty vector");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

ProbabilityFn as_probability_fn(const DownstreamModel<float>& model) {
  return [&model](const Tensor<float>& image) {
    const auto p = model.net.probabilities(image).front();
    return std::vector<double>(p.begin(), p.end());
  };
}

Tensor<float> glance(const Tensor<float>& image) {
  return kernels::resize_bilinear(image, kGlanceSize, kGlanceSize);
}

namespace {

std::vector<SequenceItem> patch_items(const Tensor<float>& image,
                                      const AnchorNetModel<float>& anchornet,
                                      const SelectionConfig& cfg, int* cam_class) {
  const PatchProposal proposal = propose_patches(image, anchornet, cfg);
  *cam_class = proposal.cam.class_id;
  std::vector<SequenceItem> items;
  for (const auto& p : proposal.patches) {
    items.push_back({extract_patch(image, p.box), ItemSource::kPatch, p.box, p.activation});
  }
  return items;
}

// One step of the sequential exit rule; returns true when inference stops.
bool advance(InferenceTrace& trace, const std::vector<double>& probs, int t, int length,
             const ThresholdSchedule& thresholds) {
  if (trace.scores.empty()) {
    trace.scores.push_back(probs);
  } else {
    std::vector<double> acc = trace.scores.back();
    if (acc.size() != probs.size()) throw ShapeError("stage outputs differ in class count");
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += probs[j];
    trace.scores.push_back(std::move(acc));
  }
  const auto& p = trace.scores.back();
  const double conf = *std::max_element(p.begin(), p.end());
  trace.confidence.push_back(conf);
  const bool last = t == length;
  if (last || conf > thresholds.values[t - 1]) {
    trace.exit_stage = t;
    trace.predicted_class = argmax(p);
    return true;
  }
  return false;
}

void check_schedule(const ThresholdSchedule& thresholds, int length) {
  if (length < 1) throw RangeError("empty input sequence");
  if (static_cast<int>(thresholds.values.size()) < length - 1) {
    throw RangeError("threshold schedule has " + std::to_string(thresholds.values.size()) +
                     " entries; sequence needs " + std::to_string(length - 1));
  }
}

}  // namespace

PatchProposal propose_patches(const Tensor<float>& image,
                              const AnchorNetModel<float>& anchornet,
                              const SelectionConfig& cfg) {
  const Shape s = image.shape();
  if (s.n != 1) throw ShapeError("propose_patches expects a single image");
  const Tensor<float> features = anchornet.net.features(image);
  const Tensor<float> logits = anchornet.net.logits_from_features(features);
  PatchProposal out;
  const std::vector<double> z(logits.data().begin(), logits.data().end());
  out.probabilities = kernels::softmax<double>(z);
  const int cls = argmax(out.probabilities);
  out.cam = compute_cam(features, anchornet.net.classifier_weight().value, cls);
  out.patches = select_patches(out.cam, anchornet.rf_state(), {s.h, s.w}, cfg);
  return out;
}

InputSequence make_sequence(const Tensor<float>& image,
                            const AnchorNetModel<float>& anchornet,
                            const SelectionConfig& cfg) {
  InputSequence seq;
  seq.items.push_back({glance(image), ItemSource::kResizedGlobal, std::nullopt, 0.0});
  auto patches = patch_items(image, anchornet, cfg, &seq.cam_class);
  for (auto& p : patches) seq.items.push_back(std::move(p));
  return seq;
}

InferenceTrace run_sequence(const ProbabilityFn& f_global, const ProbabilityFn& f_local,
                            const InputSequence& seq, const ThresholdSchedule& thresholds,
                            const CostModel& costs) {
  const int length = static_cast<int>(seq.size());
  check_schedule(thresholds, length);
  InferenceTrace trace;
  trace.sequence_length = length;
  for (int t = 1; t <= length; ++t) {
    const auto& item = seq.items[t - 1].image;
    const std::vector<double> probs = t == 1 ? f_global(item) : f_local(item);
    if (advance(trace, probs, t, length, thresholds)) break;
  }
  trace.flops = costs.flops_for(trace.exit_stage);
  return trace;
}

InferenceTrace replay(std::span<const std::vector<double>> stage_probs,
                      const ThresholdSchedule& thresholds, const CostModel& costs,
                      std::optional<int> forced_stage) {
  int length = static_cast<int>(stage_probs.size());
  InferenceTrace trace;
  trace.sequence_length = length;
  if (forced_stage) {
    if (*forced_stage < 1) throw RangeError("forced stage must be >= 1");
    length = std::min(length, *forced_stage);
    const auto never = ThresholdSchedule::never_exit(length);
    for (int t = 1; t <= length; ++t) {
      if (advance(trace, stage_probs[t - 1], t, length, never)) break;
    }
  } else {
    check_schedule(thresholds, length);
    for (int t = 1; t <= length; ++t) {
      if (advance(trace, stage_probs[t - 1], t, length, thresholds)) break;
    }
  }
  trace.flops = costs.flops_for(trace.exit_stage);
  return trace;
}

InferenceTrace run_pipeline(const Tensor<float>& image,
                            const AnchorNetModel<float>& anchornet,
                            const DownstreamModel<float>& f_global,
                            const DownstreamModel<float>& f_local,
                            const SelectionConfig& cfg,
                            const ThresholdSchedule& thresholds,
                            const CostModel& costs) {
  InferenceTrace trace;
  const auto g = as_probability_fn(f_global);
  const auto l = as_probability_fn(f_local);
  const std::vector<double> first = g(glance(image));
  // Stage 1 can only exit if a later stage exists; resolve the sequence
  // length lazily by assuming patches follow.
  const int assumed = cfg.max_patches + 1;
  check_schedule(thresholds, 2);
  trace.sequence_length = assumed;
  if (advance(trace, first, 1, assumed, thresholds)) {
    trace.flops = costs.flops_for(1);
    return trace;
  }
  int cam_class = -1;
  const auto patches = patch_items(image, anchornet, cfg, &cam_class);
  const int length = 1 + static_cast<int>(patches.size());
  check_schedule(thresholds, length);
  trace.sequence_length = length;
  if (length == 1) {
    // No patch could be selected; stage 1 is final.
    trace.exit_stage = 1;
    trace.predicted_class = argmax(trace.scores.back());
  }
  for (int t = 2; t <= length; ++t) {
    if (advance(trace, l(patches[t - 2].image), t, length, thresholds)) break;
  }
  trace.flops = costs.flops_for(trace.exit_stage);
  return trace;
}

EvalResult anytime_eval(std::span<const StageRecord> records, const CostModel& costs,
                        int stage, int max_stages) {
  if (stage < 1 || stage > max_stages) throw RangeError("anytime stage outside [1, T]");
  EvalResult r;
  r.exit_counts.assign(max_stages, 0);
  if (records.empty()) return r;
  int correct = 0;
  double flops = 0.0;
  for (const auto& rec : records) {
    const auto trace = replay(rec.stage_probs, {}, costs, stage);
    correct += trace.predicted_class == rec.label;
    flops += static_cast<double>(trace.flops);
    ++r.exit_counts[trace.exit_stage - 1];
  }
  r.accuracy = static_cast<double>(correct) / records.size();
  r.mean_flops = flops / records.size();
  return r;
}

EvalResult budgeted_eval(std::span<const StageRecord> records, const CostModel& costs,
                         const ThresholdSchedule& thresholds, int max_stages) {
  EvalResult r;
  r.exit_counts.assign(max_stages, 0);
  if (records.empty()) return r;
  int correct = 0;
  double flops = 0.0;
  for (const auto& rec : records) {
    const auto trace = replay(rec.stage_probs, thresholds, costs);
    correct += trace.predicted_class == rec.label;
    flops += static_cast<double>(trace.flops);
    ++r.exit_counts[trace.exit_stage - 1];
  }
  r.accuracy = static_cast<double>(correct) / records.size();
  r.mean_flops = flops / records.size();
  return r;
}

ThresholdSchedule quantile_schedule(std::span<const StageRecord> records, double q,
                                    int max_stages) {
  ThresholdSchedule schedule;
  std::vector<std::vector<double>> acc(records.size());
  std::vector<bool> alive(records.size(), true);
  for (int t = 1; t < max_stages; ++t) {
    std::vector<double> conf;
    std::vector<std::size_t> who;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& probs = records[i].stage_probs;
      if (!alive[i] || static_cast<int>(probs.size()) < t) continue;
      if (acc[i].empty()) {
        acc[i] = probs[t - 1];
      } else {
        for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += probs[t - 1][j];
      }
      // A sample whose sequence ends here always stops.
      if (static_cast<int>(probs.size()) == t) {
        alive[i] = false;
        continue;
      }
      conf.push_back(*std::max_element(acc[i].begin(), acc[i].end()));
      who.push_back(i);
    }
    double rho = static_cast<double>(t);
    if (!conf.empty()) {
      std::vector<double> sorted = conf;
      std::sort(sorted.begin(), sorted.end());
      const int m = static_cast<int>(sorted.size());
      const int exits = std::clamp(static_cast<int>(std::lround(q * m)), 0, m);
      if (exits == 0) {
        rho = sorted.back();
      } else if (exits == m) {
        rho = 0.0;
      } else {
        rho = sorted[m - exits - 1];
      }
    }
    schedule.values.push_back(rho);
    for (std::size_t k = 0; k < who.size(); ++k) {
      if (conf[k] > rho) alive[who[k]] = false;
    }
  }
  return schedule;
}

TuneResult tune_thresholds(std::span<const StageRecord> records, const CostModel& costs,
                           double budget, int max_stages, double tolerance,
                           int max_iterations) {
  if (records.empty()) throw InfeasibleError("no validation records to tune on");
  const auto always = ThresholdSchedule::always_exit(max_stages);
  const auto never = ThresholdSchedule::never_exit(max_stages);
  const double cheapest = budgeted_eval(records, costs, always, max_stages).mean_flops;
  const double full = budgeted_eval(records, costs, never, max_stages).mean_flops;
  auto within = [&](double flops) { return std::abs(flops - budget) <= tolerance * budget; };

  if (budget < cheapest && !within(cheapest)) {
    throw InfeasibleError("budget " + std::to_string(budget) +
                          " is below the stage-1 cost " + std::to_string(cheapest));
  }
  if (budget > full && !within(full)) {
    throw InfeasibleError("budget " + std::to_string(budget) +
                          " exceeds the full-pipeline cost " + std::to_string(full));
  }
  if (within(full)) return {never, 0.0, full, 0};
  if (within(cheapest)) return {always, 1.0, cheapest, 0};

  // Mean FLOPs falls as the exit rate q rises.
  double lo = 0.0, hi = 1.0;
  TuneResult best{never, 0.0, full, 0};
  for (int it = 1; it <= max_iterations; ++it) {
    const double q = 0.5 * (lo + hi);
    auto schedule = quantile_schedule(records, q, max_stages);
    const double flops = budgeted_eval(records, costs, schedule, max_stages).mean_flops;
    if (std::abs(flops - budget) < std::abs(best.mean_flops - budget)) {
      best = {schedule, q, flops, it};
    }
    if (within(flops)) return {std::move(schedule), q, flops, it};
    if (flops > budget) {
      lo = q;
    } else {
      hi = q;
    }
  }
  throw InfeasibleError("no threshold schedule within " + std::to_string(tolerance * 100) +
                        "% of budget " + std::to_string(budget) + "; closest " +
                        std::to_string(best.mean_flops));
}

}  // namespace anchornet
