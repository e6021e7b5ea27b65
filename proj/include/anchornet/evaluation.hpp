#pragma once

#include <vector>

#include "anchornet/dataset.hpp"
#include "anchornet/pipeline.hpp"

namespace anchornet {

/// Runs every stage of the pipeline on every image and keeps the raw
/// per-stage softmax outputs, so threshold schedules can be replayed
/// without touching the networks again. Images are processed in parallel;
/// results are stored by index and do not depend on scheduling.
std::vector<StageRecord> collect_stage_records(const LabeledDataset& dataset,
                                               const AnchorNetModel<float>& anchornet,
                                               const DownstreamModel<float>& f_global,
                                               const DownstreamModel<float>& f_local,
                                               const SelectionConfig& cfg);

}  // namespace anchornet
