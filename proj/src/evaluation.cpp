#include "anchornet/evaluation.hpp"

namespace anchornet {

std::vector<StageRecord> collect_stage_records(const LabeledDataset& dataset,
                                               const AnchorNetModel<float>& anchornet,
                                               const DownstreamModel<float>& f_global,
                                               const DownstreamModel<float>& f_local,
                                               const SelectionConfig& cfg) {
  std::vector<StageRecord> records(dataset.size());
  const auto g = as_probability_fn(f_global);
  const auto l = as_probability_fn(f_local);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dataset.size()); ++i) {
    const LabeledImage& item = dataset.items[i];
    const InputSequence seq = make_sequence(to_tensor(item.image), anchornet, cfg);
    StageRecord& rec = records[i];
    rec.label = item.label;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      rec.stage_probs.push_back(t == 0 ? g(seq.items[t].image) : l(seq.items[t].image));
    }
  }
  return records;
}

}  // namespace anchornet
