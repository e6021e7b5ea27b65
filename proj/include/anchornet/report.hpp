#pragma once

#include <string>
#include <vector>

#include "anchornet/model.hpp"

namespace anchornet {

/// Resolves "default" / "anchornet" / "downstream" or reads an architecture
/// file in ArchSpec text form.
ArchSpec resolve_arch(const std::string& name_or_path, int num_classes = 1000);

/// One line per stage: output resolution, kernel, accumulated RF and
/// stride. Text output is column aligned; csv gives a header plus rows.
std::string format_rf_table(const ArchSpec& spec, ImageSize input, bool csv);

/// Per-layer counts followed by a "total <n>" line.
std::string format_flops(const FlopReport& report, bool csv);

}  // namespace anchornet
