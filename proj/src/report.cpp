#include "anchornet/report.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace anchornet {

ArchSpec resolve_arch(const std::string& name_or_path, int num_classes) {
  if (name_or_path == "default" || name_or_path == "anchornet") {
    return ArchSpec::anchornet(num_classes);
  }
  if (name_or_path == "downstream") return ArchSpec::downstream(num_classes);
  std::ifstream in(name_or_path);
  if (!in) {
    throw Error("unknown architecture '" + name_or_path +
                "' (expected default, anchornet, downstream or a readable file)");
  }
  std::stringstream text;
  text << in.rdbuf();
  return ArchSpec::parse(text.str());
}

namespace {

std::string format_expansion(const StageSpec& s) {
  if (s.op == StageOp::kConv) return "-";
  std::ostringstream os;
  os << s.expansion;
  return os.str();
}

std::string render(const std::vector<std::vector<std::string>>& rows, bool csv) {
  std::ostringstream out;
  if (csv) {
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << row[c];
      out << "\n";
    }
    return out.str();
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      line += std::string(width[c] - row[c].size(), ' ') + row[c];
    }
    out << line << "\n";
  }
  return out.str();
}

}  // namespace

std::string format_rf_table(const ArchSpec& spec, ImageSize input, bool csv) {
  const auto geo = stage_geometry(spec, input);
  std::vector<std::vector<std::string>> rows;
  if (csv) {
    rows.push_back({"stage", "op", "expansion", "out_channels", "stride", "output",
                    "kernel", "rf", "total_stride"});
  } else {
    rows.push_back({"stage", "op", "exp", "out", "s", "OR", "k", "RF", "S"});
  }
  for (std::size_t i = 0; i < geo.size(); ++i) {
    const StageGeometry& g = geo[i];
    const std::string kernel = std::to_string(g.spec.kernel) + "x" + std::to_string(g.spec.kernel);
    rows.push_back({std::to_string(i + 1), g.spec.op == StageOp::kConv ? "conv" : "mbconv",
                    format_expansion(g.spec), std::to_string(g.spec.out_channels),
                    std::to_string(g.spec.stride),
                    g.out_h == g.out_w ? std::to_string(g.out_h)
                                       : std::to_string(g.out_h) + "x" + std::to_string(g.out_w),
                    kernel, std::to_string(g.rf.rf()), std::to_string(g.rf.stride())});
  }
  return render(rows, csv);
}

std::string format_flops(const FlopReport& report, bool csv) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"layer", "kind", "flops"});
  for (const auto& l : report.layers) rows.push_back({l.name, l.kind, std::to_string(l.flops)});
  rows.push_back({"total", "", std::to_string(report.total())});
  if (csv) return render(rows, true);
  // Layer names read better left aligned.
  std::size_t name_w = 0, kind_w = 0, flop_w = 0;
  for (const auto& r : rows) {
    name_w = std::max(name_w, r[0].size());
    kind_w = std::max(kind_w, r[1].size());
    flop_w = std::max(flop_w, r[2].size());
  }
  std::ostringstream out;
  for (const auto& r : rows) {
    out << r[0] << std::string(name_w - r[0].size() + 2, ' ') << r[1]
        << std::string(kind_w - r[1].size() + 2, ' ')
        << std::string(flop_w - r[2].size(), ' ') << r[2] << "\n";
  }
  return out.str();
}

}  // namespace anchornet
