#include "anchornet/manifest.hpp"

#include <fstream>

#include "anchornet/error.hpp"

namespace anchornet {

nlohmann::ordered_json RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["versions"] = {{"anchornet", kVersion},
                   {"weight_format", "ANET1"},
                   {"compiler", __VERSION__}};
  return j;
}

void RunManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_json().dump(2) << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace anchornet
