#include "anchornet/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace anchornet {

ArchSpec ArchSpec::anchornet(int num_classes) {
  ArchSpec spec;
  spec.name = "anchornet";
  spec.in_channels = 3;
  spec.stages = {
      {StageOp::kConv, 3, 1.0, 16, 2},   {StageOp::kMBConv, 3, 1.0, 16, 2},
      {StageOp::kMBConv, 3, 3.0, 24, 2}, {StageOp::kMBConv, 3, 4.0, 24, 1},
      {StageOp::kMBConv, 3, 4.0, 48, 1}, {StageOp::kMBConv, 3, 2.0, 96, 1},
      {StageOp::kMBConv, 3, 1.5, 96, 1}, {StageOp::kMBConv, 3, 1.5, 96, 1},
  };
  spec.head = {320, num_classes, false};
  return spec;
}

ArchSpec ArchSpec::downstream(int num_classes) {
  ArchSpec spec;
  spec.name = "downstream";
  spec.in_channels = 3;
  spec.stages = {
      {StageOp::kConv, 3, 1.0, 16, 2}, {StageOp::kConv, 3, 1.0, 32, 2},
      {StageOp::kConv, 3, 1.0, 32, 1}, {StageOp::kConv, 3, 1.0, 64, 2},
      {StageOp::kConv, 3, 1.0, 64, 1}, {StageOp::kConv, 3, 1.0, 64, 1},
  };
  spec.head = {0, num_classes, true};
  return spec;
}

std::string ArchSpec::to_text() const {
  std::ostringstream os;
  os << "arch " << name << "\n";
  os << "input " << in_channels << "\n";
  for (const auto& s : stages) {
    if (s.op == StageOp::kConv) {
      os << "conv " << s.kernel << " - ";
    } else {
      os << "mbconv " << s.kernel << " " << s.expansion << " ";
    }
    os << s.out_channels << " " << s.stride << "\n";
  }
  os << "head " << head.expand_channels << " " << head.num_classes << " "
     << (head.classifier_bias ? "bias" : "nobias") << "\n";
  return os.str();
}

ArchSpec ArchSpec::parse(std::string_view text) {
  ArchSpec spec;
  spec.stages.clear();
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  bool saw_head = false;
  auto fail = [&](const std::string& why) {
    throw FormatError("arch spec line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "arch") {
      if (!(ls >> spec.name)) fail("missing name");
    } else if (key == "input") {
      if (!(ls >> spec.in_channels)) fail("missing channel count");
    } else if (key == "conv" || key == "mbconv") {
      StageSpec s;
      s.op = key == "conv" ? StageOp::kConv : StageOp::kMBConv;
      std::string exp;
      if (!(ls >> s.kernel >> exp >> s.out_channels >> s.stride)) {
        fail("expected: " + key + " <kernel> <expansion|-> <out> <stride>");
      }
      if (exp == "-") {
        if (s.op == StageOp::kMBConv) fail("mbconv needs an expansion ratio");
        s.expansion = 1.0;
      } else {
        try {
          s.expansion = std::stod(exp);
        } catch (const std::exception&) {
          fail("bad expansion '" + exp + "'");
        }
      }
      spec.stages.push_back(s);
    } else if (key == "head") {
      std::string bias;
      if (!(ls >> spec.head.expand_channels >> spec.head.num_classes >> bias) ||
          (bias != "bias" && bias != "nobias")) {
        fail("expected: head <expand_channels> <num_classes> bias|nobias");
      }
      spec.head.classifier_bias = bias == "bias";
      saw_head = true;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!saw_head) throw FormatError("arch spec has no head line");
  spec.validate();
  return spec;
}

void ArchSpec::validate() const {
  if (in_channels < 1) throw ShapeError("input channels must be >= 1");
  if (stages.empty()) throw ShapeError("architecture has no stages");
  for (const auto& s : stages) {
    if (s.kernel < 1 || s.stride < 1 || s.out_channels < 1 || !(s.expansion > 0)) {
      throw ShapeError("stage with non-positive kernel/stride/channels/expansion");
    }
  }
  if (head.expand_channels < 0 || head.num_classes < 1) {
    throw ShapeError("head needs expand_channels >= 0 and num_classes >= 1");
  }
}

int expanded_width(int in_channels, double expansion) {
  return std::max(1, static_cast<int>(std::lround(in_channels * expansion)));
}

std::string to_string(DownstreamVariant v) {
  return v == DownstreamVariant::kGlobal ? "global" : "local";
}

DownstreamVariant parse_variant(std::string_view text) {
  if (text == "global") return DownstreamVariant::kGlobal;
  if (text == "local") return DownstreamVariant::kLocal;
  throw FormatError("unknown downstream variant '" + std::string(text) + "'");
}

RfState rf_state(const ArchSpec& spec) {
  RfState state;
  for (const auto& s : spec.stages) state = state.push_layer(s.kernel, s.stride);
  return state;
}

namespace {

bool is_residual(const StageSpec& s, int in_channels) {
  return s.op == StageOp::kMBConv && s.stride == 1 && s.out_channels == in_channels;
}

}  // namespace

std::vector<StageGeometry> stage_geometry(const ArchSpec& spec, ImageSize input) {
  spec.validate();
  num_locations(rf_state(spec), input);  // RF <= min(H, W)
  std::vector<StageGeometry> out;
  int h = input.height, w = input.width, c = spec.in_channels;
  RfState rf;
  for (const auto& s : spec.stages) {
    if (h < s.kernel || w < s.kernel) {
      throw ConstraintError("stage kernel exceeds its input resolution");
    }
    StageGeometry g;
    g.spec = s;
    g.in_channels = c;
    g.hidden_channels = s.op == StageOp::kMBConv ? expanded_width(c, s.expansion)
                                                 : s.out_channels;
    h = (h - s.kernel) / s.stride + 1;
    w = (w - s.kernel) / s.stride + 1;
    g.out_h = h;
    g.out_w = w;
    rf = rf.push_layer(s.kernel, s.stride);
    g.rf = rf;
    g.residual = is_residual(s, c);
    out.push_back(g);
    c = s.out_channels;
  }
  return out;
}

std::uint64_t FlopReport::total() const {
  return std::accumulate(layers.begin(), layers.end(), std::uint64_t{0},
                         [](std::uint64_t acc, const LayerFlops& l) { return acc + l.flops; });
}

FlopReport count_flops(const ArchSpec& spec, ImageSize input) {
  FlopReport report;
  const auto geometry = stage_geometry(spec, input);
  auto conv_unit = [&report](const std::string& name, std::uint64_t positions,
                             int in_per_group, int out, int kernel, bool act) {
    report.layers.push_back({name, "conv", positions * out * in_per_group * kernel * kernel});
    report.layers.push_back({name + ".bn", "bn", positions * out});
    if (act) report.layers.push_back({name + ".silu", "silu", positions * out});
  };
  std::uint64_t in_positions = static_cast<std::uint64_t>(input.height) * input.width;
  for (std::size_t i = 0; i < geometry.size(); ++i) {
    const auto& g = geometry[i];
    const std::string prefix = "stage" + std::to_string(i + 1);
    const std::uint64_t out_positions = static_cast<std::uint64_t>(g.out_h) * g.out_w;
    if (g.spec.op == StageOp::kConv) {
      conv_unit(prefix + ".conv", out_positions, g.in_channels, g.spec.out_channels,
                g.spec.kernel, true);
    } else {
      if (g.hidden_channels != g.in_channels) {
        conv_unit(prefix + ".expand", in_positions, g.in_channels, g.hidden_channels, 1, true);
      }
      conv_unit(prefix + ".dw", out_positions, 1, g.hidden_channels, g.spec.kernel, true);
      conv_unit(prefix + ".project", out_positions, g.hidden_channels, g.spec.out_channels,
                1, false);
      if (g.residual) {
        report.layers.push_back({prefix + ".add", "add", out_positions * g.spec.out_channels});
      }
    }
    in_positions = out_positions;
  }
  int channels = spec.stages.back().out_channels;
  if (spec.head.expand_channels > 0) {
    conv_unit("head.conv", in_positions, channels, spec.head.expand_channels, 1, true);
    channels = spec.head.expand_channels;
  }
  report.layers.push_back({"gap", "gap", in_positions * channels});
  report.layers.push_back({"classifier", "linear",
                           static_cast<std::uint64_t>(spec.head.num_classes) * channels});
  return report;
}

template <typename T>
ConvUnit<T> ConvNet<T>::make_unit(const std::string& name, int in, int out,
                                  int kernel, int stride, int groups,
                                  bool activation, std::mt19937_64& rng) {
  ConvUnit<T> unit;
  const int in_per_group = in / groups;
  Tensor<T> w({out, in_per_group, kernel, kernel});
  const double fan_in = static_cast<double>(in_per_group) * kernel * kernel;
  std::normal_distribution<double> init(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w.data()) v = static_cast<T>(init(rng));
  unit.weight = Parameter<T>(name + ".weight", std::move(w));
  unit.bn.gamma = Parameter<T>(name + ".bn.gamma", Tensor<T>({out, 1, 1, 1}, T(1)), false);
  unit.bn.beta = Parameter<T>(name + ".bn.beta", Tensor<T>({out, 1, 1, 1}, T(0)), false);
  unit.bn.running_mean.assign(out, T(0));
  unit.bn.running_var.assign(out, T(1));
  unit.stride = {stride, stride};
  unit.groups = groups;
  unit.activation = activation;
  return unit;
}

template <typename T>
ConvNet<T>::ConvNet(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  int c = spec_.in_channels;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const StageSpec& s = spec_.stages[i];
    const std::string prefix = "stage" + std::to_string(i + 1);
    Block<T> block;
    block.spec = s;
    if (s.op == StageOp::kConv) {
      block.spatial = make_unit(prefix + ".conv", c, s.out_channels, s.kernel,
                                s.stride, 1, true, rng);
    } else {
      const int hidden = expanded_width(c, s.expansion);
      if (hidden != c) {
        block.expand = make_unit(prefix + ".expand", c, hidden, 1, 1, 1, true, rng);
      }
      block.spatial = make_unit(prefix + ".dw", hidden, hidden, s.kernel, s.stride,
                                hidden, true, rng);
      block.project = make_unit(prefix + ".project", hidden, s.out_channels, 1, 1,
                                1, false, rng);
      block.residual = is_residual(s, c);
      block.crop_margin = (s.kernel - 1) / 2;
    }
    blocks_.push_back(std::move(block));
    c = s.out_channels;
  }
  if (spec_.head.expand_channels > 0) {
    head_ = make_unit("head.conv", c, spec_.head.expand_channels, 1, 1, 1, true, rng);
    c = spec_.head.expand_channels;
  }
  const int classes = spec_.head.num_classes;
  Tensor<T> w({classes, c, 1, 1});
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  std::uniform_real_distribution<double> init(-bound, bound);
  for (auto& v : w.data()) v = static_cast<T>(init(rng));
  classifier_ = Parameter<T>("classifier.weight", std::move(w));
  if (spec_.head.classifier_bias) {
    bias_ = Parameter<T>("classifier.bias", Tensor<T>({classes, 1, 1, 1}), false);
  }
}

template <typename T>
Var ConvNet<T>::run_unit(Tape<T>& tape, ConvUnit<T>& unit, Var x, NormMode mode) {
  Var w = tape.param(unit.weight);
  Var y = tape.conv2d(x, w, unit.stride, unit.groups);
  Var gamma = tape.param(unit.bn.gamma);
  Var beta = tape.param(unit.bn.beta);
  y = tape.batchnorm(y, gamma, beta, unit.bn.running_mean, unit.bn.running_var, mode);
  if (unit.activation) y = tape.silu(y);
  return y;
}

template <typename T>
Var ConvNet<T>::features(Tape<T>& tape, Var image, NormMode mode) {
  const Shape s = tape.value(image).shape();
  if (s.c != spec_.in_channels) {
    throw ShapeError("model expects " + std::to_string(spec_.in_channels) +
                     " input channels, got " + std::to_string(s.c));
  }
  num_locations(rf_state(), {s.h, s.w});  // undersized input -> ConstraintError
  Var x = image;
  for (auto& block : blocks_) {
    Var shortcut = x;
    if (block.expand) x = run_unit(tape, *block.expand, x, mode);
    x = run_unit(tape, block.spatial, x, mode);
    if (block.project) x = run_unit(tape, *block.project, x, mode);
    if (block.residual) {
      x = tape.add(x, tape.center_crop(shortcut, block.crop_margin));
    }
  }
  if (head_) x = run_unit(tape, *head_, x, mode);
  return x;
}

template <typename T>
Var ConvNet<T>::logits_from_features(Tape<T>& tape, Var features) {
  Var pooled = tape.gap(features);
  Var w = tape.param(classifier_);
  if (bias_) return tape.linear(pooled, w, tape.param(*bias_));
  return tape.linear(pooled, w);
}

template <typename T>
Var ConvNet<T>::logits(Tape<T>& tape, Var image, NormMode mode) {
  return logits_from_features(tape, features(tape, image, mode));
}

template <typename T>
Tensor<T> ConvNet<T>::features(const Tensor<T>& image) const {
  // Inference mode never writes running statistics or gradients.
  auto& self = const_cast<ConvNet<T>&>(*this);
  Tape<T> tape(false);
  Var x = tape.input(image);
  return tape.value(self.features(tape, x, NormMode::kInfer));
}

template <typename T>
Tensor<T> ConvNet<T>::logits(const Tensor<T>& image) const {
  auto& self = const_cast<ConvNet<T>&>(*this);
  Tape<T> tape(false);
  Var x = tape.input(image);
  return tape.value(self.logits(tape, x, NormMode::kInfer));
}

template <typename T>
Tensor<T> ConvNet<T>::logits_from_features(const Tensor<T>& features) const {
  auto& self = const_cast<ConvNet<T>&>(*this);
  Tape<T> tape(false);
  Var x = tape.input(features);
  return tape.value(self.logits_from_features(tape, x));
}

template <typename T>
std::vector<std::vector<T>> ConvNet<T>::probabilities(const Tensor<T>& image) const {
  const Tensor<T> z = logits(image);
  const int classes = z.shape().c;
  std::vector<std::vector<T>> out;
  for (int n = 0; n < z.shape().n; ++n) {
    std::span<const T> row(z.raw() + static_cast<std::size_t>(n) * classes, classes);
    out.push_back(kernels::softmax<T>(row));
  }
  return out;
}

template <typename T>
std::vector<Parameter<T>*> ConvNet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto unit = [&out](ConvUnit<T>& u) {
    out.push_back(&u.weight);
    out.push_back(&u.bn.gamma);
    out.push_back(&u.bn.beta);
  };
  for (auto& b : blocks_) {
    if (b.expand) unit(*b.expand);
    unit(b.spatial);
    if (b.project) unit(*b.project);
  }
  if (head_) unit(*head_);
  out.push_back(&classifier_);
  if (bias_) out.push_back(&*bias_);
  return out;
}

template <typename T>
std::vector<StateEntry<T>> ConvNet<T>::state() {
  std::vector<StateEntry<T>> out;
  auto param = [&out](Parameter<T>& p) {
    out.push_back({p.name, p.value.shape(), p.value.data()});
  };
  auto unit = [&](ConvUnit<T>& u) {
    param(u.weight);
    param(u.bn.gamma);
    param(u.bn.beta);
    const int c = static_cast<int>(u.bn.running_mean.size());
    const std::string base = u.weight.name.substr(0, u.weight.name.size() - 7);
    out.push_back({base + ".bn.running_mean", {c, 1, 1, 1}, u.bn.running_mean});
    out.push_back({base + ".bn.running_var", {c, 1, 1, 1}, u.bn.running_var});
  };
  for (auto& b : blocks_) {
    if (b.expand) unit(*b.expand);
    unit(b.spatial);
    if (b.project) unit(*b.project);
  }
  if (head_) unit(*head_);
  param(classifier_);
  if (bias_) param(*bias_);
  return out;
}

template <typename T>
std::size_t ConvNet<T>::parameter_count() const {
  std::size_t total = 0;
  for (auto* p : const_cast<ConvNet<T>&>(*this).parameters()) total += p->value.size();
  return total;
}

template <typename T>
AnchorNetModel<T> build_anchornet(const ArchSpec& spec, std::uint64_t seed,
                                  std::optional<ImageSize> declared_input) {
  if (declared_input) num_locations(rf_state(spec), *declared_input);
  return AnchorNetModel<T>{ConvNet<T>(spec, seed), false};
}

template <typename T>
DownstreamModel<T> build_downstream(int num_classes, std::uint64_t seed,
                                    DownstreamVariant variant) {
  return DownstreamModel<T>{ConvNet<T>(ArchSpec::downstream(num_classes), seed), variant};
}

template <typename T>
std::vector<T> classify(const AnchorNetModel<T>& model, const Tensor<T>& image) {
  if (image.shape().n != 1) throw ShapeError("classify expects a single image");
  return model.net.probabilities(image).front();
}

template class ConvNet<float>;
template class ConvNet<double>;
template AnchorNetModel<float> build_anchornet(const ArchSpec&, std::uint64_t, std::optional<ImageSize>);
template AnchorNetModel<double> build_anchornet(const ArchSpec&, std::uint64_t, std::optional<ImageSize>);
template DownstreamModel<float> build_downstream(int, std::uint64_t, DownstreamVariant);
template DownstreamModel<double> build_downstream(int, std::uint64_t, DownstreamVariant);
template std::vector<float> classify(const AnchorNetModel<float>&, const Tensor<float>&);
template std::vector<double> classify(const AnchorNetModel<double>&, const Tensor<double>&);

}  // namespace anchornet
