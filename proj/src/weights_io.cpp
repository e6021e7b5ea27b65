#include "anchornet/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace anchornet {

namespace {

constexpr char kMagic[5] = {'A', 'N', 'E', 'T', '1'};

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

std::string header_text(const WeightFile& f) {
  std::ostringstream h;
  h << "kind " << (f.kind == ModelKind::kAnchorNet ? "anchornet" : "downstream") << "\n";
  h << "variant " << (f.variant ? to_string(*f.variant) : "-") << "\n";
  h << "trained " << (f.trained ? 1 : 0) << "\n";
  const std::string spec = f.spec.to_text();
  h << "spec " << spec.size() << "\n" << spec;
  h << "arrays " << f.arrays.size() << "\n";
  for (const auto& a : f.arrays) {
    if (a.data.size() != a.shape.numel()) {
      throw ShapeError("array " + a.name + " holds " + std::to_string(a.data.size()) +
                       " values for shape " + a.shape.str());
    }
    if (a.name.find_first_of(" \n") != std::string::npos) {
      throw FormatError("array name '" + a.name + "' contains whitespace");
    }
    h << "array " << a.name << " " << a.shape.n << " " << a.shape.c << " " << a.shape.h
      << " " << a.shape.w << "\n";
  }
  return h.str();
}

template <typename T>
T expect_field(std::istream& in, const std::string& key, const std::string& where) {
  std::string k;
  T v{};
  if (!(in >> k) || k != key || !(in >> v)) {
    throw FormatError(where + ": expected '" + key + "' in header");
  }
  return v;
}

}  // namespace

void write_weight_file(const std::filesystem::path& path, const WeightFile& file) {
  const std::string header = header_text(file);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t len = to_le(static_cast<std::uint32_t>(header.size()));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& a : file.arrays) {
    for (float v : a.data) {
      std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

WeightFile read_weight_file(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + where);
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(where + ": not an ANET1 weight file");
  }
  std::uint32_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) {
    throw FormatError(where + ": truncated header length");
  }
  len = to_le(len);
  if (len > (64u << 20)) throw FormatError(where + ": implausible header length");
  std::string header(len, '\0');
  if (!in.read(header.data(), len)) throw FormatError(where + ": truncated header");

  WeightFile f;
  std::istringstream h(header);
  const auto kind = expect_field<std::string>(h, "kind", where);
  if (kind == "anchornet") {
    f.kind = ModelKind::kAnchorNet;
  } else if (kind == "downstream") {
    f.kind = ModelKind::kDownstream;
  } else {
    throw FormatError(where + ": unknown model kind '" + kind + "'");
  }
  const auto variant = expect_field<std::string>(h, "variant", where);
  if (variant != "-") f.variant = parse_variant(variant);
  f.trained = expect_field<int>(h, "trained", where) != 0;
  const auto spec_len = expect_field<std::size_t>(h, "spec", where);
  h.get();  // newline after the length
  std::string spec(spec_len, '\0');
  if (!h.read(spec.data(), static_cast<std::streamsize>(spec_len))) {
    throw FormatError(where + ": truncated architecture text");
  }
  f.spec = ArchSpec::parse(spec);
  const auto count = expect_field<std::size_t>(h, "arrays", where);
  for (std::size_t i = 0; i < count; ++i) {
    NamedArray a;
    std::string tag;
    if (!(h >> tag >> a.name >> a.shape.n >> a.shape.c >> a.shape.h >> a.shape.w) ||
        tag != "array") {
      throw FormatError(where + ": malformed array entry " + std::to_string(i));
    }
    validate_shape(a.shape);
    f.arrays.push_back(std::move(a));
  }
  for (auto& a : f.arrays) {
    a.data.resize(a.shape.numel());
    for (float& v : a.data) {
      std::uint32_t bits;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) {
        throw FormatError(where + ": payload ends inside array " + a.name);
      }
      v = std::bit_cast<float>(to_le(bits));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(where + ": trailing bytes after payload");
  }
  return f;
}

std::vector<NamedArray> snapshot(ConvNet<float>& net) {
  std::vector<NamedArray> out;
  for (const auto& e : net.state()) {
    out.push_back({e.name, e.shape, std::vector<float>(e.data.begin(), e.data.end())});
  }
  return out;
}

void restore(ConvNet<float>& net, const std::vector<NamedArray>& arrays) {
  auto state = net.state();
  if (state.size() != arrays.size()) {
    throw FormatError("weight file has " + std::to_string(arrays.size()) +
                      " arrays, model expects " + std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state[i].name != arrays[i].name || !(state[i].shape == arrays[i].shape)) {
      throw FormatError("array " + std::to_string(i) + " is " + arrays[i].name + " " +
                        arrays[i].shape.str() + ", model expects " + state[i].name + " " +
                        state[i].shape.str());
    }
    std::copy(arrays[i].data.begin(), arrays[i].data.end(), state[i].data.begin());
  }
}

void save_anchornet(const std::filesystem::path& path, AnchorNetModel<float>& model) {
  write_weight_file(path, {ModelKind::kAnchorNet, std::nullopt, model.trained,
                           model.net.spec(), snapshot(model.net)});
}

AnchorNetModel<float> load_anchornet(const std::filesystem::path& path) {
  const WeightFile f = read_weight_file(path);
  if (f.kind != ModelKind::kAnchorNet) {
    throw FormatError(path.string() + ": holds a downstream model, not AnchorNet");
  }
  AnchorNetModel<float> model{ConvNet<float>(f.spec, 0), f.trained};
  restore(model.net, f.arrays);
  return model;
}

void save_downstream(const std::filesystem::path& path, DownstreamModel<float>& model) {
  write_weight_file(path, {ModelKind::kDownstream, model.variant, true, model.net.spec(),
                           snapshot(model.net)});
}

DownstreamModel<float> load_downstream(const std::filesystem::path& path) {
  const WeightFile f = read_weight_file(path);
  if (f.kind != ModelKind::kDownstream) {
    throw FormatError(path.string() + ": holds AnchorNet, not a downstream model");
  }
  DownstreamModel<float> model{ConvNet<float>(f.spec, 0),
                               f.variant.value_or(DownstreamVariant::kGlobal)};
  restore(model.net, f.arrays);
  return model;
}

}  // namespace anchornet
