#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anchornet/dataset.hpp"
#include "anchornet/evaluation.hpp"
#include "anchornet/image_io.hpp"
#include "anchornet/manifest.hpp"
#include "anchornet/pipeline.hpp"
#include "anchornet/report.hpp"
#include "anchornet/rng.hpp"
#include "anchornet/trainer.hpp"
#include "anchornet/weights_io.hpp"

namespace fs = std::filesystem;
using namespace anchornet;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string manifest;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Run seed; all randomness derives from it")
      ->capture_default_str();
  sub->add_option("--manifest", c.manifest, "Where to write the run manifest");
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

// Every option of the subcommand with its parsed (or default) value.
nlohmann::ordered_json options_json(const CLI::App* sub) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--manifest") continue;
    std::string key = opt->get_name(false, true);
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    const auto& results = opt->results();
    if (!results.empty()) {
      j[key] = join(results, ",");
    } else if (opt->get_type_size() == 0) {
      j[key] = false;
    } else {
      j[key] = opt->get_default_str();
    }
  }
  return j;
}

void write_manifest(const CLI::App* sub, const Common& c, const fs::path& fallback,
                    std::vector<std::string> inputs, std::vector<std::string> outputs) {
  RunManifest m;
  m.command = sub->get_name();
  m.seed = c.seed;
  m.config = options_json(sub);
  m.inputs = std::move(inputs);
  m.outputs = std::move(outputs);
  const fs::path path = c.manifest.empty() ? fallback : fs::path(c.manifest);
  m.write(path);
}

fs::path beside(const fs::path& output, const std::string& suffix) {
  return fs::path(output.string() + suffix);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw FormatError("not a number: '" + item + "'");
    }
  }
  return out;
}

// Given values become rho_1.., the rest never exit.
ThresholdSchedule schedule_from(const std::vector<double>& given, int stages) {
  ThresholdSchedule s = ThresholdSchedule::never_exit(stages);
  if (given.size() > s.values.size()) {
    throw RangeError("got " + std::to_string(given.size()) + " thresholds for " +
                     std::to_string(stages) + " stages");
  }
  std::copy(given.begin(), given.end(), s.values.begin());
  return s;
}

Tensor<float> load_image(const fs::path& path) {
  const ImageU8 img = read_pnm(path);
  if (img.channels != 3) throw ShapeError(path.string() + ": expected an RGB (P6) image");
  return to_tensor(img);
}

struct Models {
  AnchorNetModel<float> anchornet;
  DownstreamModel<float> global;
  DownstreamModel<float> local;
};

Models load_models(const std::string& a, const std::string& g, const std::string& l) {
  return {load_anchornet(a), load_downstream(g), load_downstream(l)};
}

std::string counts_header(int stages) {
  std::string h;
  for (int t = 1; t <= stages; ++t) h += ",exit_count_" + std::to_string(t);
  return h;
}

std::string eval_row(double key, const EvalResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << key << "," << r.mean_flops << "," << r.accuracy;
  for (int c : r.exit_counts) os << "," << c;
  return os.str();
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw Error("cannot open " + out_path + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + out_path);
}

TrainConfig make_config(int epochs, int batch, double lr, const std::string& schedule,
                        double momentum, double wd, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.lr = lr;
  cfg.schedule = parse_schedule(schedule);
  cfg.momentum = momentum;
  cfg.weight_decay = wd;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

void print_log(const TrainLog& log) {
  for (const auto& e : log.epochs) {
    std::fprintf(stderr, "epoch %3d  lr %.5f  loss %.5f  acc %.4f\n", e.epoch, e.lr, e.loss,
                 e.accuracy);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AnchorNet patch proposals and early-exit inference"};
  app.require_subcommand(1);

  // rf-table
  Common rf_c;
  std::string rf_arch;
  int rf_input = 224;
  bool rf_csv = false;
  auto* rf = app.add_subcommand("rf-table", "Per-stage output size, kernel, RF and stride");
  rf->add_option("arch", rf_arch, "default | anchornet | downstream | architecture file")
      ->required();
  rf->add_option("--input", rf_input, "Square input side")->capture_default_str();
  rf->add_flag("--csv", rf_csv, "CSV instead of aligned text");
  add_common(rf, rf_c);

  // flops
  Common fl_c;
  std::string fl_arch;
  int fl_input = 224;
  int fl_classes = 1000;
  bool fl_csv = false;
  auto* fl = app.add_subcommand("flops", "Per-layer and total FLOPs (1 MAC = 1 FLOP)");
  fl->add_option("arch", fl_arch)->required();
  fl->add_option("input", fl_input, "Square input side")->required();
  fl->add_option("--classes", fl_classes)->capture_default_str();
  fl->add_flag("--csv", fl_csv);
  add_common(fl, fl_c);

  // generate
  Common gen_c;
  SyntheticConfig gen_cfg;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic textured-object dataset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--classes", gen_cfg.num_classes)->capture_default_str();
  gen->add_option("--per-class", gen_cfg.samples_per_class)->capture_default_str();
  gen->add_option("--min-object", gen_cfg.min_object)->capture_default_str();
  gen->add_option("--max-object", gen_cfg.max_object)->capture_default_str();
  add_common(gen, gen_c);

  // train-anchornet
  Common ta_c;
  std::string ta_data, ta_out, ta_log, ta_schedule = "step";
  int ta_epochs = 30, ta_batch = 16;
  double ta_lr = 0.1, ta_momentum = 0.9, ta_wd = 1e-4;
  auto* ta = app.add_subcommand("train-anchornet", "Stage I: train AnchorNet on full images");
  ta->add_option("--data", ta_data, "Dataset directory")->required();
  ta->add_option("--out", ta_out, "Weight file to write")->required();
  ta->add_option("--log", ta_log, "Training curve CSV (epoch,loss,accuracy)");
  ta->add_option("--epochs", ta_epochs)->capture_default_str();
  ta->add_option("--batch-size", ta_batch)->capture_default_str();
  ta->add_option("--lr", ta_lr)->capture_default_str();
  ta->add_option("--schedule", ta_schedule, "step | cosine")->capture_default_str();
  ta->add_option("--momentum", ta_momentum)->capture_default_str();
  ta->add_option("--weight-decay", ta_wd)->capture_default_str();
  add_common(ta, ta_c);

  // finetune
  Common ft_c;
  std::string ft_variant, ft_data, ft_out, ft_anchor, ft_init, ft_log, ft_schedule = "cosine";
  int ft_epochs = 10, ft_batch = 16;
  double ft_lr = 0.01, ft_momentum = 0.9, ft_wd = 1e-4;
  SelectionConfig ft_sel;
  bool ft_plain = false;
  auto* ft = app.add_subcommand("finetune", "Stage II: train a downstream classifier");
  ft->add_option("--variant", ft_variant, "global | local")->required();
  ft->add_option("--data", ft_data)->required();
  ft->add_option("--out", ft_out)->required();
  ft->add_option("--anchornet", ft_anchor, "Trained AnchorNet (needed for local)");
  ft->add_option("--init", ft_init, "Start from these downstream weights");
  ft->add_option("--log", ft_log);
  ft->add_option("--epochs", ft_epochs)->capture_default_str();
  ft->add_option("--batch-size", ft_batch)->capture_default_str();
  ft->add_option("--lr", ft_lr)->capture_default_str();
  ft->add_option("--schedule", ft_schedule)->capture_default_str();
  ft->add_option("--momentum", ft_momentum)->capture_default_str();
  ft->add_option("--weight-decay", ft_wd)->capture_default_str();
  ft->add_option("--patches", ft_sel.max_patches)->capture_default_str();
  ft->add_option("--iou", ft_sel.iou_threshold)->capture_default_str();
  ft->add_flag("--plain-global-normalization", ft_plain,
               "Average global losses per image without the 1/|X| factor");
  add_common(ft, ft_c);

  // infer
  Common inf_c;
  std::string inf_image, inf_a, inf_g, inf_l, inf_thr;
  SelectionConfig inf_sel;
  auto* inf = app.add_subcommand("infer", "Early-exit inference on one image (JSON lines)");
  inf->add_option("image", inf_image, "PPM image")->required();
  inf->add_option("anchornet", inf_a)->required();
  inf->add_option("global", inf_g)->required();
  inf->add_option("local", inf_l)->required();
  inf->add_option("--thresholds", inf_thr, "rho_1,rho_2,... (missing stages never exit)");
  inf->add_option("--patches", inf_sel.max_patches)->capture_default_str();
  inf->add_option("--iou", inf_sel.iou_threshold)->capture_default_str();
  add_common(inf, inf_c);

  // eval-anytime
  Common ea_c;
  std::string ea_data, ea_a, ea_g, ea_l, ea_out;
  SelectionConfig ea_sel;
  auto* ea = app.add_subcommand("eval-anytime", "Accuracy and FLOPs with every sample exiting at stage t");
  ea->add_option("--data", ea_data)->required();
  ea->add_option("--anchornet", ea_a)->required();
  ea->add_option("--global", ea_g)->required();
  ea->add_option("--local", ea_l)->required();
  ea->add_option("--out", ea_out, "CSV path (stdout if omitted)");
  ea->add_option("--patches", ea_sel.max_patches)->capture_default_str();
  ea->add_option("--iou", ea_sel.iou_threshold)->capture_default_str();
  add_common(ea, ea_c);

  // eval-budgeted
  Common eb_c;
  std::string eb_data, eb_val, eb_a, eb_g, eb_l, eb_out, eb_budgets, eb_fractions;
  SelectionConfig eb_sel;
  auto* eb = app.add_subcommand("eval-budgeted", "Tune thresholds per budget, then evaluate");
  eb->add_option("--data", eb_data, "Evaluation set")->required();
  eb->add_option("--val", eb_val, "Threshold tuning set (defaults to --data)");
  eb->add_option("--anchornet", eb_a)->required();
  eb->add_option("--global", eb_g)->required();
  eb->add_option("--local", eb_l)->required();
  eb->add_option("--budgets", eb_budgets, "Mean FLOPs budgets, comma separated");
  eb->add_option("--fractions", eb_fractions,
                 "Budgets as fractions of the full-pipeline cost on the tuning set");
  eb->add_option("--out", eb_out);
  eb->add_option("--patches", eb_sel.max_patches)->capture_default_str();
  eb->add_option("--iou", eb_sel.iou_threshold)->capture_default_str();
  add_common(eb, eb_c);

  // cam-dump
  Common cd_c;
  std::string cd_image, cd_a, cd_out, cd_id;
  int cd_scale = 8;
  SelectionConfig cd_sel;
  auto* cd = app.add_subcommand("cam-dump", "Write the CAM heatmap, selected boxes and an annotated image");
  cd->add_option("image", cd_image)->required();
  cd->add_option("anchornet", cd_a)->required();
  cd->add_option("--out-dir", cd_out)->required();
  cd->add_option("--image-id", cd_id, "Id column of boxes.csv (defaults to the file stem)");
  cd->add_option("--scale", cd_scale, "Heatmap pixels per grid cell")->capture_default_str();
  cd->add_option("--patches", cd_sel.max_patches)->capture_default_str();
  cd->add_option("--iou", cd_sel.iou_threshold)->capture_default_str();
  add_common(cd, cd_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*rf) {
      const ArchSpec spec = resolve_arch(rf_arch);
      std::cout << format_rf_table(spec, {rf_input, rf_input}, rf_csv);
      write_manifest(rf, rf_c, "rf-table.manifest.json", {rf_arch}, {"stdout"});
    } else if (*fl) {
      const ArchSpec spec = resolve_arch(fl_arch, fl_classes);
      std::cout << format_flops(count_flops(spec, {fl_input, fl_input}), fl_csv);
      write_manifest(fl, fl_c, "flops.manifest.json", {fl_arch}, {"stdout"});
    } else if (*gen) {
      gen_cfg.seed = gen_c.seed;
      const LabeledDataset ds = generate_synthetic(gen_cfg);
      save_dataset(ds, gen_out);
      std::fprintf(stderr, "wrote %zu images to %s\n", ds.size(), gen_out.c_str());
      write_manifest(gen, gen_c, fs::path(gen_out) / "manifest.json", {},
                     {(fs::path(gen_out) / "index.csv").string()});
    } else if (*ta) {
      const TrainConfig cfg = make_config(ta_epochs, ta_batch, ta_lr, ta_schedule, ta_momentum,
                                          ta_wd, ta_c.seed);
      const LabeledDataset ds = load_dataset(ta_data);
      auto model = build_anchornet<float>(ArchSpec::anchornet(ds.num_classes),
                                          SeedTree(ta_c.seed).split("anchornet.init").value());
      const TrainLog log = train_anchornet(model, ds, cfg);
      print_log(log);
      save_anchornet(ta_out, model);
      std::vector<std::string> outputs{ta_out};
      if (!ta_log.empty()) {
        log.write_csv(ta_log);
        outputs.push_back(ta_log);
      }
      write_manifest(ta, ta_c, beside(ta_out, ".manifest.json"), {ta_data}, outputs);
    } else if (*ft) {
      TrainConfig cfg = make_config(ft_epochs, ft_batch, ft_lr, ft_schedule, ft_momentum, ft_wd,
                                    ft_c.seed);
      cfg.literal_global_normalization = !ft_plain;
      const DownstreamVariant variant = parse_variant(ft_variant);
      const LabeledDataset ds = load_dataset(ft_data);
      DownstreamModel<float> f =
          ft_init.empty()
              ? build_downstream<float>(ds.num_classes,
                                        SeedTree(ft_c.seed).split(ft_variant + ".init").value(),
                                        variant)
              : load_downstream(ft_init);
      f.variant = variant;
      std::vector<std::string> inputs{ft_data};
      TrainLog log;
      if (variant == DownstreamVariant::kGlobal) {
        log = finetune_global(f, ds, cfg, ft_sel.max_patches + 1);
      } else {
        if (ft_anchor.empty()) throw StateError("--anchornet is required for the local variant");
        const auto anchornet = load_anchornet(ft_anchor);
        inputs.push_back(ft_anchor);
        log = finetune_local(f, ds, anchornet, ft_sel, cfg);
      }
      print_log(log);
      save_downstream(ft_out, f);
      std::vector<std::string> outputs{ft_out};
      if (!ft_log.empty()) {
        log.write_csv(ft_log);
        outputs.push_back(ft_log);
      }
      if (!ft_init.empty()) inputs.push_back(ft_init);
      write_manifest(ft, ft_c, beside(ft_out, ".manifest.json"), inputs, outputs);
    } else if (*inf) {
      const Models m = load_models(inf_a, inf_g, inf_l);
      inf_sel.validate();
      const int stages = inf_sel.max_patches + 1;
      const auto thresholds = schedule_from(parse_list(inf_thr), stages);
      const auto costs = CostModel::from_models(m.anchornet.net.spec(), m.global.net.spec(),
                                                m.local.net.spec(), {224, 224});
      const Tensor<float> image = load_image(inf_image);
      const InferenceTrace trace = run_pipeline(image, m.anchornet, m.global, m.local, inf_sel,
                                                thresholds, costs);
      for (std::size_t t = 0; t < trace.scores.size(); ++t) {
        nlohmann::ordered_json line;
        line["stage"] = t + 1;
        line["confidence"] = trace.confidence[t];
        line["exit"] = static_cast<int>(t + 1) == trace.exit_stage;
        line["class"] = argmax(trace.scores[t]);
        line["flops"] = costs.flops_for(static_cast<int>(t + 1));
        std::cout << line.dump() << "\n";
      }
      nlohmann::ordered_json summary;
      summary["exit_stage"] = trace.exit_stage;
      summary["class"] = trace.predicted_class;
      summary["flops"] = trace.flops;
      summary["sequence_length"] = trace.sequence_length;
      std::cout << summary.dump() << "\n";
      write_manifest(inf, inf_c, "infer.manifest.json", {inf_image, inf_a, inf_g, inf_l},
                     {"stdout"});
    } else if (*ea) {
      const Models m = load_models(ea_a, ea_g, ea_l);
      ea_sel.validate();
      const int stages = ea_sel.max_patches + 1;
      const LabeledDataset ds = load_dataset(ea_data);
      const auto costs = CostModel::from_models(m.anchornet.net.spec(), m.global.net.spec(),
                                                m.local.net.spec(), {224, 224});
      const auto records = collect_stage_records(ds, m.anchornet, m.global, m.local, ea_sel);
      std::string csv = "stage,mean_flops,accuracy" + counts_header(stages) + "\n";
      for (int t = 1; t <= stages; ++t) {
        csv += eval_row(t, anytime_eval(records, costs, t, stages)) + "\n";
      }
      emit(csv, ea_out);
      write_manifest(ea, ea_c, ea_out.empty() ? fs::path("eval-anytime.manifest.json")
                                               : beside(ea_out, ".manifest.json"),
                     {ea_data, ea_a, ea_g, ea_l}, {ea_out.empty() ? "stdout" : ea_out});
    } else if (*eb) {
      const Models m = load_models(eb_a, eb_g, eb_l);
      eb_sel.validate();
      const int stages = eb_sel.max_patches + 1;
      const auto costs = CostModel::from_models(m.anchornet.net.spec(), m.global.net.spec(),
                                                m.local.net.spec(), {224, 224});
      const LabeledDataset test = load_dataset(eb_data);
      const auto test_records = collect_stage_records(test, m.anchornet, m.global, m.local, eb_sel);
      std::vector<StageRecord> val_records;
      if (eb_val.empty()) {
        val_records = test_records;
      } else {
        val_records = collect_stage_records(load_dataset(eb_val), m.anchornet, m.global,
                                            m.local, eb_sel);
      }
      std::vector<double> budgets = parse_list(eb_budgets);
      const double full =
          budgeted_eval(val_records, costs, ThresholdSchedule::never_exit(stages), stages)
              .mean_flops;
      for (double f : parse_list(eb_fractions)) budgets.push_back(f * full);
      if (budgets.empty()) throw ConstraintError("give --budgets or --fractions");
      std::string csv = "budget,mean_flops,accuracy" + counts_header(stages) + "\n";
      for (double b : budgets) {
        try {
          const TuneResult tuned = tune_thresholds(val_records, costs, b, stages);
          csv += eval_row(b, budgeted_eval(test_records, costs, tuned.schedule, stages)) + "\n";
        } catch (const InfeasibleError& e) {
          std::fprintf(stderr, "skipping budget %.0f: %s\n", b, e.what());
        }
      }
      emit(csv, eb_out);
      std::vector<std::string> inputs{eb_data, eb_a, eb_g, eb_l};
      if (!eb_val.empty()) inputs.push_back(eb_val);
      write_manifest(eb, eb_c, eb_out.empty() ? fs::path("eval-budgeted.manifest.json")
                                               : beside(eb_out, ".manifest.json"),
                     inputs, {eb_out.empty() ? "stdout" : eb_out});
    } else if (*cd) {
      const auto anchornet = load_anchornet(cd_a);
      cd_sel.validate();
      const ImageU8 raw = read_pnm(cd_image);
      if (raw.channels != 3) throw ShapeError(cd_image + ": expected an RGB (P6) image");
      const PatchProposal p = propose_patches(to_tensor(raw), anchornet, cd_sel);
      const fs::path dir(cd_out);
      fs::create_directories(dir);
      write_pgm(dir / "cam.pgm", heatmap(p.cam.values, p.cam.rows, p.cam.cols, cd_scale));
      const std::string id = cd_id.empty() ? fs::path(cd_image).stem().string() : cd_id;
      std::ostringstream boxes;
      boxes << "image_id,rank,top,left,size,activation\n";
      ImageU8 annotated = raw;
      for (std::size_t r = 0; r < p.patches.size(); ++r) {
        const PatchBox& b = p.patches[r].box;
        boxes << id << "," << r + 1 << "," << b.top << "," << b.left << "," << b.height << ","
              << p.patches[r].activation << "\n";
        // Top patch in red, the rest in yellow.
        draw_box(annotated, b, 255, r == 0 ? 0 : 255, 0);
      }
      emit(boxes.str(), (dir / "boxes.csv").string());
      write_ppm(dir / "annotated.ppm", annotated);
      write_manifest(cd, cd_c, dir / "manifest.json", {cd_image, cd_a},
                     {(dir / "cam.pgm").string(), (dir / "boxes.csv").string(),
                      (dir / "annotated.ppm").string()});
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
