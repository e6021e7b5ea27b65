#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "anchornet/error.hpp"
#include "anchornet/trainer.hpp"
#include "test_util.hpp"

using namespace anchornet;

namespace {

// Small images whose class shifts one channel's brightness.
LabeledDataset toy_dataset(int n, int classes, int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 120);
  LabeledDataset ds;
  ds.num_classes = classes;
  for (int i = 0; i < n; ++i) {
    LabeledImage item;
    item.label = i % classes;
    item.image = ImageU8(3, side, side);
    for (std::size_t k = 0; k < item.image.data.size(); ++k) item.image.data[k] = px(rng);
    const int c = item.label % 3;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) item.image.at(c, y, x) += 100;
    ds.items.push_back(std::move(item));
  }
  return ds;
}

ArchSpec tiny_spec(int classes) {
  ArchSpec s;
  s.name = "tiny";
  s.stages = {{StageOp::kConv, 3, 1.0, 4, 2}, {StageOp::kMBConv, 3, 2.0, 4, 1}};
  s.head = {0, classes, false};
  return s;
}

std::vector<float> flatten(ConvNet<float>& net) {
  std::vector<float> out;
  for (auto* p : net.parameters()) out.insert(out.end(), p->value.data().begin(), p->value.data().end());
  return out;
}

// Per-sample definition of the objective: (1/|D|) sum scale_i * CE_i, with
// every sample evaluated on its own.
double per_sample_objective(const ConvNet<float>& net, const SampleSet& set) {
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Tensor<float> z = net.logits(set.load(i));
    std::vector<double> zd(z.data().begin(), z.data().end());
    const auto p = kernels::softmax<double>(zd);
    total += set.scales[i] * cross_entropy(p, set.labels[i]).loss;
  }
  return total / static_cast<double>(set.num_groups);
}

}  // namespace

TEST_CASE("cross entropy") {
  const std::vector<double> sure{1.0, 0.0, 0.0};
  CHECK(cross_entropy(sure, 0).loss == doctest::Approx(0.0));
  CHECK(cross_entropy(sure, 1).loss == doctest::Approx(-std::log(1e-12)));
  for (int n : {2, 5, 1000}) {
    const std::vector<double> u(n, 1.0 / n);
    CHECK(cross_entropy(u, n - 1).loss == doctest::Approx(std::log(n)));
  }
  const std::vector<double> p{0.75, 0.25};
  const auto ce = cross_entropy(p, 1);
  CHECK(ce.loss == doctest::Approx(std::log(4.0)));
  CHECK(ce.grad_logits[0] == doctest::Approx(0.75));
  CHECK(ce.grad_logits[1] == doctest::Approx(-0.75));
  CHECK_THROWS_AS(cross_entropy(p, 2), RangeError);
}

TEST_CASE("learning rate schedules") {
  TrainConfig step;
  step.epochs = 10;
  step.lr = 0.1;
  CHECK(step.lr_at(0) == doctest::Approx(0.1));
  CHECK(step.lr_at(2) == doctest::Approx(0.1));
  CHECK(step.lr_at(3) == doctest::Approx(0.01));
  CHECK(step.lr_at(6) == doctest::Approx(0.001));
  CHECK(step.lr_at(9) == doctest::Approx(0.0001));

  TrainConfig cos = step;
  cos.schedule = LrSchedule::kCosine;
  cos.lr = 0.01;
  CHECK(cos.lr_at(0) == doctest::Approx(0.01));
  CHECK(cos.lr_at(5) == doctest::Approx(0.005));
  for (int e = 1; e < 10; ++e) CHECK(cos.lr_at(e) < cos.lr_at(e - 1));

  CHECK(parse_schedule("cosine") == LrSchedule::kCosine);
  CHECK(to_string(parse_schedule("step")) == "step");
  CHECK_THROWS_AS(parse_schedule("linear"), FormatError);

  TrainConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConstraintError);
  bad = TrainConfig{};
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConstraintError);
}

TEST_CASE("sgd momentum update") {
  Parameter<float> w("w", Tensor<float>({1, 1, 1, 2}, std::vector<float>{1.0f, -2.0f}));
  w.grad = Tensor<float>({1, 1, 1, 2}, std::vector<float>{0.5f, 0.5f});
  std::vector<Parameter<float>*> ps{&w};
  Sgd opt(0.9, 0.1);
  opt.step(ps, 0.1);
  // v = g + wd w
  CHECK(w.value[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.1)));
  CHECK(w.value[1] == doctest::Approx(-2.0 - 0.1 * (0.5 - 0.2)));
  const double v0 = 0.6;
  const double w0 = w.value[0];
  opt.step(ps, 0.1);
  CHECK(w.value[0] == doctest::Approx(w0 - 0.1 * (0.9 * v0 + 0.5 + 0.1 * w0)));
}

TEST_CASE("weight decay leaves batchnorm parameters alone") {
  ConvNet<float> net(tiny_spec(3), 1);
  auto params = net.parameters();
  std::vector<std::vector<float>> before;
  for (auto* p : params) {
    before.emplace_back(p->value.data().begin(), p->value.data().end());
    p->zero_grad();
  }
  Sgd opt(0.0, 0.01);
  opt.step(params, 0.5);
  int bn = 0, decayed = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    const bool is_bn = p.name.find(".bn.") != std::string::npos;
    CHECK(p.decay == !is_bn);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double delta = p.value[i] - before[k][i];
      if (is_bn) {
        CHECK(delta == 0.0);
      } else {
        CHECK(delta == doctest::Approx(-0.5 * 0.01 * before[k][i]));
      }
    }
    bn += is_bn;
    decayed += !is_bn;
  }
  CHECK(bn > 0);
  CHECK(decayed > 0);
}

TEST_CASE("sample sets carry the loss scales") {
  const auto ds = toy_dataset(6, 3, 24, 1);
  const auto a = anchornet_samples(ds);
  CHECK(a.num_groups == 6);
  CHECK(a.scales == std::vector<double>(6, 1.0));
  CHECK(a.load(2).shape() == Shape{1, 3, 24, 24});

  const auto lit = global_samples(ds, 5, true);
  CHECK(lit.scales.front() == doctest::Approx(0.2));
  CHECK(lit.load(0).shape() == Shape{1, 3, 95, 95});
  const auto plain = global_samples(ds, 5, false);
  CHECK(plain.scales.front() == 1.0);

  const std::vector<std::vector<PatchBox>> plan{
      {{0, 0, 8, 8}, {4, 4, 8, 8}}, {}, {{1, 2, 8, 8}}, {}, {}, {{0, 0, 8, 8}}};
  const auto loc = local_samples(ds, plan);
  CHECK(loc.num_groups == 6);
  CHECK(loc.size() == 4);
  CHECK(loc.group == std::vector<std::size_t>{0, 0, 2, 5});
  CHECK(loc.scales[0] == doctest::Approx(1.0 / 3));
  CHECK(loc.scales[2] == doctest::Approx(0.5));
  const auto patch = loc.load(2);
  CHECK(patch.shape() == Shape{1, 3, 8, 8});
  CHECK(patch.at(0, 1, 0, 0) == doctest::Approx(ds.items[2].image.at(1, 1, 2) / 255.0));

  CHECK_THROWS_AS(local_samples(ds, {{{0, 0, 8, 8}, {0, 0, 9, 9}}, {}, {}, {}, {}, {}}),
                  ShapeError);
  CHECK_THROWS_AS(local_samples(ds, {{}}), ShapeError);
}

TEST_CASE("batchwise objective equals the per-sample definition") {
  const auto ds = toy_dataset(11, 3, 24, 2);
  ConvNet<float> net(tiny_spec(3), 2);
  const std::vector<std::vector<PatchBox>> plan{
      {{0, 0, 12, 12}, {8, 8, 12, 12}}, {}, {{1, 2, 12, 12}}, {},
      {{3, 3, 12, 12}, {0, 9, 12, 12}, {9, 0, 12, 12}}, {}, {}, {{0, 0, 12, 12}},
      {}, {{5, 5, 12, 12}}, {}};
  for (const SampleSet& set :
       {anchornet_samples(ds), global_samples(ds, 5, true), local_samples(ds, plan)}) {
    const double oracle = per_sample_objective(net, set);
    for (int batch : {1, 2, 3, 7, 11, 64}) {
      CHECK(std::abs(evaluate_set(net, set, batch).objective - oracle) < 1e-6);
    }
  }
}

TEST_CASE("weighted loss gradient of a miniature network") {
  // Same objective as a training batch, in double, against central differences.
  const ArchSpec spec = tiny_spec(3);
  ConvNet<double> net(spec, 5);
  std::mt19937_64 rng(5);
  const auto x = testutil::random_tensor({3, 3, 13, 13}, rng);
  const std::vector<int> labels{2, 0, 1};
  const std::vector<double> weights{0.5, 0.25, 1.0 / 6};
  auto loss = [&]() {
    Tape<double> tape(false);
    const Var z = net.logits(tape, tape.input(x), NormMode::kTrain);
    return tape.value(tape.softmax_cross_entropy(z, labels, weights))[0];
  };
  auto params = net.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    const Var z = net.logits(tape, tape.input(x), NormMode::kTrain);
    tape.backward(tape.softmax_cross_entropy(z, labels, weights));
  }
  for (auto* p : params) {
    const Tensor<double> analytic = p->grad;
    Tensor<double> numeric(p->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-5;
      const double up = loss();
      p->value[i] = keep - 1e-5;
      const double down = loss();
      p->value[i] = keep;
      numeric[i] = (up - down) / 2e-5;
    }
    CHECK_MESSAGE(testutil::rel_error(analytic, numeric) < 1e-4, p->name);
  }
}

TEST_CASE("one sample: a step reduces its loss") {
  const auto ds = toy_dataset(1, 2, 24, 3);
  AnchorNetModel<float> m{ConvNet<float>(tiny_spec(2), 3)};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 0.01;
  cfg.momentum = 0.0;
  const auto log = train_anchornet(m, ds, cfg);
  REQUIRE(log.epochs.size() == 2);
  CHECK(log.epochs[1].loss < log.epochs[0].loss);
  CHECK(log.updates == 2);
  CHECK(m.trained);
}

TEST_CASE("training is bit-identical under a fixed seed") {
  const auto ds = toy_dataset(20, 3, 24, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr = 0.05;
  cfg.seed = 9;
  AnchorNetModel<float> a{ConvNet<float>(tiny_spec(3), 1)};
  AnchorNetModel<float> b{ConvNet<float>(tiny_spec(3), 1)};
  const auto la = train_anchornet(a, ds, cfg);
  const auto lb = train_anchornet(b, ds, cfg);
  CHECK(flatten(a.net) == flatten(b.net));
  for (std::size_t e = 0; e < la.epochs.size(); ++e) CHECK(la.epochs[e].loss == lb.epochs[e].loss);

  AnchorNetModel<float> c{ConvNet<float>(tiny_spec(3), 1)};
  cfg.seed = 10;
  train_anchornet(c, ds, cfg);
  CHECK(flatten(a.net) != flatten(c.net));
}

TEST_CASE("training loss falls on a learnable toy set") {
  const auto ds = toy_dataset(48, 3, 24, 5);
  AnchorNetModel<float> m{ConvNet<float>(tiny_spec(3), 2)};
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.lr = 0.1;
  const auto log = train_anchornet(m, ds, cfg);
  CHECK(log.epochs.back().loss < log.epochs.front().loss);
  CHECK(log.epochs.back().accuracy > 1.0 / 3);
  CHECK(log.updates == 8u * 6);
}

TEST_CASE("global fine-tuning changes the model and lowers its loss") {
  const auto ds = toy_dataset(24, 2, 100, 6);
  auto f = build_downstream<float>(2, 1);
  const auto before = flatten(f.net);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 6;
  cfg.lr = 0.02;
  cfg.schedule = LrSchedule::kCosine;
  const auto log = finetune_global(f, ds, cfg, 5);
  CHECK(flatten(f.net) != before);
  CHECK(log.epochs.back().loss < log.epochs.front().loss);
}

TEST_CASE("local fine-tuning") {
  const auto ds = toy_dataset(6, 2, 100, 7);
  auto f = build_downstream<float>(2, 1);
  AnchorNetModel<float> anchor = build_anchornet<float>(ArchSpec::anchornet(2), 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  CHECK_THROWS_AS(finetune_local(f, ds, anchor, {}, cfg), StateError);
  anchor.trained = true;
  const auto log = finetune_local(f, ds, anchor, {0.3, 2}, cfg);
  CHECK(log.updates == 2);
  CHECK(std::isfinite(log.epochs[0].loss));
}

TEST_CASE("images without patches contribute nothing and training still ends") {
  const auto ds = toy_dataset(5, 2, 24, 8);
  ConvNet<float> net(tiny_spec(2), 1);
  const auto before = flatten(net);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  const auto none = local_samples(ds, std::vector<std::vector<PatchBox>>(5));
  const auto log = train_classifier(net, none, cfg, "local");
  CHECK(log.updates == 0);
  CHECK(log.epochs.size() == 2);
  CHECK(log.epochs[0].loss == 0.0);
  CHECK(flatten(net) == before);
}

TEST_CASE("class mismatch, empty data and divergence are reported") {
  const auto ds = toy_dataset(8, 2, 24, 9);
  AnchorNetModel<float> wrong{ConvNet<float>(tiny_spec(3), 1)};
  CHECK_THROWS_AS(train_anchornet(wrong, ds, {}), ShapeError);
  AnchorNetModel<float> m{ConvNet<float>(tiny_spec(2), 1)};
  CHECK_THROWS_AS(train_anchornet(m, LabeledDataset{2, {}}, {}), ConstraintError);

  TrainConfig wild;
  wild.epochs = 3;
  wild.batch_size = 2;
  wild.lr = 1e38;
  CHECK_THROWS_AS(train_anchornet(m, ds, wild), DivergenceError);
}

TEST_CASE("training log csv") {
  TrainLog log;
  log.epochs = {{1, 0.1, 1.5, 0.25}, {2, 0.1, 1.25, 0.5}};
  const auto path = std::filesystem::temp_directory_path() / "anchornet_log_test.csv";
  log.write_csv(path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "epoch,loss,accuracy");
  CHECK(row == "1,1.5,0.25");
  std::filesystem::remove(path);
}
