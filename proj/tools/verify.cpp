// Quick invariant suite behind `advkit verify`. Each check is a smaller
// version of the corresponding test-suite property so it runs in seconds.

#include "verify.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "advkit/attacks.hpp"
#include "advkit/models.hpp"
#include "advkit/rng.hpp"
#include "advkit/transforms.hpp"

namespace advkit::cli {

namespace {

Tensor random_image(Rng& rng, const Geometry& g) {
  Tensor x(g.batch_shape(1));
  for (auto& v : x.data()) v = rng.uniform();
  return x;
}

Tensor random_like(Rng& rng, const Tensor& t) {
  Tensor out(t.shape());
  for (auto& v : out.data()) v = rng.uniform(-1.0, 1.0);
  return out;
}

ModelParams small_cnn(std::uint64_t seed) {
  const Geometry g{1, 12, 12};
  ModelSpec spec{"verify", {LayerSpec::conv2d(1, 3, 3), LayerSpec::relu(), LayerSpec::maxpool2(), LayerSpec::flatten(),
                            LayerSpec::dense(75, 4)},
                 g, 4};
  return init_model(spec, seed);
}

bool gradient_check(std::string& detail) {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const ModelParams model = small_cnn(trial + 1);
    Rng rng(trial + 100);
    const Tensor x = random_image(rng, model.input);
    const std::size_t label = trial % model.classes;
    const std::size_t labels[] = {label};
    const Tensor analytic = loss_and_input_gradient(model, x, labels).grad;
    const Tensor numeric = finite_difference_gradient([&](const Tensor& z) { return loss_value(model, z, labels); }, x, 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
      worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
  }
  detail = fmt::format("max relative error {:.3g}", worst);
  return worst < 1e-4;
}

bool adjoint_check(std::string& detail) {
  Rng rng(7);
  double worst = 0.0;
  const std::size_t side = 16;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_like(rng, Tensor({1, 1, side, side}));
    const Tensor y = random_like(rng, x);
    const CropPadParams c = sample_crop(rng, side, 10);
    worst = std::max(worst, std::abs(dot(apply_crop_pad(x, c), y) - dot(x, adjoint_crop_pad(y, c))));
    const DiverseInputParams d = sample_diverse_input(rng, side, 1.0);
    worst = std::max(worst, std::abs(dot(apply_diverse_input(x, d), y) - dot(x, adjoint_diverse_input(y, d))));
  }
  detail = fmt::format("max |<Cx,y> - <x,C^T y>| = {:.3g}", worst);
  return worst < 1e-10;
}

bool reduction_check(std::string& detail) {
  const ModelParams model = small_cnn(3);
  Rng rng(11);
  const Tensor x = random_image(rng, model.input);
  AttackConfig cfg;
  cfg.seed = 5;
  AttackConfig one = cfg;
  one.iterations = 1;
  AttackConfig still = cfg;
  still.mu = 0.0;
  AttackConfig ci = cfg;
  ci.crop_min_fraction = 1.0;
  ci.copies = 1;
  const bool a = i_fgsm(model, x, 1, one) == fgsm(model, x, 1, one);
  const bool b = mi_fgsm(model, x, 1, still) == i_fgsm(model, x, 1, cfg);
  const bool c = ni_fgsm(model, x, 1, still) == i_fgsm(model, x, 1, cfg);
  const bool d = run_attack(parse_variant("ci-mi-fgsm"), model, x, 1, ci) == mi_fgsm(model, x, 1, cfg);
  const bool e = run_attack(parse_variant("ci-ab-fgm"), model, x, 1, ci) == abi_fgm(model, x, 1, cfg);
  detail = fmt::format("T=1 {} | mu=0 MI {} | mu=0 NI {} | CI-MI {} | CI-AB {}", a, b, c, d, e);
  return a && b && c && d && e;
}

bool budget_check(std::string& detail) {
  const ModelParams model = small_cnn(4);
  Rng rng(13);
  const auto variants = {"fgsm", "i-fgsm", "mi-fgsm", "ni-fgsm", "abi-fgm", "si-ni-fgsm", "ci-ab-si-ti-dim", "ci-ni-ti-dim"};
  std::size_t trials = 0;
  double worst = 0.0;
  bool in_range = true;
  for (int round = 0; round < 25; ++round) {
    for (const char* v : variants) {
      AttackConfig cfg;
      cfg.epsilon = rng.uniform(0.0, 0.3);
      cfg.iterations = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
      cfg.seed = static_cast<std::uint64_t>(round);
      cfg.ti.size = 3;
      cfg.final_update = rng.bernoulli(0.5) ? FinalUpdate::sign_step : FinalUpdate::clip;
      const Tensor x = random_image(rng, model.input);
      const Tensor adv = run_attack(parse_variant(v), model, x, static_cast<std::size_t>(round % 4), cfg);
      worst = std::max(worst, linf_distance(adv, x) - cfg.epsilon);
      for (double p : adv.data()) in_range = in_range && p >= 0.0 && p <= 1.0;
      ++trials;
    }
  }
  detail = fmt::format("{} trials, max overshoot {:.3g}, in [0,1]: {}", trials, worst, in_range);
  return worst <= 1e-9 && in_range;
}

bool abi_geometry_check(std::string& detail) {
  const ModelParams model = small_cnn(5);
  Rng rng(17);
  double worst = 0.0;
  for (int run = 0; run < 10; ++run) {
    AttackConfig cfg;
    cfg.epsilon = rng.uniform(0.01, 0.1);
    const Tensor x = random_image(rng, model.input);
    abi_fgm(model, x, static_cast<std::size_t>(run % 4), cfg, [&](const IterationRecord& rec, const AttackState&) {
      if (!rec.step_skipped) worst = std::max(worst, std::abs(rec.pre_clip_l2 - cfg.step()));
    });
  }
  detail = fmt::format("max | ||dx||_2 - alpha | = {:.3g}", worst);
  return worst < 1e-6;
}

bool ti_check(std::string& detail) {
  const TiKernel k = gaussian_kernel(7, default_ti_sigma(7));
  double total = 0.0, asym = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      total += k.at(i, j);
      asym = std::max({asym, std::abs(k.at(i, j) - k.at(6 - i, 6 - j)), std::abs(k.at(i, j) - k.at(j, i))});
    }
  }
  Rng rng(19);
  const Tensor g = random_like(rng, Tensor({1, 1, 9, 9}));
  const bool identity = convolve_gradient(g, gaussian_kernel(1, 1.0)) == g;
  detail = fmt::format("sum-1 = {:.3g}, asymmetry {:.3g}, k=1 identity {}", total - 1.0, asym, identity);
  return std::abs(total - 1.0) < 1e-12 && asym == 0.0 && identity;
}

bool crc_check(std::string& detail) {
  const std::string s = "123456789";
  const auto crc = crc64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  detail = fmt::format("CRC-64/XZ(\"123456789\") = 0x{:016X}", crc);
  return crc == 0x995DC9BBDF1939FAULL;
}

}  // namespace

bool run_verify(std::FILE* out) {
  const std::vector<std::pair<const char*, std::function<bool(std::string&)>>> checks{
      {"gradient vs finite differences", gradient_check},
      {"crop/pad and DIM adjoints", adjoint_check},
      {"reduction equivalences", reduction_check},
      {"L-infinity and pixel range budget", budget_check},
      {"AdaBelief step length", abi_geometry_check},
      {"TI kernel", ti_check},
      {"checkpoint CRC", crc_check},
  };
  bool all = true;
  for (const auto& [name, check] : checks) {
    std::string detail;
    bool ok = false;
    try {
      ok = check(detail);
    } catch (const std::exception& e) {
      detail = fmt::format("threw: {}", e.what());
    }
    all = all && ok;
    fmt::print(out, "{} {}: {}\n", ok ? "PASS" : "FAIL", name, detail);
  }
  return all;
}

}  // namespace advkit::cli
