#include "advkit/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "advkit/errors.hpp"

namespace advkit {

const char* direction_rule_name(DirectionRule rule) {
  switch (rule) {
    case DirectionRule::sign_step: return "sign-step";
    case DirectionRule::sign_momentum: return "sign-momentum";
    case DirectionRule::sign_nesterov: return "sign-nesterov";
    case DirectionRule::adabelief_l2: return "adabelief-l2";
  }
  return "?";
}

const char* final_update_name(FinalUpdate update) {
  return update == FinalUpdate::clip ? "clip" : "sign_step";
}

const char* fusion_name(EnsembleFusion fusion) { return fusion == EnsembleFusion::loss ? "loss" : "logits"; }

FinalUpdate parse_final_update(const std::string& name) {
  if (name == "clip") return FinalUpdate::clip;
  if (name == "sign_step") return FinalUpdate::sign_step;
  throw ConfigError(fmt::format("unknown final_update '{}' (clip, sign_step)", name));
}

EnsembleFusion parse_fusion(const std::string& name) {
  if (name == "loss") return EnsembleFusion::loss;
  if (name == "logits") return EnsembleFusion::logits;
  throw ConfigError(fmt::format("unknown ensemble fusion '{}' (loss, logits)", name));
}

// ---------------------------------------------------------------------------
// Configuration

std::size_t AttackConfig::copy_count() const {
  if (copies != 0) return copies;
  return (crops || scale != ScaleMode::off) ? 5 : 1;
}

std::vector<double> AttackConfig::copy_weights() const {
  const std::size_t m = copy_count();
  if (!weights.empty()) return weights;
  return std::vector<double>(m, 1.0 / static_cast<double>(m));
}

std::size_t AttackConfig::min_crop(std::size_t side) const {
  const auto rnd = static_cast<std::size_t>(std::floor(static_cast<double>(side) * crop_min_fraction + 1e-9));
  return std::clamp<std::size_t>(rnd, 1, side);
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("attack config: " + what); };
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) fail(fmt::format("epsilon must be non-negative, got {}", epsilon));
  if (iterations < 1) fail("iterations must be at least 1");
  if (alpha && !(*alpha > 0.0 || (*alpha == 0.0 && epsilon == 0.0))) fail(fmt::format("alpha must be positive, got {}", *alpha));
  if (!(mu >= 0.0)) fail(fmt::format("mu must be non-negative, got {}", mu));
  if (!(beta1 > 0.0 && beta1 < 1.0)) fail(fmt::format("beta1 must lie in (0, 1), got {}", beta1));
  if (!(beta2 > 0.0 && beta2 < 1.0)) fail(fmt::format("beta2 must lie in (0, 1), got {}", beta2));
  if (!(delta > 0.0)) fail(fmt::format("delta must be positive, got {}", delta));
  const std::size_t m = copy_count();
  if (!weights.empty()) {
    if (weights.size() != m) fail(fmt::format("{} weights for {} copies", weights.size(), m));
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) fail("copy weights must be non-negative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) fail(fmt::format("copy weights sum to {}, not 1", total));
  }
  if (!(dim_probability >= 0.0 && dim_probability <= 1.0)) {
    fail(fmt::format("DIM probability must lie in [0, 1], got {}", dim_probability));
  }
  if (!(crop_min_fraction > 0.0 && crop_min_fraction <= 1.0)) {
    fail(fmt::format("crop min fraction must lie in (0, 1], got {}", crop_min_fraction));
  }
  if (forced_scale && !(*forced_scale > 0.0 && *forced_scale <= 1.0)) {
    fail(fmt::format("forced scale must lie in (0, 1], got {}", *forced_scale));
  }
  if (ti.enabled) {
    if (ti.size % 2 == 0) fail(fmt::format("TI kernel size must be odd, got {}", ti.size));
    if (ti.sigma < 0.0) fail(fmt::format("TI sigma must be non-negative, got {}", ti.sigma));
  }
  if (!(lo < hi)) fail(fmt::format("pixel range [{}, {}] is empty", lo, hi));
}

// ---------------------------------------------------------------------------
// Variants

namespace {

struct BaseName {
  BaseMethod base;
  const char* plain;
  const char* stem;
};

constexpr std::array kBases{
    BaseName{BaseMethod::fgsm, "fgsm", nullptr},
    BaseName{BaseMethod::i_fgsm, "i-fgsm", "i"},
    BaseName{BaseMethod::mi_fgsm, "mi-fgsm", "mi"},
    BaseName{BaseMethod::ni_fgsm, "ni-fgsm", "ni"},
    BaseName{BaseMethod::abi_fgm, "abi-fgm", "ab"},
    BaseName{BaseMethod::si_ni_fgsm, "si-ni-fgsm", "si-ni"},
    BaseName{BaseMethod::ci_mi_fgsm, "ci-mi-fgsm", "ci-mi"},
    BaseName{BaseMethod::ci_ni_fgsm, "ci-ni-fgsm", "ci-ni"},
    BaseName{BaseMethod::ci_ab_fgm, "ci-ab-fgm", "ci-ab"},
};

struct AugName {
  Augmentation aug;
  const char* suffix;
};

// Longest suffix first so "-si-ti-dim" wins over "-ti-dim" and "-dim".
constexpr std::array kAugs{
    AugName{Augmentation::si_ti_dim, "si-ti-dim"}, AugName{Augmentation::ti_dim, "ti-dim"},
    AugName{Augmentation::dim, "dim"},             AugName{Augmentation::tim, "tim"},
    AugName{Augmentation::sim, "sim"},
};

bool is_crop_base(BaseMethod b) {
  return b == BaseMethod::ci_mi_fgsm || b == BaseMethod::ci_ni_fgsm || b == BaseMethod::ci_ab_fgm;
}

}  // namespace

Variant parse_variant(const std::string& raw) {
  std::string name;
  for (char c : raw) name += c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const auto& b : kBases) {
    if (name == b.plain) return {b.base, Augmentation::none};
  }
  if (name == "ab-fgm") return {BaseMethod::abi_fgm, Augmentation::none};
  for (const auto& a : kAugs) {
    const std::string suffix = std::string("-") + a.suffix;
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
      const std::string stem = name.substr(0, name.size() - suffix.size());
      for (const auto& b : kBases) {
        if (b.stem && stem == b.stem) return {b.base, a.aug};
      }
    }
  }
  throw ConfigError(fmt::format("unknown attack variant '{}'", raw));
}

std::string variant_name(Variant v) {
  for (const auto& b : kBases) {
    if (b.base != v.base) continue;
    if (v.aug == Augmentation::none) return b.plain;
    for (const auto& a : kAugs) {
      if (a.aug == v.aug) return fmt::format("{}-{}", b.stem, a.suffix);
    }
  }
  return "?";
}

AttackConfig resolve_variant(Variant v, AttackConfig cfg) {
  if (v.base == BaseMethod::fgsm && v.aug != Augmentation::none) {
    throw ConfigError("fgsm takes no input augmentations");
  }
  switch (v.base) {
    case BaseMethod::fgsm:
    case BaseMethod::i_fgsm: cfg.rule = DirectionRule::sign_step; break;
    case BaseMethod::mi_fgsm:
    case BaseMethod::ci_mi_fgsm: cfg.rule = DirectionRule::sign_momentum; break;
    case BaseMethod::ni_fgsm:
    case BaseMethod::si_ni_fgsm:
    case BaseMethod::ci_ni_fgsm: cfg.rule = DirectionRule::sign_nesterov; break;
    case BaseMethod::abi_fgm:
    case BaseMethod::ci_ab_fgm: cfg.rule = DirectionRule::adabelief_l2; break;
  }
  cfg.crops = is_crop_base(v.base);
  cfg.scale = v.base == BaseMethod::si_ni_fgsm ? ScaleMode::halving : ScaleMode::off;
  cfg.dim = v.aug == Augmentation::dim || v.aug == Augmentation::ti_dim || v.aug == Augmentation::si_ti_dim;
  cfg.ti.enabled = v.aug == Augmentation::tim || v.aug == Augmentation::ti_dim || v.aug == Augmentation::si_ti_dim;
  if (v.aug == Augmentation::sim || v.aug == Augmentation::si_ti_dim) {
    // Combined with crop copies the factor is drawn per copy; alone it follows the halving rule.
    cfg.scale = cfg.crops ? ScaleMode::random : ScaleMode::halving;
  }
  if (v.base == BaseMethod::fgsm) cfg.iterations = 1;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Gradient source

EnsembleSpec EnsembleSpec::equal(const std::vector<std::reference_wrapper<const ModelParams>>& models) {
  EnsembleSpec spec;
  for (const auto& m : models) spec.members.push_back({m, 1.0 / static_cast<double>(models.size())});
  spec.validate();
  return spec;
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw ConfigError("ensemble needs at least one model");
  double total = 0.0;
  for (const auto& m : members) {
    if (!(m.weight > 0.0)) throw ConfigError("ensemble weights must be positive");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError(fmt::format("ensemble weights sum to {}, not 1", total));
}

namespace {

// acc += w * v, where the first contribution initializes acc (exact when w == 1).
void accumulate(Tensor& acc, const Tensor& v, double w, bool first) {
  if (first) {
    acc = v;
    if (w != 1.0) {
      for (auto& e : acc.data()) e *= w;
    }
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * v[i];
}

}  // namespace

LossGrad source_loss_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, EnsembleFusion fusion) {
  if (source.members.empty()) throw ConfigError("ensemble needs at least one model");
  const std::size_t labels[] = {label};
  if (fusion == EnsembleFusion::loss || source.members.size() == 1) {
    LossGrad out;
    for (std::size_t k = 0; k < source.members.size(); ++k) {
      const auto& member = source.members[k];
      LossGrad lg = loss_and_input_gradient(member.model.get(), x, labels);
      out.loss += member.weight * lg.loss;
      accumulate(out.grad, lg.grad, member.weight, k == 0);
    }
    return out;
  }
  std::vector<Tape> tapes(source.members.size());
  Tensor fused;
  for (std::size_t k = 0; k < source.members.size(); ++k) {
    const Tensor logits = forward_recorded(source.members[k].model.get(), x, tapes[k]);
    accumulate(fused, logits, source.members[k].weight, k == 0);
  }
  Tape head;
  const Loss loss = softmax_cross_entropy(fused, label, head);
  const Tensor dlogits = input_gradient(head, loss);
  LossGrad out{loss.value, {}};
  for (std::size_t k = 0; k < source.members.size(); ++k) {
    Tensor upstream = dlogits;
    for (auto& v : upstream.data()) v *= source.members[k].weight;
    accumulate(out.grad, vector_jacobian(tapes[k], upstream), 1.0, k == 0);
  }
  return out;
}

double source_loss(const EnsembleSpec& source, const Tensor& x, std::size_t label, EnsembleFusion fusion) {
  const std::size_t labels[] = {label};
  if (fusion == EnsembleFusion::loss || source.members.size() == 1) {
    double total = 0.0;
    for (const auto& member : source.members) total += member.weight * loss_value(member.model.get(), x, labels);
    return total;
  }
  Tensor fused;
  for (std::size_t k = 0; k < source.members.size(); ++k) {
    accumulate(fused, forward_logits(source.members[k].model.get(), x), source.members[k].weight, k == 0);
  }
  Tape head;
  return softmax_cross_entropy(fused, label, head).value;
}

AttackStreams AttackStreams::for_example(std::uint64_t seed, std::size_t example_id) {
  return {Rng::derive(seed, example_id, 1), Rng::derive(seed, example_id, 2), Rng::derive(seed, example_id, 3)};
}

std::vector<CopyDraw> draw_copies(const AttackConfig& cfg, std::size_t side, AttackStreams& streams) {
  const std::size_t m = cfg.copy_count();
  std::vector<CopyDraw> draws(m);
  for (std::size_t i = 0; i < m; ++i) {
    CopyDraw& d = draws[i];
    if (cfg.scale != ScaleMode::off) {
      d.scale = cfg.forced_scale ? *cfg.forced_scale : draw_scale(cfg.scale, i, streams.scale).value();
    }
    d.crop = cfg.crops ? sample_crop(streams.crop, side, cfg.min_crop(side), cfg.crop_offsets)
                       : CropPadParams::identity(side);
    d.dim = cfg.dim ? sample_diverse_input(streams.dim, side, cfg.dim_probability)
                    : DiverseInputParams{false, side, 0, 0, side};
  }
  return draws;
}

LossGrad copy_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                       const std::vector<CopyDraw>& draws) {
  const auto weights = cfg.copy_weights();
  if (weights.size() != draws.size()) throw ConfigError("copy weights do not match the number of draws");
  LossGrad out;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const CopyDraw& d = draws[i];
    const ScaleFactor s(d.scale);
    const Tensor transformed = apply_diverse_input(apply_crop_pad(apply_scale(x, s), d.crop), d.dim);
    LossGrad lg = source_loss_gradient(source, transformed, label, cfg.fusion);
    const Tensor g = apply_scale(adjoint_crop_pad(adjoint_diverse_input(lg.grad, d.dim), d.crop), s);
    out.loss += weights[i] * lg.loss;
    accumulate(out.grad, g, weights[i], i == 0);
  }
  return out;
}

LossGrad averaged_copy_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                                AttackStreams& streams) {
  cfg.validate();
  if (x.rank() != 4) throw DimensionError(fmt::format("attack input must be [1, C, H, W], got {}", shape_str(x.shape())));
  return copy_gradient(source, x, label, cfg, draw_copies(cfg, x.dim(2), streams));
}

Tensor clip_to_ball(const Tensor& candidate, const Tensor& x, double epsilon, double lo, double hi) {
  if (candidate.shape() != x.shape()) {
    throw DimensionError(fmt::format("clip_to_ball: candidate {} vs original {}", shape_str(candidate.shape()),
                                     shape_str(x.shape())));
  }
  Tensor out = candidate;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double floor_v = std::max(lo, x[i] - epsilon);
    const double ceil_v = std::min(hi, x[i] + epsilon);
    out[i] = std::min(std::max(out[i], floor_v), ceil_v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Engine

namespace {

// g / ||g||_1, or zeros when the norm vanishes.
Tensor l1_normalized(const Tensor& g) {
  const double norm = l1_norm(g);
  Tensor out(g.shape());
  if (norm == 0.0) return out;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] / norm;
  return out;
}

}  // namespace

Tensor adabelief_update(AttackState& st, const Tensor& grad, std::size_t t, const AttackConfig& cfg) {
  st.g = l1_normalized(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t + 1));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t + 1));
  Tensor direction(grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * st.g[i];
    const double dev = st.g[i] - st.m[i];
    st.s[i] = cfg.beta2 * st.s[i] + (1.0 - cfg.beta2) * dev * dev;
    const double m_hat = st.m[i] / bc1;
    const double s_hat = (st.s[i] + cfg.delta) / bc2;
    direction[i] = m_hat / std::sqrt(s_hat + cfg.delta);
  }
  return direction;
}

Tensor run_engine(const AttackConfig& cfg, const EnsembleSpec& source, const Tensor& x, std::size_t label,
                  std::size_t example_id, const IterationObserver& observer) {
  cfg.validate();
  source.validate();
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw DimensionError(fmt::format("attack input must be [1, C, H, W], got {}", shape_str(x.shape())));
  }
  std::optional<TiKernel> kernel;
  if (cfg.ti.enabled) kernel = gaussian_kernel(cfg.ti.size, cfg.ti.resolved_sigma());

  const double alpha = cfg.step();
  AttackStreams streams = AttackStreams::for_example(cfg.seed, example_id);
  AttackState st{0, x, Tensor(x.shape()), Tensor(x.shape()), Tensor(x.shape())};

  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    st.t = t;
    Tensor probe = st.x_adv;
    if (cfg.rule == DirectionRule::sign_nesterov) {
      for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = st.x_adv[i] + alpha * cfg.mu * st.g[i];
    }
    Tensor grad = copy_gradient(source, probe, label, cfg, draw_copies(cfg, x.dim(2), streams)).grad;
    if (kernel) grad = convolve_gradient(grad, *kernel);

    Tensor next = st.x_adv;
    bool skipped = false;
    switch (cfg.rule) {
      case DirectionRule::sign_step:
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += alpha * sign(grad[i]);
        break;
      case DirectionRule::sign_momentum:
      case DirectionRule::sign_nesterov: {
        const Tensor n = l1_normalized(grad);
        for (std::size_t i = 0; i < next.size(); ++i) {
          st.g[i] = cfg.mu * st.g[i] + n[i];
          next[i] += alpha * sign(st.g[i]);
        }
        break;
      }
      case DirectionRule::adabelief_l2: {
        const Tensor direction = adabelief_update(st, grad, t, cfg);
        const double norm = l2_norm(direction);
        if (norm > 0.0) {
          for (std::size_t i = 0; i < next.size(); ++i) next[i] += alpha * direction[i] / norm;
        } else {
          skipped = true;
        }
        break;
      }
    }
    const double pre_clip = l2_distance(next, st.x_adv);
    if (cfg.rule == DirectionRule::adabelief_l2 && cfg.final_update == FinalUpdate::sign_step) {
      for (std::size_t i = 0; i < next.size(); ++i) next[i] += alpha * sign(st.g[i]);
    }
    Tensor projected = clip_to_ball(next, x, cfg.epsilon, cfg.lo, cfg.hi);
    if (observer) {
      IterationRecord rec;
      rec.example_id = example_id;
      rec.t = t;
      rec.loss = source_loss(source, projected, label, cfg.fusion);
      rec.linf = linf_distance(projected, x);
      rec.l2_step = l2_distance(projected, st.x_adv);
      rec.pre_clip_l2 = pre_clip;
      rec.step_skipped = skipped;
      st.x_adv = std::move(projected);
      observer(rec, st);
    } else {
      st.x_adv = std::move(projected);
    }
  }
  return st.x_adv;
}

Tensor run_attack(Variant variant, const EnsembleSpec& source, const Tensor& x, std::size_t label,
                  const AttackConfig& cfg, std::size_t example_id, const IterationObserver& observer) {
  const AttackConfig resolved = resolve_variant(variant, cfg);
  if (variant.base == BaseMethod::fgsm) return fgsm(source, x, label, resolved);
  return run_engine(resolved, source, x, label, example_id, observer);
}

Tensor fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  source.validate();
  const Tensor grad = source_loss_gradient(source, x, label, cfg.fusion).grad;
  Tensor candidate = x;
  for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] += cfg.epsilon * sign(grad[i]);
  return clip_to_ball(candidate, x, cfg.epsilon, cfg.lo, cfg.hi);
}

Tensor i_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  return run_attack({BaseMethod::i_fgsm}, source, x, label, cfg);
}

Tensor mi_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  return run_attack({BaseMethod::mi_fgsm}, source, x, label, cfg);
}

Tensor ni_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  return run_attack({BaseMethod::ni_fgsm}, source, x, label, cfg);
}

Tensor abi_fgm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
               const IterationObserver& observer) {
  return run_attack({BaseMethod::abi_fgm}, source, x, label, cfg, 0, observer);
}

std::string diagnostics_json_line(const IterationRecord& rec) {
  nlohmann::ordered_json j;
  j["example_id"] = rec.example_id;
  j["t"] = rec.t;
  j["loss"] = rec.loss;
  j["linf"] = rec.linf;
  j["l2_step"] = rec.l2_step;
  return j.dump();
}

}  // namespace advkit
