#pragma once

// Gradient-based L-infinity attack family.
//
// Every named method is a preset of one iteration engine:
//
//   gradient source   weighted average over m transformed copies
//                     T(C(S_i(x)); p) of the input, chained back through the
//                     transform adjoints, optionally over an ensemble
//   smoothing         optional Gaussian (TI) convolution of that average
//   direction rule    sign step | sign of momentum | sign of Nesterov momentum
//                     | AdaBelief moments with an L2-normalized step
//   projection        clip to the epsilon ball intersected with [lo, hi]

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advkit/models.hpp"
#include "advkit/rng.hpp"
#include "advkit/tensor.hpp"
#include "advkit/transforms.hpp"

namespace advkit {

enum class DirectionRule { sign_step, sign_momentum, sign_nesterov, adabelief_l2 };

/// What follows the AdaBelief move: projection only, or a further sign step
/// along the normalized gradient before projection.
enum class FinalUpdate { clip, sign_step };

enum class EnsembleFusion { loss, logits };

const char* direction_rule_name(DirectionRule rule);
const char* final_update_name(FinalUpdate update);
const char* fusion_name(EnsembleFusion fusion);
FinalUpdate parse_final_update(const std::string& name);
EnsembleFusion parse_fusion(const std::string& name);

struct TiSpec {
  bool enabled = false;
  std::size_t size = 7;
  /// Zero selects default_ti_sigma(size).
  double sigma = 0.0;

  double resolved_sigma() const { return sigma > 0.0 ? sigma : default_ti_sigma(size); }
};

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  std::size_t iterations = 10;
  /// Defaults to epsilon / iterations.
  std::optional<double> alpha;
  double mu = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double delta = 1e-8;
  /// Number of transformed copies; zero selects 5 when crops or scaling are on, else 1.
  std::size_t copies = 0;
  /// Per-copy weights; empty selects 1/m each.
  std::vector<double> weights;
  bool crops = false;
  /// Smallest crop side as a fraction of the image side.
  double crop_min_fraction = 279.0 / 299.0;
  CropOffsetMode crop_offsets = CropOffsetMode::uniform;
  bool dim = false;
  double dim_probability = 0.5;
  ScaleMode scale = ScaleMode::off;
  /// When set, every scaled copy uses this factor instead of the mode's rule.
  std::optional<double> forced_scale;
  TiSpec ti;
  DirectionRule rule = DirectionRule::sign_step;
  FinalUpdate final_update = FinalUpdate::clip;
  EnsembleFusion fusion = EnsembleFusion::loss;
  double lo = 0.0;
  double hi = 1.0;
  std::uint64_t seed = 0;

  double step() const { return alpha ? *alpha : epsilon / static_cast<double>(iterations); }
  std::size_t copy_count() const;
  std::vector<double> copy_weights() const;
  std::size_t min_crop(std::size_t side) const;
  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

/// Named methods. Each maps to a base method and an augmentation set.
enum class BaseMethod { fgsm, i_fgsm, mi_fgsm, ni_fgsm, abi_fgm, si_ni_fgsm, ci_mi_fgsm, ci_ni_fgsm, ci_ab_fgm };
enum class Augmentation { none, dim, tim, ti_dim, sim, si_ti_dim };

struct Variant {
  BaseMethod base = BaseMethod::i_fgsm;
  Augmentation aug = Augmentation::none;

  friend bool operator==(const Variant&, const Variant&) = default;
};

/// Parses names such as "mi-fgsm", "abi-fgm", "ci-ab-fgm", "ci-ab-si-ti-dim",
/// "mi-dim", "ni-ti-dim", "si-ni-ti-dim". Throws ConfigError on unknown names.
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

/// Applies the variant's preset (rule, crops, dim, ti, scale) on top of `cfg`
/// and validates the result.
AttackConfig resolve_variant(Variant v, AttackConfig cfg);

/// Models attacked together; weights must be positive and sum to 1.
struct EnsembleSpec {
  struct Member {
    std::reference_wrapper<const ModelParams> model;
    double weight;
  };
  std::vector<Member> members;

  EnsembleSpec() = default;
  EnsembleSpec(const ModelParams& model) : members{{std::cref(model), 1.0}} {}  // NOLINT: implicit by intent
  static EnsembleSpec equal(const std::vector<std::reference_wrapper<const ModelParams>>& models);
  void validate() const;
};

/// Loss of the source on `x` and its input gradient. Loss fusion sums the
/// weighted per-model losses; logit fusion applies cross-entropy to the
/// weighted sum of logits.
LossGrad source_loss_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, EnsembleFusion fusion);
double source_loss(const EnsembleSpec& source, const Tensor& x, std::size_t label, EnsembleFusion fusion);

/// Randomness used by one attacked example. Each transform draws from its own
/// stream so enabling one transform never shifts another's draws.
struct AttackStreams {
  Rng crop, dim, scale;
  static AttackStreams for_example(std::uint64_t seed, std::size_t example_id);
};

/// Transform draws for one copy.
struct CopyDraw {
  double scale = 1.0;
  CropPadParams crop;
  DiverseInputParams dim;
};

/// Draws the per-copy transform parameters for one iteration.
std::vector<CopyDraw> draw_copies(const AttackConfig& cfg, std::size_t side, AttackStreams& streams);

/// Sum_i w_i grad_x J(T(C(S_i(x)))) for fixed draws, plus the matching
/// weighted loss.
LossGrad copy_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                       const std::vector<CopyDraw>& draws);

/// Draws fresh copies from `streams` and averages their gradients.
LossGrad averaged_copy_gradient(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                                AttackStreams& streams);

/// Elementwise clamp to [max(lo, x - eps), min(hi, x + eps)].
Tensor clip_to_ball(const Tensor& candidate, const Tensor& x, double epsilon, double lo = 0.0, double hi = 1.0);

/// Per-iteration state of one attacked example.
struct AttackState {
  std::size_t t = 0;
  Tensor x_adv;
  Tensor g;    // accumulated momentum or latest normalized gradient
  Tensor m;    // first moment
  Tensor s;    // belief second moment
};

struct IterationRecord {
  std::size_t example_id = 0;
  std::size_t t = 0;
  /// Source loss on the untransformed iterate after the update.
  double loss = 0.0;
  double linf = 0.0;
  /// ||x_{t+1} - x_t||_2 after projection.
  double l2_step = 0.0;
  /// ||displacement||_2 of the direction-rule move before any projection.
  double pre_clip_l2 = 0.0;
  bool step_skipped = false;
};

/// One AdaBelief moment update at iteration t (0-based): L1-normalizes the raw
/// gradient into st.g, updates st.m and st.s, and returns the unnormalized
/// direction m_hat / sqrt(s_hat + delta) with both moments bias-corrected.
/// st.m and st.s must already have the gradient's shape.
Tensor adabelief_update(AttackState& st, const Tensor& grad, std::size_t t, const AttackConfig& cfg);

/// Optional per-iteration observer.
using IterationObserver = std::function<void(const IterationRecord&, const AttackState&)>;

/// Runs the engine for a resolved configuration.
Tensor run_engine(const AttackConfig& cfg, const EnsembleSpec& source, const Tensor& x, std::size_t label,
                  std::size_t example_id = 0, const IterationObserver& observer = {});

/// Resolves the variant preset over `cfg` and runs it.
Tensor run_attack(Variant variant, const EnsembleSpec& source, const Tensor& x, std::size_t label,
                  const AttackConfig& cfg, std::size_t example_id = 0, const IterationObserver& observer = {});

/// x + eps * sign(grad), projected. Single step regardless of cfg.iterations.
Tensor fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg);
Tensor i_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg);
Tensor mi_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg);
Tensor ni_fgsm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg);
Tensor abi_fgm(const EnsembleSpec& source, const Tensor& x, std::size_t label, const AttackConfig& cfg,
               const IterationObserver& observer = {});

/// One JSON line per record: {"example_id","t","loss","linf","l2_step"}.
std::string diagnostics_json_line(const IterationRecord& rec);

}  // namespace advkit
