// Function-preserving network transformations: widening with random channel
// remapping, identity/one-hot layer insertion, remap propagation through
// plain and dense connectivity, and the preservation verifier.
#pragma once

#include <optional>
#include <type_traits>
#include <variant>

#include "eas/arch.hpp"
#include "eas/net.hpp"
#include "eas/rng.hpp"

namespace eas {

// Channel remapping G: target index -> source index (0-based). Sampled maps
// are identity on the first `source_width` entries; derived maps (dense
// equivalents) are general.
struct RemapFunction {
  int source_width = 0;
  std::vector<int> map;

  int target_width() const { return static_cast<int>(map.size()); }
  bool is_identity() const {
    if (target_width() != source_width) return false;
    for (int j = 0; j < source_width; ++j)
      if (map[j] != j) return false;
    return true;
  }
  // Per target index: how many target entries share its source channel.
  std::vector<int> replication_counts() const {
    std::vector<int> per_source(source_width, 0);
    for (int s : map) ++per_source[s];
    std::vector<int> out(map.size());
    for (size_t j = 0; j < map.size(); ++j) out[j] = per_source[map[j]];
    return out;
  }
  static RemapFunction identity(int f) {
    RemapFunction r;
    r.source_width = f;
    r.map.resize(f);
    for (int j = 0; j < f; ++j) r.map[j] = j;
    return r;
  }
};

// Identity prefix, uniform random tail. Requires f_hat >= f >= 1.
RemapFunction sample_remap(int f, int f_hat, Rng& rng);

// The remapping an in-concatenation consumer sees when a segment in the
// middle is widened by `g`: identity prefix, shifted g, shifted identity
// suffix.
RemapFunction equivalent_remap(const RemapFunction& g, int prefix_width,
                               int suffix_width);

struct WidenAction {
  int layer = 0;
  bool operator==(const WidenAction&) const = default;
};
struct DeepenAction {
  int block = 0;
  int index = 0;
  std::optional<int> filter_size;  // conv insertions only
  bool operator==(const DeepenAction&) const = default;
};
using TransformAction = std::variant<WidenAction, DeepenAction>;

std::string action_to_text(const TransformAction& a);
TransformAction action_from_text(const std::string& text);

// ---- Action space -------------------------------------------------------

// Widen eligibility: conv/fc layer whose width is a non-maximal table level.
bool widen_eligible(const ArchitectureSpec& spec, int layer,
                    const WidthTable& table);

// Valid insertion indices per block (aligned with split_blocks). Excludes the
// network head and insertions whose identity width is not a table level.
std::vector<std::vector<int>> valid_deepen_indices(const ArchitectureSpec& spec,
                                                   const WidthTable& table);

// Where a Deepen action lands and what the inserted layer looks like.
struct InsertionPoint {
  int layer_pos = 0;  // index in the layer sequence where the new layer goes
  bool is_fc = false;
  int width = 0;                  // identity width of the new layer
  std::optional<int> dense_block; // set when the layer joins a dense block
};
InsertionPoint resolve_deepen(const ArchitectureSpec& spec,
                              const DeepenAction& a);

// Architecture-only application (controller rollouts). The params-level
// transforms produce exactly the same spec.
ArchitectureSpec apply_action_to_spec(const ArchitectureSpec& spec,
                                      const TransformAction& a,
                                      const WidthTable& table);

// ---- Weight-level transforms --------------------------------------------

template <typename Real>
struct TransformResult {
  ArchitectureSpec spec;
  NetworkParams<Real> params;
};

// Net2Wider. `new_width` must exceed the current width; the remapping is
// sampled from `rng`.
template <typename Real>
TransformResult<Real> widen_layer(const ArchitectureSpec& spec,
                                  const NetworkParams<Real>& params, int layer,
                                  int new_width, Rng& rng);
template <typename Real>
TransformResult<Real> widen_layer_with_remap(const ArchitectureSpec& spec,
                                             const NetworkParams<Real>& params,
                                             int layer,
                                             const RemapFunction& remap);

// Net2Deeper. `calib` (optional) is a batch used to set the inserted
// batchnorm so it undoes the normalization; without it the undo uses (0,1)
// statistics, which is still exact in Eval mode.
template <typename Real>
TransformResult<Real> deepen(const ArchitectureSpec& spec,
                             const NetworkParams<Real>& params,
                             const DeepenAction& action,
                             const Tensor<std::type_identity_t<Real>>* calib,
                             Rng& rng);
// Dense insertions replicate concat channels chosen in `picks` (one per new
// filter); exposed for tests with forced choices. Plain insertions ignore it.
template <typename Real>
TransformResult<Real> deepen_with_picks(
    const ArchitectureSpec& spec, const NetworkParams<Real>& params,
    const DeepenAction& action, const std::vector<int>& picks,
    const Tensor<std::type_identity_t<Real>>* calib);

template <typename Real>
TransformResult<Real> apply_transform(
    const ArchitectureSpec& spec, const NetworkParams<Real>& params,
    const TransformAction& action, const WidthTable& table,
    const Tensor<std::type_identity_t<Real>>* calib, Rng& rng);

struct PreservationReport {
  double max_abs_diff = 0;
  bool pass = false;
};

// Runs both networks in Eval mode on seeded random inputs and reports the
// largest logit difference.
template <typename Real>
PreservationReport verify_preservation(const ArchitectureSpec& spec_a,
                                       const NetworkParams<Real>& params_a,
                                       const ArchitectureSpec& spec_b,
                                       const NetworkParams<Real>& params_b,
                                       int n_inputs, double tolerance,
                                       uint64_t seed);

}  // namespace eas
