// RL meta-controller: token embedding, bidirectional LSTM encoder, shared
// sigmoid widen head, recurrent deepen head, REINFORCE with an EMA baseline
// and ADAM.
#pragma once

#include <optional>

#include "eas/ad.hpp"
#include "eas/arch.hpp"
#include "eas/rng.hpp"
#include "eas/transform.hpp"

namespace eas {

struct ControllerConfig {
  int embed_dim = 16;
  int enc_hidden = 50;  // per direction; layer states are 2x this
  int dec_input = 16;   // decision embedding fed back into the deepen cell
  int max_blocks = 12;
  int max_index = 20;
  double adam_lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int state_dim() const { return 2 * enc_hidden; }
};

// Filter sizes the deepen head can emit.
inline constexpr int kFilterChoices[3] = {1, 3, 5};

struct ControllerParams {
  ControllerConfig cfg;
  int width_buckets = 0;  // longest level list + 1 (off-table bucket)
  ParamStore store;
  std::vector<double> adam_m, adam_v;
  int64_t adam_t = 0;

  int vocab_size() const { return 4 * width_buckets * 4; }

  static ControllerParams init(const ControllerConfig& cfg,
                               const WidthTable& table, uint64_t seed);
};

// Token id for a layer: (kind, width bucket, filter bucket).
int layer_token(const ArchitectureSpec& spec, int layer,
                const WidthTable& table, int width_buckets);

// ---- Policy heads (sampled variants; deterministic given rng) ------------

struct EncodeValues {
  std::vector<std::vector<double>> layer_states;  // one per layer, 2H each
  std::vector<double> final_state;                // 2H (terminal h of both dirs)
};
EncodeValues encode_architecture(const ArchitectureSpec& spec,
                                 const ControllerParams& params,
                                 const WidthTable& table);

struct WiderResult {
  std::vector<uint8_t> widen;     // per layer; masked layers stay 0
  std::vector<uint8_t> eligible;  // mask actually used
  std::vector<double> log_probs;  // per eligible layer decision; else 0
  std::vector<double> p_widen;    // sigmoid outputs for eligible layers
};
WiderResult wider_decisions(const ArchitectureSpec& spec,
                            const ControllerParams& params,
                            const WidthTable& table, Rng& rng);

struct DeeperResult {
  std::optional<DeepenAction> action;  // nullopt: every choice masked
  double log_prob = 0;
};
DeeperResult deeper_decision(const ArchitectureSpec& spec,
                             const ControllerParams& params,
                             const WidthTable& table, Rng& rng);

// ---- Rollouts -------------------------------------------------------------

enum class StepKind { Wider, Deeper };

struct WiderStepDecision {
  std::vector<uint8_t> widen;
};
struct DeeperStepDecision {
  bool noop = false;
  int block = 0;
  int index = 0;
  int filter_choice = -1;  // index into kFilterChoices; -1 for fc
};
struct StepDecision {
  StepKind kind = StepKind::Wider;
  WiderStepDecision wider;
  DeeperStepDecision deeper;
};

struct Trajectory {
  ArchitectureSpec start_arch;
  ArchitectureSpec result_arch;
  std::vector<StepDecision> steps;
  std::vector<TransformAction> actions;  // in application order
  double log_prob = 0;
  double reward = 0;
  double advantage = 0;
  bool has_reward = false;
  bool failed = false;
};

std::vector<StepKind> default_schedule(int deeper_steps, int wider_steps);

// Samples one trajectory; re-encodes the spec-level architecture before each
// step. Weight transformation is the orchestrator's job.
Trajectory rollout(const ArchitectureSpec& start, const ControllerParams& params,
                   const std::vector<StepKind>& schedule,
                   const WidthTable& table, Rng& rng);

// Log-probability of a recorded trajectory when its decisions are forced
// back through the policy. Matches Trajectory::log_prob exactly.
double replay_log_prob(const Trajectory& traj, const ControllerParams& params,
                       const WidthTable& table);

// ---- Reward, baseline, update ---------------------------------------------

// tan(acc * pi/2) computed in half-angle form (exact at 0 and 0.5).
// acc >= 1 clamps to 1 - 1e-6 and sets *clamped.
double reward_transform(double acc, bool* clamped = nullptr);

struct BaselineState {
  double value = 0;
  double decay = 0.95;
  bool initialized = false;

  void observe(double r) {
    if (!initialized) {
      value = r;
      initialized = true;
    } else {
      value = decay * value + (1.0 - decay) * r;
    }
  }
};

// loss = -(1/K) * sum_k advantage_k * log pi(trajectory_k); fills the
// parameter gradient buffer (zeroed first) and returns the loss value.
double reinforce_loss_and_grad(const std::vector<Trajectory>& trajectories,
                               ControllerParams& params,
                               const WidthTable& table);

// One REINFORCE step over the (non-failed) trajectories: fills advantages
// from the baseline, takes one ADAM step, updates the baseline with the mean
// reward. Returns the loss, or nullopt when no trajectory carried a reward.
std::optional<double> reinforce_update(std::vector<Trajectory>& trajectories,
                                       BaselineState& baseline,
                                       ControllerParams& params,
                                       const WidthTable& table);

}  // namespace eas
