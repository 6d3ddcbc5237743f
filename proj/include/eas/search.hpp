// Search orchestration: sampling children, weight-reusing transformation,
// parallel fine-tuning, rewards, controller updates, the two-stage
// procedure, and the random-search baseline.
#pragma once

#include <functional>

#include "eas/controller.hpp"
#include "eas/data.hpp"
#include "eas/experiment.hpp"
#include "eas/train.hpp"
#include "eas/transform.hpp"

namespace eas {

enum class RewardMode { RealTraining, Surrogate };
enum class PolicyKind { RL, Random };

// Deterministic stand-in for validation accuracy: saturating terms for conv
// depth and mean log-width plus seeded per-architecture noise, bounded away
// from 1 so the tan reward stays finite.
struct SurrogateConfig {
  double depth_weight = 0.55;
  double width_weight = 0.25;
  double noise_sigma = 0.01;
  double base = 0.05;
  double max_score = 0.85;
  uint64_t seed = 0;
};

struct SurrogateModel {
  SurrogateConfig cfg;
  double score(const ArchitectureSpec& spec) const;
};

struct SearchConfig {
  int samples_per_step = 10;
  int finetune_epochs = 20;
  int deeper_steps = 5;
  int wider_steps = 4;
  int stage1_budget = 300;
  int stage2_budget = 150;
  int intermediate_epochs = 100;
  int workers = 4;
  uint64_t seed = 1;
  RewardMode reward_mode = RewardMode::RealTraining;
  PolicyKind policy = PolicyKind::RL;
  TrainConfig train;
  ControllerConfig controller;
  WidthTable table = WidthTable::standard();
  SurrogateConfig surrogate;
  std::string dataset;  // uri for RealTraining
  int n_val = 0;        // validation split; 0 = fifth of the data
  int calib_batch = 256;

  std::vector<StepKind> schedule() const {
    return default_schedule(deeper_steps, wider_steps);
  }
};

// Persistence is the caller's concern; hooks may be empty.
struct PersistHooks {
  std::function<void(const ExperimentRecord&)> append;
  std::function<std::string(const std::string& id, const ArchitectureSpec&,
                            const NetworkParams<float>&)> save_weights;
};

// Load, split and normalize the configured dataset (train stats reused on
// the validation split). RealTraining mode only.
std::pair<LabeledImageSet, LabeledImageSet> prepare_datasets(
    const SearchConfig& cfg);

struct SearchState {
  ArchitectureSpec start_spec;
  NetworkParams<float> start_params;  // unused in Surrogate mode
  double parent_accuracy = 0;
  std::string parent_id = "start";
  ControllerParams controller;
  BaselineState baseline;
  SurrogateModel surrogate;
  LabeledImageSet train_set, val_set;  // RealTraining mode
  int stage = 1;
  int step = 0;
  int sampled_in_stage = 0;

  // Best child seen in the current stage.
  bool has_best = false;
  ArchitectureSpec best_spec;
  NetworkParams<float> best_params;
  double best_accuracy = 0;

  static SearchState make(const ArchitectureSpec& start,
                          const NetworkParams<float>& start_params,
                          const SearchConfig& cfg);
};

// Samples n children, evaluates them (fine-tuning in parallel workers in
// RealTraining mode), updates the controller (RL policy only), and returns
// the records in child order.
std::vector<ExperimentRecord> search_step(SearchState& state,
                                          const SearchConfig& cfg,
                                          int n_children,
                                          const PersistHooks& hooks);

struct SearchResult {
  ArchitectureSpec best_spec;
  NetworkParams<float> best_params;
  double best_accuracy = 0;
  std::vector<ExperimentRecord> records;
};

SearchResult two_stage_search(const ArchitectureSpec& start,
                              const NetworkParams<float>& start_params,
                              const SearchConfig& cfg,
                              const PersistHooks& hooks);

// Uniform choices over the identical masked action space.
Trajectory random_rollout(const ArchitectureSpec& spec,
                          const std::vector<StepKind>& schedule,
                          const WidthTable& table, Rng& rng);

struct StepStats {
  int step = 0;
  double mean_acc = 0;
  double max_acc = 0;
  double mean_reward = 0;
};

struct CompareResult {
  std::vector<StepStats> rl;
  std::vector<StepStats> random;
  std::vector<ExperimentRecord> rl_records, random_records;
};

// Single-stage run of one policy over `budget` sampled networks.
std::vector<ExperimentRecord> run_policy_series(
    const ArchitectureSpec& start, const NetworkParams<float>& start_params,
    const SearchConfig& cfg, int budget, const PersistHooks& hooks);

// Runs both policies with identical environment seeds and budgets.
CompareResult compare_rl_vs_random(const ArchitectureSpec& start,
                                   const NetworkParams<float>& start_params,
                                   const SearchConfig& cfg, int budget);

std::vector<StepStats> stats_from_records(
    const std::vector<ExperimentRecord>& records);

}  // namespace eas
