#include "eas/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <thread>

namespace eas {

namespace {

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto body = [&]() {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  int count = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(count);
  for (int w = 0; w < count; ++w) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
}

int64_t spec_param_count(const ArchitectureSpec& spec) {
  std::vector<LayerIO> io = compute_flow(spec);
  int64_t n = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::Pool) continue;
    int64_t k = l.kind == LayerKind::Conv
                    ? static_cast<int64_t>(l.filter_size) * l.filter_size *
                          io[i].kernel_in * l.width
                    : static_cast<int64_t>(io[i].kernel_in) * l.width;
    n += k + l.width;
    if (l.has_batchnorm) n += 2LL * l.width;
  }
  return n;
}

std::string child_id(int stage, int step, int child) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "s%d-step%03d-c%02d", stage, step, child);
  return buf;
}

struct ChildEval {
  ArchitectureSpec spec;
  NetworkParams<float> params;
  double pre_finetune = 0;
  double accuracy = 0;
  double wall = 0;
  bool failed = false;
};

}  // namespace

std::pair<LabeledImageSet, LabeledImageSet> prepare_datasets(
    const SearchConfig& cfg) {
  LabeledImageSet all = load_dataset(cfg.dataset);
  int n_val = cfg.n_val > 0 ? cfg.n_val : all.size() / 5;
  auto [tr, va] = split_validation(all, n_val, derive_seed(cfg.seed, 0x5011u));
  ChannelStats stats = normalize(tr);
  apply_normalization(va, stats);
  return {std::move(tr), std::move(va)};
}

SearchState SearchState::make(const ArchitectureSpec& start,
                              const NetworkParams<float>& start_params,
                              const SearchConfig& cfg) {
  SearchState st;
  st.start_spec = start;
  st.start_params = start_params;
  st.controller = ControllerParams::init(cfg.controller, cfg.table,
                                         derive_seed(cfg.seed, 0xc011u));
  st.surrogate.cfg = cfg.surrogate;
  if (cfg.reward_mode == RewardMode::RealTraining) {
    auto [tr, va] = prepare_datasets(cfg);
    st.train_set = std::move(tr);
    st.val_set = std::move(va);
    st.parent_accuracy = evaluate(start, start_params, st.val_set);
  } else {
    st.parent_accuracy = st.surrogate.score(start);
  }
  return st;
}

Trajectory random_rollout(const ArchitectureSpec& spec,
                          const std::vector<StepKind>& schedule,
                          const WidthTable& table, Rng& rng) {
  Trajectory traj;
  traj.start_arch = spec;
  ArchitectureSpec arch = spec;
  for (StepKind kind : schedule) {
    StepDecision dec;
    dec.kind = kind;
    std::vector<TransformAction> actions;
    if (kind == StepKind::Wider) {
      dec.wider.widen.assign(arch.layers.size(), 0);
      for (int i = 0; i < static_cast<int>(arch.layers.size()); ++i) {
        if (!widen_eligible(arch, i, table)) continue;
        if (rng.bernoulli(0.5)) {
          dec.wider.widen[i] = 1;
          actions.push_back(WidenAction{i});
        }
      }
    } else {
      std::vector<BlockRange> blocks = split_blocks(arch);
      std::vector<std::vector<int>> options = valid_deepen_indices(arch, table);
      std::vector<int> valid_blocks;
      for (size_t b = 0; b < blocks.size(); ++b)
        if (!options[b].empty()) valid_blocks.push_back(static_cast<int>(b));
      if (valid_blocks.empty()) {
        dec.deeper.noop = true;
      } else {
        int b = valid_blocks[rng.uniform_int(
            0, static_cast<int>(valid_blocks.size()) - 1)];
        const std::vector<int>& idx = options[b];
        DeepenAction a;
        a.block = b;
        a.index = idx[rng.uniform_int(0, static_cast<int>(idx.size()) - 1)];
        dec.deeper.block = a.block;
        dec.deeper.index = a.index;
        if (!blocks[b].is_fc) {
          int fc = rng.uniform_int(0, 2);
          dec.deeper.filter_choice = fc;
          a.filter_size = kFilterChoices[fc];
        }
        actions.push_back(a);
      }
    }
    for (const TransformAction& a : actions) {
      arch = apply_action_to_spec(arch, a, table);
      traj.actions.push_back(a);
    }
    traj.steps.push_back(std::move(dec));
  }
  traj.result_arch = arch;
  return traj;
}

std::vector<ExperimentRecord> search_step(SearchState& state,
                                          const SearchConfig& cfg,
                                          int n_children,
                                          const PersistHooks& hooks) {
  uint64_t step_seed = derive_seed(cfg.seed, state.stage, state.step, 0x57e9u);
  std::vector<StepKind> schedule = cfg.schedule();

  // Sample trajectories on the coordinator; the controller is not shared
  // with workers.
  std::vector<Trajectory> trajs;
  trajs.reserve(n_children);
  Rng sample_rng(derive_seed(step_seed, 0x5a17u));
  for (int k = 0; k < n_children; ++k) {
    trajs.push_back(cfg.policy == PolicyKind::RL
                        ? rollout(state.start_spec, state.controller, schedule,
                                  cfg.table, sample_rng)
                        : random_rollout(state.start_spec, schedule, cfg.table,
                                         sample_rng));
  }

  std::vector<ChildEval> evals(n_children);
  if (cfg.reward_mode == RewardMode::Surrogate) {
    for (int k = 0; k < n_children; ++k) {
      evals[k].spec = trajs[k].result_arch;
      evals[k].accuracy = state.surrogate.score(trajs[k].result_arch);
      evals[k].pre_finetune = evals[k].accuracy;
    }
  } else {
    parallel_for(n_children, cfg.workers, [&](int k) {
      auto started = std::chrono::steady_clock::now();
      ChildEval& ev = evals[k];
      try {
        ArchitectureSpec spec = state.start_spec;
        NetworkParams<float> params = state.start_params;
        int nb = std::min(cfg.calib_batch, state.train_set.size());
        Rng calib_rng(derive_seed(step_seed, 0xca11u, k));
        std::vector<int> idx(nb);
        for (int& v : idx)
          v = calib_rng.uniform_int(0, state.train_set.size() - 1);
        Tensor<float> calib = gather_batch<float>(state.train_set, idx);

        Rng crng(derive_seed(step_seed, 0xc770u, k));
        for (const TransformAction& a : trajs[k].actions) {
          auto res = apply_transform(spec, params, a, cfg.table, &calib, crng);
          spec = std::move(res.spec);
          params = std::move(res.params);
        }
        ev.pre_finetune = evaluate(spec, params, state.val_set);
        if (cfg.finetune_epochs > 0) {
          TrainConfig tc = cfg.train;
          tc.epochs = cfg.finetune_epochs;
          tc.seed = derive_seed(step_seed, 0x7a1du, k);
          train(spec, params, state.train_set, tc);
        }
        ev.accuracy = evaluate(spec, params, state.val_set);
        ev.spec = std::move(spec);
        ev.params = std::move(params);
      } catch (const std::exception&) {
        ev.failed = true;
      }
      ev.wall = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - started)
                    .count();
    });
  }

  // Rewards and controller update.
  double reward_sum = 0;
  int ok_count = 0;
  for (int k = 0; k < n_children; ++k) {
    if (evals[k].failed) {
      trajs[k].failed = true;
      continue;
    }
    double acc = std::min(evals[k].accuracy, 1.0 - 1e-6);
    evals[k].accuracy = acc;
    trajs[k].reward = reward_transform(acc);
    trajs[k].has_reward = true;
    reward_sum += trajs[k].reward;
    ++ok_count;
  }
  double baseline_used = state.baseline.value;
  if (ok_count > 0) {
    double mean_r = reward_sum / ok_count;
    if (!state.baseline.initialized) state.baseline.observe(mean_r);
    baseline_used = state.baseline.value;
    if (cfg.policy == PolicyKind::RL) {
      reinforce_update(trajs, state.baseline, state.controller, cfg.table);
    } else {
      state.baseline.observe(mean_r);
    }
  }

  // Records in child order; single-writer append.
  std::vector<ExperimentRecord> records;
  records.reserve(n_children);
  for (int k = 0; k < n_children; ++k) {
    const ChildEval& ev = evals[k];
    ExperimentRecord rec;
    rec.id = child_id(state.stage, state.step, k);
    rec.stage = state.stage;
    rec.step = state.step;
    rec.parent_id = state.parent_id;
    for (const TransformAction& a : trajs[k].actions)
      rec.actions.push_back(action_to_text(a));
    rec.arch_doc = serialize(trajs[k].result_arch);
    rec.pre_finetune_accuracy = ev.pre_finetune;
    rec.val_accuracy = ev.accuracy;
    rec.reward = trajs[k].reward;
    rec.baseline = baseline_used;
    rec.finetune_epochs =
        cfg.reward_mode == RewardMode::Surrogate ? 0 : cfg.finetune_epochs;
    rec.wall_time = ev.wall;
    rec.status = ev.failed ? "failed" : "ok";
    if (!ev.failed && hooks.save_weights &&
        cfg.reward_mode == RewardMode::RealTraining)
      rec.params_path = hooks.save_weights(rec.id, ev.spec, ev.params);
    if (hooks.append) hooks.append(rec);
    records.push_back(std::move(rec));

    if (!ev.failed) {
      bool better = false;
      if (!state.has_best || ev.accuracy > state.best_accuracy) {
        better = true;
      } else if (ev.accuracy == state.best_accuracy) {
        better =
            spec_param_count(ev.spec) < spec_param_count(state.best_spec);
      }
      if (better) {
        state.has_best = true;
        state.best_spec = ev.spec;
        state.best_params = ev.params;
        state.best_accuracy = ev.accuracy;
      }
    }
  }
  ++state.step;
  state.sampled_in_stage += n_children;
  return records;
}

SearchResult two_stage_search(const ArchitectureSpec& start,
                              const NetworkParams<float>& start_params,
                              const SearchConfig& cfg,
                              const PersistHooks& hooks) {
  SearchState state = SearchState::make(start, start_params, cfg);
  SearchResult out;

  auto run_stage = [&](int stage, int budget) {
    state.stage = stage;
    state.step = 0;
    state.sampled_in_stage = 0;
    state.has_best = false;
    state.best_accuracy = 0;
    while (state.sampled_in_stage < budget) {
      int n = std::min(cfg.samples_per_step,
                       budget - state.sampled_in_stage);
      std::vector<ExperimentRecord> recs = search_step(state, cfg, n, hooks);
      out.records.insert(out.records.end(), recs.begin(), recs.end());
    }
  };

  run_stage(1, cfg.stage1_budget);

  if (state.has_best) {
    if (cfg.reward_mode == RewardMode::RealTraining &&
        cfg.intermediate_epochs > 0) {
      TrainConfig tc = cfg.train;
      tc.epochs = cfg.intermediate_epochs;
      tc.seed = derive_seed(cfg.seed, 0x1e7au);
      train(state.best_spec, state.best_params, state.train_set, tc);
      state.best_accuracy =
          evaluate(state.best_spec, state.best_params, state.val_set);
    }
    state.start_spec = state.best_spec;
    state.start_params = state.best_params;
    state.parent_accuracy = state.best_accuracy;
    state.parent_id = "s1-best";
  }
  out.best_spec = state.has_best ? state.best_spec : start;
  out.best_params = state.has_best ? state.best_params : start_params;
  out.best_accuracy = state.has_best ? state.best_accuracy
                                     : state.parent_accuracy;

  run_stage(2, cfg.stage2_budget);

  if (state.has_best) {
    bool better = state.best_accuracy > out.best_accuracy;
    if (state.best_accuracy == out.best_accuracy)
      better = spec_param_count(state.best_spec) <
               spec_param_count(out.best_spec);
    if (better) {
      out.best_spec = state.best_spec;
      out.best_params = state.best_params;
      out.best_accuracy = state.best_accuracy;
    }
  }
  return out;
}

std::vector<StepStats> stats_from_records(
    const std::vector<ExperimentRecord>& records) {
  std::vector<StepStats> out;
  int cur_step = -1;
  int ok = 0;
  for (const ExperimentRecord& rec : records) {
    if (rec.step != cur_step) {
      if (cur_step >= 0 && ok > 0) {
        out.back().mean_acc /= ok;
        out.back().mean_reward /= ok;
      }
      cur_step = rec.step;
      ok = 0;
      out.push_back(StepStats{rec.step, 0, 0, 0});
    }
    if (rec.status != "ok") continue;
    out.back().mean_acc += rec.val_accuracy;
    out.back().mean_reward += rec.reward;
    out.back().max_acc = std::max(out.back().max_acc, rec.val_accuracy);
    ++ok;
  }
  if (cur_step >= 0 && ok > 0) {
    out.back().mean_acc /= ok;
    out.back().mean_reward /= ok;
  }
  return out;
}

std::vector<ExperimentRecord> run_policy_series(
    const ArchitectureSpec& start, const NetworkParams<float>& start_params,
    const SearchConfig& cfg, int budget, const PersistHooks& hooks) {
  SearchState state = SearchState::make(start, start_params, cfg);
  std::vector<ExperimentRecord> recs;
  while (state.sampled_in_stage < budget) {
    int n = std::min(cfg.samples_per_step, budget - state.sampled_in_stage);
    std::vector<ExperimentRecord> step_recs = search_step(state, cfg, n, hooks);
    recs.insert(recs.end(), step_recs.begin(), step_recs.end());
  }
  return recs;
}

CompareResult compare_rl_vs_random(const ArchitectureSpec& start,
                                   const NetworkParams<float>& start_params,
                                   const SearchConfig& cfg, int budget) {
  CompareResult out;
  for (PolicyKind pk : {PolicyKind::RL, PolicyKind::Random}) {
    SearchConfig c2 = cfg;
    c2.policy = pk;
    std::vector<ExperimentRecord> recs =
        run_policy_series(start, start_params, c2, budget, PersistHooks{});
    if (pk == PolicyKind::RL) {
      out.rl = stats_from_records(recs);
      out.rl_records = std::move(recs);
    } else {
      out.random = stats_from_records(recs);
      out.random_records = std::move(recs);
    }
  }
  return out;
}

}  // namespace eas
