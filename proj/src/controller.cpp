#include "eas/controller.hpp"

#include <algorithm>
#include <cmath>

namespace eas {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

int find_level_index(const std::vector<int>& levels, int width) {
  auto it = std::find(levels.begin(), levels.end(), width);
  return it == levels.end() ? -1 : static_cast<int>(it - levels.begin());
}

}  // namespace

int layer_token(const ArchitectureSpec& spec, int layer,
                const WidthTable& table, int width_buckets) {
  const LayerSpec& l = spec.layers.at(layer);
  int kind_id = static_cast<int>(l.kind);
  int wb = width_buckets - 1;  // off-table / not applicable
  if (l.kind == LayerKind::Conv || l.kind == LayerKind::FC) {
    int idx = find_level_index(levels_for(table, width_domain(spec, layer)),
                               l.width);
    if (idx >= 0 && idx < width_buckets - 1) wb = idx;
  }
  int fb = 0;
  if (l.kind == LayerKind::Conv || l.kind == LayerKind::Pool) {
    if (l.filter_size == 1) fb = 1;
    else if (l.filter_size == 3) fb = 2;
    else if (l.filter_size == 5) fb = 3;
  }
  return (kind_id * width_buckets + wb) * 4 + fb;
}

ControllerParams ControllerParams::init(const ControllerConfig& cfg,
                                        const WidthTable& table,
                                        uint64_t seed) {
  ControllerParams p;
  p.cfg = cfg;
  size_t longest = std::max({table.conv_levels.size(), table.fc_levels.size(),
                             table.growth_levels.size()});
  p.width_buckets = static_cast<int>(longest) + 1;

  int D = cfg.embed_dim, H = cfg.enc_hidden, S = cfg.state_dim();
  int DI = cfg.dec_input;
  ParamStore& st = p.store;
  st.add("embed", p.vocab_size(), D);
  for (const char* dir : {"enc_f", "enc_b"}) {
    st.add(std::string(dir) + ".wx", 4 * H, D);
    st.add(std::string(dir) + ".wh", 4 * H, H);
    st.add(std::string(dir) + ".b", 4 * H);
  }
  st.add("wider.w", S);
  st.add("wider.b", 1);
  st.add("dec.wx", 4 * S, DI);
  st.add("dec.wh", 4 * S, S);
  st.add("dec.b", 4 * S);
  st.add("dec.start", DI);
  st.add("dec.block_emb", cfg.max_blocks, DI);
  st.add("dec.index_emb", cfg.max_index, DI);
  st.add("head.block_w", cfg.max_blocks, S);
  st.add("head.block_b", cfg.max_blocks);
  st.add("head.index_w", cfg.max_index, S);
  st.add("head.index_b", cfg.max_index);
  st.add("head.filter_w", 3, S);
  st.add("head.filter_b", 3);

  Rng rng(derive_seed(seed, 0xc0717u));
  for (double& v : st.theta) v = rng.uniform(-0.08, 0.08);
  p.adam_m.assign(st.theta.size(), 0.0);
  p.adam_v.assign(st.theta.size(), 0.0);
  return p;
}

namespace {

using Var = Tape::Var;

struct LstmSpans {
  Var wx, wh, b;
  int in_dim, hidden;
};

std::pair<Var, Var> lstm_step(Tape& t, const LstmSpans& cell, Var x, Var h,
                              Var c) {
  int H = cell.hidden;
  Var gates = t.add(t.add(t.matvec(cell.wx, 4 * H, cell.in_dim, x),
                          t.matvec(cell.wh, 4 * H, H, h)),
                    cell.b);
  Var i = t.sigmoid(t.slice(gates, 0, H));
  Var f = t.sigmoid(t.slice(gates, H, H));
  Var g = t.tanh_op(t.slice(gates, 2 * H, H));
  Var o = t.sigmoid(t.slice(gates, 3 * H, H));
  Var c2 = t.add(t.mul(f, c), t.mul(i, g));
  Var h2 = t.mul(o, t.tanh_op(c2));
  return {h2, c2};
}

struct EncodeVars {
  std::vector<Var> states;
  Var final_h = -1;
  Var final_c = -1;
};

EncodeVars encode_on_tape(Tape& t, const ArchitectureSpec& spec,
                          const ControllerParams& p, const WidthTable& table) {
  const ControllerConfig& cfg = p.cfg;
  int L = static_cast<int>(spec.layers.size());
  int D = cfg.embed_dim, H = cfg.enc_hidden;
  Var embed = t.param("embed");
  std::vector<Var> x(L);
  for (int i = 0; i < L; ++i) {
    int tok = layer_token(spec, i, table, p.width_buckets);
    x[i] = t.slice(embed, tok * D, D);
  }
  LstmSpans fwd{t.param("enc_f.wx"), t.param("enc_f.wh"), t.param("enc_f.b"),
                D, H};
  LstmSpans bwd{t.param("enc_b.wx"), t.param("enc_b.wh"), t.param("enc_b.b"),
                D, H};
  std::vector<Var> hf(L), hb(L);
  Var h = t.zeros(H), c = t.zeros(H);
  for (int i = 0; i < L; ++i) {
    auto [h2, c2] = lstm_step(t, fwd, x[i], h, c);
    hf[i] = h2;
    h = h2;
    c = c2;
  }
  Var fwd_h = h, fwd_c = c;
  h = t.zeros(H);
  c = t.zeros(H);
  for (int i = L - 1; i >= 0; --i) {
    auto [h2, c2] = lstm_step(t, bwd, x[i], h, c);
    hb[i] = h2;
    h = h2;
    c = c2;
  }
  EncodeVars out;
  out.states.resize(L);
  for (int i = 0; i < L; ++i) out.states[i] = t.concat(hf[i], hb[i]);
  out.final_h = t.concat(fwd_h, h);
  out.final_c = t.concat(fwd_c, c);
  return out;
}

// Sampling vs. forced replay of recorded decisions.
struct DecisionSource {
  Rng* rng = nullptr;
  const StepDecision* forced = nullptr;
};

int sample_categorical(const std::vector<double>& probs,
                       const std::vector<uint8_t>& mask, Rng& rng) {
  double r = rng.uniform01();
  double acc = 0;
  int last_valid = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (!mask[i]) continue;
    last_valid = static_cast<int>(i);
    acc += probs[i];
    if (r < acc) return last_valid;
  }
  return last_valid;
}

struct StepOutcome {
  StepDecision decision;
  std::vector<Var> logps;
  std::vector<TransformAction> actions;
};

StepOutcome run_wider_step(Tape& t, const ArchitectureSpec& spec,
                           const WidthTable& table, const EncodeVars& enc,
                           DecisionSource src) {
  int L = static_cast<int>(spec.layers.size());
  StepOutcome out;
  out.decision.kind = StepKind::Wider;
  out.decision.wider.widen.assign(L, 0);
  Var w = t.param("wider.w");
  Var b = t.param("wider.b");
  for (int i = 0; i < L; ++i) {
    if (!widen_eligible(spec, i, table)) continue;
    Var z = t.add(t.dot(w, enc.states[i]), b);
    bool widen;
    if (src.forced) {
      widen = src.forced->wider.widen[i] != 0;
    } else {
      double prob = 1.0 / (1.0 + std::exp(-t.scalar(z)));
      widen = src.rng->bernoulli(prob);
    }
    out.logps.push_back(t.bernoulli_logprob(z, widen));
    out.decision.wider.widen[i] = widen ? 1 : 0;
    if (widen) out.actions.push_back(WidenAction{i});
  }
  return out;
}

StepOutcome run_deeper_step(Tape& t, const ArchitectureSpec& spec,
                            const ControllerParams& p, const WidthTable& table,
                            const EncodeVars& enc, DecisionSource src) {
  const ControllerConfig& cfg = p.cfg;
  int S = cfg.state_dim(), DI = cfg.dec_input;
  StepOutcome out;
  out.decision.kind = StepKind::Deeper;

  std::vector<BlockRange> blocks = split_blocks(spec);
  std::vector<std::vector<int>> options = valid_deepen_indices(spec, table);
  if (static_cast<int>(blocks.size()) > cfg.max_blocks)
    throw std::invalid_argument("architecture exceeds max_blocks");

  std::vector<uint8_t> block_mask(cfg.max_blocks, 0);
  bool any = false;
  for (size_t bidx = 0; bidx < blocks.size(); ++bidx) {
    if (!options[bidx].empty()) {
      block_mask[bidx] = 1;
      any = true;
    }
  }
  if (!any) {
    out.decision.deeper.noop = true;
    return out;
  }

  LstmSpans cell{t.param("dec.wx"), t.param("dec.wh"), t.param("dec.b"), DI,
                 S};
  Var h = enc.final_h, c = enc.final_c;

  auto categorical = [&](Var logits, const std::vector<uint8_t>& mask,
                         int forced_choice) {
    int choice;
    if (src.forced) {
      choice = forced_choice;
      if (choice < 0 || choice >= static_cast<int>(mask.size()) ||
          !mask[choice])
        throw std::invalid_argument("forced decision violates the mask");
    } else {
      choice = sample_categorical(t.masked_softmax(logits, mask), mask,
                                  *src.rng);
    }
    out.logps.push_back(t.masked_log_softmax_pick(logits, mask, choice));
    return choice;
  };

  // Block.
  auto [h1, c1] = lstm_step(t, cell, t.param("dec.start"), h, c);
  Var block_logits = t.add(t.matvec(t.param("head.block_w"), cfg.max_blocks, S,
                                    h1),
                           t.param("head.block_b"));
  int block = categorical(block_logits, block_mask,
                          src.forced ? src.forced->deeper.block : -1);

  // Index within the block.
  if (static_cast<int>(blocks[block].count) + 1 > cfg.max_index)
    throw std::invalid_argument("block exceeds max_index");
  std::vector<uint8_t> index_mask(cfg.max_index, 0);
  for (int idx : options[block]) index_mask[idx] = 1;
  auto [h2, c2] = lstm_step(
      t, cell, t.slice(t.param("dec.block_emb"), block * DI, DI), h1, c1);
  Var index_logits = t.add(t.matvec(t.param("head.index_w"), cfg.max_index, S,
                                    h2),
                           t.param("head.index_b"));
  int index = categorical(index_logits, index_mask,
                          src.forced ? src.forced->deeper.index : -1);

  DeepenAction action;
  action.block = block;
  action.index = index;
  out.decision.deeper.block = block;
  out.decision.deeper.index = index;

  if (!blocks[block].is_fc) {
    std::vector<uint8_t> filter_mask(3, 1);
    auto [h3, c3] = lstm_step(
        t, cell, t.slice(t.param("dec.index_emb"), index * DI, DI), h2, c2);
    Var filter_logits = t.add(t.matvec(t.param("head.filter_w"), 3, S, h3),
                              t.param("head.filter_b"));
    int fc = categorical(filter_logits, filter_mask,
                         src.forced ? src.forced->deeper.filter_choice : -1);
    out.decision.deeper.filter_choice = fc;
    action.filter_size = kFilterChoices[fc];
  }
  out.actions.push_back(action);
  return out;
}

struct TrajectoryRun {
  Trajectory traj;
  std::vector<Var> logps;
};

TrajectoryRun run_trajectory(Tape& t, const ArchitectureSpec& start,
                             const ControllerParams& p, const WidthTable& table,
                             const std::vector<StepKind>& schedule, Rng* rng,
                             const Trajectory* forced) {
  TrajectoryRun run;
  run.traj.start_arch = start;
  ArchitectureSpec arch = start;
  for (size_t s = 0; s < schedule.size(); ++s) {
    EncodeVars enc = encode_on_tape(t, arch, p, table);
    DecisionSource src;
    if (forced) {
      src.forced = &forced->steps[s];
      if (forced->steps[s].kind != schedule[s])
        throw std::invalid_argument("schedule mismatch on replay");
    } else {
      src.rng = rng;
    }
    StepOutcome outcome =
        schedule[s] == StepKind::Wider
            ? run_wider_step(t, arch, table, enc, src)
            : run_deeper_step(t, arch, p, table, enc, src);
    for (const TransformAction& a : outcome.actions) {
      arch = apply_action_to_spec(arch, a, table);
      run.traj.actions.push_back(a);
    }
    run.traj.steps.push_back(outcome.decision);
    run.logps.insert(run.logps.end(), outcome.logps.begin(),
                     outcome.logps.end());
  }
  run.traj.result_arch = arch;
  return run;
}

std::vector<StepKind> schedule_of(const Trajectory& traj) {
  std::vector<StepKind> out;
  for (const StepDecision& s : traj.steps) out.push_back(s.kind);
  return out;
}

void adam_step(ControllerParams& p) {
  ++p.adam_t;
  const ControllerConfig& cfg = p.cfg;
  double corr1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(p.adam_t));
  double corr2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(p.adam_t));
  for (size_t i = 0; i < p.store.theta.size(); ++i) {
    double g = p.store.grad[i];
    p.adam_m[i] = cfg.adam_beta1 * p.adam_m[i] + (1.0 - cfg.adam_beta1) * g;
    p.adam_v[i] =
        cfg.adam_beta2 * p.adam_v[i] + (1.0 - cfg.adam_beta2) * g * g;
    double mhat = p.adam_m[i] / corr1;
    double vhat = p.adam_v[i] / corr2;
    p.store.theta[i] -= cfg.adam_lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

}  // namespace

EncodeValues encode_architecture(const ArchitectureSpec& spec,
                                 const ControllerParams& params,
                                 const WidthTable& table) {
  ParamStore& store = const_cast<ParamStore&>(params.store);
  Tape t(&store);
  EncodeVars enc = encode_on_tape(t, spec, params, table);
  EncodeValues out;
  for (Var v : enc.states) out.layer_states.push_back(t.value(v));
  out.final_state = t.value(enc.final_h);
  return out;
}

WiderResult wider_decisions(const ArchitectureSpec& spec,
                            const ControllerParams& params,
                            const WidthTable& table, Rng& rng) {
  ParamStore& store = const_cast<ParamStore&>(params.store);
  Tape t(&store);
  EncodeVars enc = encode_on_tape(t, spec, params, table);
  DecisionSource src;
  src.rng = &rng;
  StepOutcome o = run_wider_step(t, spec, table, enc, src);
  WiderResult res;
  res.widen = o.decision.wider.widen;
  res.eligible.assign(spec.layers.size(), 0);
  res.log_probs.assign(spec.layers.size(), 0.0);
  res.p_widen.assign(spec.layers.size(), 0.0);
  size_t lp = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (!widen_eligible(spec, static_cast<int>(i), table)) continue;
    res.eligible[i] = 1;
    double logp = t.scalar(o.logps[lp]);
    res.log_probs[i] = logp;
    res.p_widen[i] = res.widen[i] ? std::exp(logp) : 1.0 - std::exp(logp);
    ++lp;
  }
  return res;
}

DeeperResult deeper_decision(const ArchitectureSpec& spec,
                             const ControllerParams& params,
                             const WidthTable& table, Rng& rng) {
  ParamStore& store = const_cast<ParamStore&>(params.store);
  Tape t(&store);
  EncodeVars enc = encode_on_tape(t, spec, params, table);
  DecisionSource src;
  src.rng = &rng;
  StepOutcome o = run_deeper_step(t, spec, params, table, enc, src);
  DeeperResult res;
  if (o.decision.deeper.noop) return res;
  res.action = std::get<DeepenAction>(o.actions.at(0));
  for (Var v : o.logps) res.log_prob += t.scalar(v);
  return res;
}

std::vector<StepKind> default_schedule(int deeper_steps, int wider_steps) {
  std::vector<StepKind> out;
  for (int i = 0; i < deeper_steps; ++i) out.push_back(StepKind::Deeper);
  for (int i = 0; i < wider_steps; ++i) out.push_back(StepKind::Wider);
  return out;
}

Trajectory rollout(const ArchitectureSpec& start,
                   const ControllerParams& params,
                   const std::vector<StepKind>& schedule,
                   const WidthTable& table, Rng& rng) {
  ParamStore& store = const_cast<ParamStore&>(params.store);
  Tape t(&store);
  TrajectoryRun run =
      run_trajectory(t, start, params, table, schedule, &rng, nullptr);
  for (Var v : run.logps) run.traj.log_prob += t.scalar(v);

  // Replaying the recorded actions must land on the recorded result.
  ArchitectureSpec check = start;
  for (const TransformAction& a : run.traj.actions)
    check = apply_action_to_spec(check, a, table);
  if (!(check == run.traj.result_arch))
    throw std::logic_error("action replay does not reproduce the rollout");
  return run.traj;
}

double replay_log_prob(const Trajectory& traj, const ControllerParams& params,
                       const WidthTable& table) {
  ParamStore& store = const_cast<ParamStore&>(params.store);
  Tape t(&store);
  TrajectoryRun run = run_trajectory(t, traj.start_arch, params, table,
                                     schedule_of(traj), nullptr, &traj);
  double total = 0;
  for (Var v : run.logps) total += t.scalar(v);
  return total;
}

double reward_transform(double acc, bool* clamped) {
  if (clamped) *clamped = false;
  if (acc < 0.0) throw std::invalid_argument("accuracy below zero");
  if (acc >= 1.0) {
    acc = 1.0 - 1e-6;
    if (clamped) *clamped = true;
  }
  // Half-angle form of tan(acc*pi/2); exact at 0 and 0.5, stable on [0, 1).
  return std::sin(kPi * acc) / (1.0 + std::cos(kPi * acc));
}

double reinforce_loss_and_grad(const std::vector<Trajectory>& trajectories,
                               ControllerParams& params,
                               const WidthTable& table) {
  params.store.zero_grad();
  std::vector<const Trajectory*> used;
  for (const Trajectory& t : trajectories)
    if (t.has_reward && !t.failed) used.push_back(&t);
  if (used.empty()) return 0.0;

  Tape t(&params.store);
  std::vector<Var> terms;
  double k = static_cast<double>(used.size());
  for (const Trajectory* traj : used) {
    TrajectoryRun run = run_trajectory(t, traj->start_arch, params, table,
                                       schedule_of(*traj), nullptr, traj);
    if (run.logps.empty()) continue;
    Var sum = t.add_many(run.logps);
    terms.push_back(t.scale(sum, -traj->advantage / k));
  }
  if (terms.empty()) return 0.0;
  Var loss = t.add_many(terms);
  t.backward(loss);
  return t.scalar(loss);
}

std::optional<double> reinforce_update(std::vector<Trajectory>& trajectories,
                                       BaselineState& baseline,
                                       ControllerParams& params,
                                       const WidthTable& table) {
  double sum = 0;
  int n = 0;
  for (const Trajectory& t : trajectories)
    if (t.has_reward && !t.failed) {
      sum += t.reward;
      ++n;
    }
  if (n == 0) return std::nullopt;
  double mean_r = sum / n;
  if (!baseline.initialized) baseline.observe(mean_r);
  for (Trajectory& t : trajectories)
    if (t.has_reward && !t.failed) t.advantage = t.reward - baseline.value;

  double loss = reinforce_loss_and_grad(trajectories, params, table);
  if (!std::isfinite(loss)) throw std::runtime_error("non-finite policy loss");
  adam_step(params);
  baseline.observe(mean_r);
  return loss;
}

}  // namespace eas
