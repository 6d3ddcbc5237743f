// eas: architecture search, network transformation, training and reporting.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "eas/config.hpp"
#include "eas/search.hpp"
#include "eas/weights.hpp"

namespace fs = std::filesystem;
using namespace eas;

namespace {

ArchitectureSpec load_arch(const std::string& net) {
  if (net == "table1") return start_point_network();
  std::ifstream in(net);
  if (!in) throw std::runtime_error("cannot open " + net);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

struct NetOnDisk {
  ArchitectureSpec spec;
  NetworkParams<float> params32;
  NetworkParams<double> params64;
  bool is64 = false;
};

NetOnDisk load_net_dir(const std::string& dir) {
  NetOnDisk net;
  net.spec = load_arch(dir + "/net.arch");
  std::string wpath = dir + "/weights.easw";
  net.is64 = weights_dtype(wpath) == 1;
  if (net.is64)
    net.params64 = load_weights<double>(net.spec, wpath);
  else
    net.params32 = load_weights<float>(net.spec, wpath);
  return net;
}

int cmd_search(const std::string& config_path, const std::string& out_dir,
               uint64_t seed_override, bool has_seed,
               bool save_child_weights) {
  RunConfig rc = load_config(config_path);
  if (has_seed) rc.search.seed = seed_override;
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/best");
  if (save_child_weights) fs::create_directories(out_dir + "/weights");

  ArchitectureSpec start = load_arch(rc.start_net);
  ValidationReport rep = validate_architecture(start);
  if (!rep.ok) throw std::runtime_error("invalid start net: " + rep.violations.front());

  NetworkParams<float> start_params;
  if (!rc.start_weights.empty()) {
    start_params = load_weights<float>(start, rc.start_weights);
  } else {
    start_params =
        init_params<float>(start, derive_seed(rc.search.seed, 0x57a7u));
    if (rc.search.reward_mode == RewardMode::RealTraining &&
        rc.start_epochs > 0) {
      auto [train_set, val_set] = prepare_datasets(rc.search);
      TrainConfig tc = rc.search.train;
      tc.epochs = rc.start_epochs;
      tc.seed = derive_seed(rc.search.seed, 0x57a8u);
      std::cout << "training start point for " << tc.epochs << " epochs...\n";
      train(start, start_params, train_set, tc);
      std::cout << "start point val accuracy: "
                << evaluate(start, start_params, val_set) << "\n";
    }
  }

  std::string log_path = out_dir + "/log.jsonl";
  PersistHooks hooks;
  hooks.append = [&](const ExperimentRecord& rec) {
    append_record(log_path, rec);
  };
  if (save_child_weights) {
    hooks.save_weights = [&](const std::string& id,
                             const ArchitectureSpec& spec,
                             const NetworkParams<float>& params) {
      std::string rel = "weights/" + id + ".easw";
      save_weights(spec, params, out_dir + "/" + rel);
      return rel;
    };
  }

  SearchResult result =
      two_stage_search(start, start_params, rc.search, hooks);
  write_file(out_dir + "/best/net.arch", serialize(result.best_spec));
  if (rc.search.reward_mode == RewardMode::RealTraining)
    save_weights(result.best_spec, result.best_params,
                 out_dir + "/best/weights.easw");
  write_file(out_dir + "/report.csv", report_csv(report(result.records)));
  std::cout << "sampled " << result.records.size()
            << " networks; best val accuracy " << result.best_accuracy
            << "\n";
  return 0;
}

int cmd_transform(const std::string& net, const std::string& weights,
                  const std::string& action_text, const std::string& out_dir,
                  const std::string& data, uint64_t seed) {
  ArchitectureSpec spec = load_arch(net);
  TransformAction action = action_from_text(action_text);
  WidthTable table = WidthTable::standard();
  fs::create_directories(out_dir);
  Rng rng(derive_seed(seed, 0x7f03u));

  int dtype = weights_dtype(weights);
  if (dtype == 1) {
    NetworkParams<double> params = load_weights<double>(spec, weights);
    Tensor<double> calib;
    if (!data.empty()) {
      LabeledImageSet set = load_dataset(data);
      std::vector<int> idx(std::min(256, set.size()));
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      calib = gather_batch<double>(set, idx);
    }
    auto res = apply_transform(spec, params, action, table,
                               calib.empty() ? nullptr : &calib, rng);
    write_file(out_dir + "/net.arch", serialize(res.spec));
    save_weights(res.spec, res.params, out_dir + "/weights.easw");
  } else {
    NetworkParams<float> params = load_weights<float>(spec, weights);
    Tensor<float> calib;
    if (!data.empty()) {
      LabeledImageSet set = load_dataset(data);
      std::vector<int> idx(std::min(256, set.size()));
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      calib = gather_batch<float>(set, idx);
    }
    auto res = apply_transform(spec, params, action, table,
                               calib.empty() ? nullptr : &calib, rng);
    write_file(out_dir + "/net.arch", serialize(res.spec));
    save_weights(res.spec, res.params, out_dir + "/weights.easw");
  }
  std::cout << "applied: " << action_text << "\n";
  return 0;
}

int cmd_verify(const std::string& old_dir, const std::string& new_dir,
               double tol, int inputs, uint64_t seed) {
  NetOnDisk a = load_net_dir(old_dir);
  NetOnDisk b = load_net_dir(new_dir);
  PreservationReport rep;
  if (a.is64 || b.is64) {
    NetworkParams<double> pa =
        a.is64 ? std::move(a.params64) : a.params32.cast<double>();
    NetworkParams<double> pb =
        b.is64 ? std::move(b.params64) : b.params32.cast<double>();
    rep = verify_preservation(a.spec, pa, b.spec, pb, inputs, tol, seed);
  } else {
    rep = verify_preservation(a.spec, a.params32, b.spec, b.params32, inputs,
                              tol, seed);
  }
  std::cout << "max_abs_diff " << rep.max_abs_diff << " tolerance " << tol
            << " -> " << (rep.pass ? "PASS" : "FAIL") << "\n";
  return rep.pass ? 0 : 1;
}

int cmd_train(const std::string& net, const std::string& weights,
              const std::string& data, int epochs, const std::string& out_dir,
              uint64_t seed, double lr0, int batch_size, bool augment) {
  ArchitectureSpec spec = load_arch(net);
  fs::create_directories(out_dir);
  LabeledImageSet set = load_dataset(data);
  normalize(set);
  NetworkParams<float> params =
      weights.empty() ? init_params<float>(spec, derive_seed(seed, 0x141u))
                      : load_weights<float>(spec, weights);
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.lr0 = lr0;
  cfg.batch_size = batch_size;
  cfg.augment = augment;
  std::vector<EpochPoint> curve = train(spec, params, set, cfg);
  std::string csv = "epoch,loss,accuracy\n";
  for (const EpochPoint& p : curve) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", p.epoch, p.loss,
                  p.accuracy);
    csv += buf;
  }
  write_file(out_dir + "/curve.csv", csv);
  save_weights(spec, params, out_dir + "/weights.easw");
  write_file(out_dir + "/net.arch", serialize(spec));
  if (!curve.empty())
    std::cout << "final train accuracy " << curve.back().accuracy << "\n";
  return 0;
}

std::string stats_csv(const std::vector<StepStats>& stats) {
  std::string out = "step,mean_acc,max_acc,mean_reward\n";
  for (const StepStats& s : stats) {
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", s.step, s.mean_acc,
                  s.max_acc, s.mean_reward);
    out += buf;
  }
  return out;
}

int cmd_compare(const std::string& mode, const std::string& config_path,
                const std::string& out_dir, int budget, uint64_t seed_override,
                bool has_seed) {
  RunConfig rc = load_config(config_path);
  if (has_seed) rc.search.seed = seed_override;
  fs::create_directories(out_dir);
  ArchitectureSpec start = load_arch(rc.start_net);
  NetworkParams<float> start_params;
  if (!rc.start_weights.empty())
    start_params = load_weights<float>(start, rc.start_weights);
  else if (rc.search.reward_mode == RewardMode::RealTraining)
    throw std::runtime_error("compare in real mode needs start_weights");

  if (budget <= 0) budget = rc.search.stage1_budget;
  if (mode == "both") {
    CompareResult res =
        compare_rl_vs_random(start, start_params, rc.search, budget);
    write_file(out_dir + "/rl.csv", stats_csv(res.rl));
    write_file(out_dir + "/random.csv", stats_csv(res.random));
    std::cout << "wrote rl.csv and random.csv under " << out_dir << "\n";
  } else {
    SearchConfig cfg = rc.search;
    cfg.policy = mode == "rl" ? PolicyKind::RL : PolicyKind::Random;
    std::vector<ExperimentRecord> recs =
        run_policy_series(start, start_params, cfg, budget, PersistHooks{});
    write_file(out_dir + "/" + mode + ".csv",
               stats_csv(stats_from_records(recs)));
    std::cout << "wrote " << mode << ".csv under " << out_dir << "\n";
  }
  return 0;
}

int cmd_report(const std::string& log_path, const std::string& csv_path) {
  int skipped = 0;
  std::vector<ExperimentRecord> records = read_records(log_path, &skipped);
  if (skipped > 0)
    std::cerr << "warning: skipped " << skipped
              << " malformed/truncated line(s)\n";
  std::vector<ReportRow> rows = report(records);
  if (!csv_path.empty()) write_file(csv_path, report_csv(rows));

  std::cout << "stage step  n   mean_acc  max_acc  best_so_far failures\n";
  for (const ReportRow& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%5d %4d %3d  %8.4f %8.4f %12.4f %8d\n",
                  r.stage, r.step, r.n_sampled, r.mean_acc, r.max_acc,
                  r.best_so_far, r.failures);
    std::cout << buf;
  }
  // Parameter counts of the best architectures, from the stored documents.
  double best = -1;
  std::string best_id;
  int64_t best_params = 0;
  for (const ExperimentRecord& rec : records) {
    if (rec.status != "ok" || rec.val_accuracy <= best) continue;
    best = rec.val_accuracy;
    best_id = rec.id;
    ArchitectureSpec spec = deserialize(rec.arch_doc);
    std::vector<LayerIO> io = compute_flow(spec);
    best_params = 0;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
      const LayerSpec& l = spec.layers[i];
      if (l.kind == LayerKind::Pool) continue;
      int64_t k = l.kind == LayerKind::Conv
                      ? static_cast<int64_t>(l.filter_size) * l.filter_size *
                            io[i].kernel_in * l.width
                      : static_cast<int64_t>(io[i].kernel_in) * l.width;
      best_params += k + l.width + (l.has_batchnorm ? 2LL * l.width : 0);
    }
  }
  if (best >= 0)
    std::cout << "best: " << best_id << " val_accuracy " << best << " params "
              << best_params << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"efficient architecture search by network transformation"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "eas-out";
  uint64_t seed = 0;
  bool save_children = false;
  auto* search_cmd = app.add_subcommand("search", "run the two-stage search");
  search_cmd->add_option("--config", config_path)->required();
  search_cmd->add_option("--out", out_dir);
  auto* search_seed = search_cmd->add_option("--seed", seed);
  search_cmd->add_flag("--save-child-weights", save_children);

  std::string net, weights, action_text, data;
  auto* transform_cmd =
      app.add_subcommand("transform", "apply one transformation");
  transform_cmd->add_option("--net", net)->required();
  transform_cmd->add_option("--weights", weights)->required();
  transform_cmd->add_option("--action", action_text)->required();
  transform_cmd->add_option("--out", out_dir)->required();
  transform_cmd->add_option("--data", data);
  transform_cmd->add_option("--seed", seed);

  std::string old_dir, new_dir;
  double tol = 1e-4;
  int inputs = 16;
  auto* verify_cmd =
      app.add_subcommand("verify", "check function preservation");
  verify_cmd->add_option("--old", old_dir)->required();
  verify_cmd->add_option("--new", new_dir)->required();
  verify_cmd->add_option("--tol", tol);
  verify_cmd->add_option("--inputs", inputs);
  verify_cmd->add_option("--seed", seed);

  int epochs = 20, batch_size = 64;
  double lr0 = 0.02;
  bool augment = false;
  auto* train_cmd = app.add_subcommand("train", "train a network");
  train_cmd->add_option("--net", net)->required();
  train_cmd->add_option("--weights", weights);
  train_cmd->add_option("--data", data)->required();
  train_cmd->add_option("--epochs", epochs);
  train_cmd->add_option("--out", out_dir);
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--lr0", lr0);
  train_cmd->add_option("--batch-size", batch_size);
  train_cmd->add_flag("--augment", augment);

  std::string mode = "both";
  int budget = 0;
  auto* compare_cmd =
      app.add_subcommand("compare", "rl vs random search series");
  compare_cmd->add_option("--mode", mode)
      ->check(CLI::IsMember({"rl", "random", "both"}));
  compare_cmd->add_option("--config", config_path)->required();
  compare_cmd->add_option("--out", out_dir);
  compare_cmd->add_option("--budget", budget);
  auto* compare_seed = compare_cmd->add_option("--seed", seed);

  std::string log_path, csv_path;
  auto* report_cmd = app.add_subcommand("report", "summarize a run log");
  report_cmd->add_option("--log", log_path)->required();
  report_cmd->add_option("--csv", csv_path);

  CLI11_PARSE(app, argc, argv);

  try {
    if (search_cmd->parsed())
      return cmd_search(config_path, out_dir, seed, search_seed->count() > 0,
                        save_children);
    if (transform_cmd->parsed())
      return cmd_transform(net, weights, action_text, out_dir, data, seed);
    if (verify_cmd->parsed())
      return cmd_verify(old_dir, new_dir, tol, inputs, seed);
    if (train_cmd->parsed())
      return cmd_train(net, weights, data, epochs, out_dir, seed, lr0,
                       batch_size, augment);
    if (compare_cmd->parsed())
      return cmd_compare(mode, config_path, out_dir, budget, seed,
                         compare_seed->count() > 0);
    if (report_cmd->parsed()) return cmd_report(log_path, csv_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
