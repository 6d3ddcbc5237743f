#include "eas/config.hpp"

#include <fstream>
#include <sstream>

namespace eas {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig rc;
  SearchConfig& sc = rc.search;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(line_no) +
                               ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    auto as_int = [&]() { return std::stoi(val); };
    auto as_u64 = [&]() { return std::stoull(val); };
    auto as_real = [&]() { return std::stod(val); };

    if (key == "dataset") sc.dataset = val;
    else if (key == "n_val") sc.n_val = as_int();
    else if (key == "seed") sc.seed = as_u64();
    else if (key == "samples_per_step") sc.samples_per_step = as_int();
    else if (key == "finetune_epochs") sc.finetune_epochs = as_int();
    else if (key == "deeper_steps") sc.deeper_steps = as_int();
    else if (key == "wider_steps") sc.wider_steps = as_int();
    else if (key == "stage1_budget") sc.stage1_budget = as_int();
    else if (key == "stage2_budget") sc.stage2_budget = as_int();
    else if (key == "intermediate_epochs") sc.intermediate_epochs = as_int();
    else if (key == "workers") sc.workers = as_int();
    else if (key == "calib_batch") sc.calib_batch = as_int();
    else if (key == "reward_mode") {
      if (val == "real") sc.reward_mode = RewardMode::RealTraining;
      else if (val == "surrogate") sc.reward_mode = RewardMode::Surrogate;
      else throw std::runtime_error("reward_mode must be real|surrogate");
    } else if (key == "batch_size") sc.train.batch_size = as_int();
    else if (key == "lr0") sc.train.lr0 = as_real();
    else if (key == "momentum") sc.train.momentum = as_real();
    else if (key == "weight_decay") sc.train.weight_decay = as_real();
    else if (key == "lr_schedule") {
      if (val == "cosine") sc.train.lr_schedule = LrSchedule::Cosine;
      else if (val == "constant") sc.train.lr_schedule = LrSchedule::Constant;
      else throw std::runtime_error("lr_schedule must be cosine|constant");
    } else if (key == "augment") sc.train.augment = as_int() != 0;
    else if (key == "controller_lr") sc.controller.adam_lr = as_real();
    else if (key == "embed_dim") sc.controller.embed_dim = as_int();
    else if (key == "enc_hidden") sc.controller.enc_hidden = as_int();
    else if (key == "dec_input") sc.controller.dec_input = as_int();
    else if (key == "max_blocks") sc.controller.max_blocks = as_int();
    else if (key == "max_index") sc.controller.max_index = as_int();
    else if (key == "surrogate_depth_weight") sc.surrogate.depth_weight = as_real();
    else if (key == "surrogate_width_weight") sc.surrogate.width_weight = as_real();
    else if (key == "surrogate_noise") sc.surrogate.noise_sigma = as_real();
    else if (key == "surrogate_seed") sc.surrogate.seed = as_u64();
    else if (key == "start_net") rc.start_net = val;
    else if (key == "start_weights") rc.start_weights = val;
    else if (key == "start_epochs") rc.start_epochs = as_int();
    else
      throw std::runtime_error("unknown config key '" + key + "' (line " +
                               std::to_string(line_no) + ")");
  }
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace eas
