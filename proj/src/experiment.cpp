#include "eas/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

namespace eas {

using ordered_json = nlohmann::ordered_json;

std::string record_to_json(const ExperimentRecord& rec) {
  ordered_json j;
  j["id"] = rec.id;
  j["stage"] = rec.stage;
  j["step"] = rec.step;
  j["parent_id"] = rec.parent_id;
  j["actions"] = rec.actions;
  j["arch"] = rec.arch_doc;
  j["params_path"] = rec.params_path;
  j["pre_finetune_accuracy"] = rec.pre_finetune_accuracy;
  j["val_accuracy"] = rec.val_accuracy;
  j["reward"] = rec.reward;
  j["baseline"] = rec.baseline;
  j["finetune_epochs"] = rec.finetune_epochs;
  j["wall_time"] = rec.wall_time;
  j["status"] = rec.status;
  return j.dump();
}

ExperimentRecord record_from_json(const std::string& line) {
  ordered_json j = ordered_json::parse(line);
  ExperimentRecord rec;
  rec.id = j.at("id").get<std::string>();
  rec.stage = j.at("stage").get<int>();
  rec.step = j.at("step").get<int>();
  rec.parent_id = j.at("parent_id").get<std::string>();
  rec.actions = j.at("actions").get<std::vector<std::string>>();
  rec.arch_doc = j.at("arch").get<std::string>();
  rec.params_path = j.at("params_path").get<std::string>();
  rec.pre_finetune_accuracy = j.at("pre_finetune_accuracy").get<double>();
  rec.val_accuracy = j.at("val_accuracy").get<double>();
  rec.reward = j.at("reward").get<double>();
  rec.baseline = j.at("baseline").get<double>();
  rec.finetune_epochs = j.at("finetune_epochs").get<int>();
  rec.wall_time = j.at("wall_time").get<double>();
  rec.status = j.at("status").get<std::string>();
  return rec;
}

void append_record(const std::string& path, const ExperimentRecord& rec) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path);
  out << record_to_json(rec) << "\n";
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ExperimentRecord> read_records(const std::string& path,
                                           int* skipped_lines) {
  if (skipped_lines) *skipped_lines = 0;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<ExperimentRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const std::exception&) {
      if (skipped_lines) ++(*skipped_lines);
    }
  }
  return out;
}

std::vector<ReportRow> report(const std::vector<ExperimentRecord>& records) {
  std::vector<ReportRow> rows;
  double best = 0;
  for (const ExperimentRecord& rec : records) {
    if (rows.empty() || rows.back().stage != rec.stage ||
        rows.back().step != rec.step) {
      ReportRow row;
      row.stage = rec.stage;
      row.step = rec.step;
      row.best_so_far = best;
      rows.push_back(row);
    }
    ReportRow& row = rows.back();
    ++row.n_sampled;
    if (rec.status == "ok") {
      // mean_acc holds the running sum until the final pass below.
      row.mean_acc += rec.val_accuracy;
      row.max_acc = std::max(row.max_acc, rec.val_accuracy);
      best = std::max(best, rec.val_accuracy);
      row.best_so_far = best;
    } else {
      ++row.failures;
    }
  }
  for (ReportRow& row : rows) {
    int ok = row.n_sampled - row.failures;
    row.mean_acc = ok > 0 ? row.mean_acc / ok : 0.0;
  }
  return rows;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out =
      "stage,step,n_sampled,mean_acc,max_acc,best_so_far,failures\n";
  char buf[160];
  for (const ReportRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f,%.6f,%d\n", r.stage,
                  r.step, r.n_sampled, r.mean_acc, r.max_acc, r.best_so_far,
                  r.failures);
    out += buf;
  }
  return out;
}

}  // namespace eas
