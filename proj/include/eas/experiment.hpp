// Experiment persistence: append-only JSONL records, readers that survive a
// truncated final line, and per-step report tables / CSV.
#pragma once

#include <string>
#include <vector>

namespace eas {

struct ExperimentRecord {
  std::string id;
  int stage = 0;
  int step = 0;
  std::string parent_id;
  std::vector<std::string> actions;  // canonical action text
  std::string arch_doc;              // eas-arch v1 document
  std::string params_path;           // relative to the run directory
  double pre_finetune_accuracy = 0;
  double val_accuracy = 0;
  double reward = 0;
  double baseline = 0;
  int finetune_epochs = 0;
  double wall_time = 0;  // seconds
  std::string status = "ok";
};

std::string record_to_json(const ExperimentRecord& rec);
ExperimentRecord record_from_json(const std::string& line);

// One JSON object per line, appended and flushed.
void append_record(const std::string& path, const ExperimentRecord& rec);

// Reads every complete record; a truncated final line is skipped and counted
// in *skipped_lines.
std::vector<ExperimentRecord> read_records(const std::string& path,
                                           int* skipped_lines = nullptr);

struct ReportRow {
  int stage = 0;
  int step = 0;
  int n_sampled = 0;
  double mean_acc = 0;   // over ok records
  double max_acc = 0;
  double best_so_far = 0;
  int failures = 0;
};

// Grouped per (stage, step) in order; best_so_far accumulates across rows.
std::vector<ReportRow> report(const std::vector<ExperimentRecord>& records);

// Columns: stage,step,n_sampled,mean_acc,max_acc,best_so_far,failures
std::string report_csv(const std::vector<ReportRow>& rows);

}  // namespace eas
