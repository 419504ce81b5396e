#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weightlab/tensor_store.hpp"

namespace weightlab {

// Average parameter shift between a base model and a fine-tuned descendant:
// per tensor, the mean element-wise absolute difference; globally, the
// element-count-weighted mean over all compared tensors (the literal
// model-wide mean |difference|).
struct DeltaReport {
  std::string model_id;
  double global = 0.0;
  std::map<std::string, double> per_tensor;
  std::map<std::string, std::size_t> element_counts;
  std::vector<std::string> skipped;  // present on only one side, never dropped silently
};

double tensor_delta_avg(std::span<const double> original, std::span<const double> finetuned);
double tensor_delta_avg(const TensorData& original, const TensorData& finetuned);

DeltaReport model_delta_report(const TensorArchive& base, const TensorArchive& finetuned,
                               const std::string& model_id,
                               const std::optional<std::string>& name_filter = std::nullopt);

struct DeltaRatioRow {
  std::string model_id;
  double global = 0.0;
  double ratio = 1.0;  // +inf when the smallest global is zero
};

// Sorted descending by global shift; ratio is relative to the smallest global.
std::vector<DeltaRatioRow> delta_ratio(std::span<const DeltaReport> reports);

std::string delta_report_to_json(const DeltaReport& report);
DeltaReport delta_report_from_json(const std::string& text);
void save_delta_report(const DeltaReport& report, const std::filesystem::path& path);
DeltaReport load_delta_report(const std::filesystem::path& path);
void write_delta_csv(const DeltaReport& report, const std::filesystem::path& path);

}  // namespace weightlab
