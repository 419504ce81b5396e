#include "weightlab/delta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "weightlab/util.hpp"

namespace weightlab {

double tensor_delta_avg(std::span<const double> original, std::span<const double> finetuned) {
  if (original.size() != finetuned.size()) {
    throw ValidationError("delta_avg size mismatch: " + std::to_string(original.size()) +
                          " vs " + std::to_string(finetuned.size()));
  }
  if (original.empty()) return 0.0;
  KahanSum sum;
  for (std::size_t i = 0; i < original.size(); ++i) {
    sum.add(std::fabs(original[i] - finetuned[i]));
  }
  return sum.value() / static_cast<double>(original.size());
}

double tensor_delta_avg(const TensorData& original, const TensorData& finetuned) {
  if (original.shape != finetuned.shape) {
    throw ValidationError("delta_avg shape mismatch");
  }
  return tensor_delta_avg(std::span<const double>(original.values),
                          std::span<const double>(finetuned.values));
}

DeltaReport model_delta_report(const TensorArchive& base, const TensorArchive& finetuned,
                               const std::string& model_id,
                               const std::optional<std::string>& name_filter) {
  const auto alignment = validate_alignment({&base, &finetuned});

  DeltaReport report;
  report.model_id = model_id;
  for (const auto& name : alignment.partial) report.skipped.push_back(name);

  std::vector<std::string> compared;
  for (const auto& name : alignment.shared) {
    if (name_filter && !glob_match(*name_filter, name)) {
      report.skipped.push_back(name);
      continue;
    }
    compared.push_back(name);
  }
  for (const auto& name : alignment.shape_conflicts) {
    if (!name_filter || glob_match(*name_filter, name)) {
      throw ValidationError("shape conflict on compared tensor \"" + name + "\"");
    }
    report.skipped.push_back(name);
  }
  if (compared.empty()) {
    throw ValidationError("no shared tensors to compare between " + base.path().string() +
                          " and " + finetuned.path().string());
  }
  std::sort(report.skipped.begin(), report.skipped.end());

  KahanSum weighted;
  std::size_t total_count = 0;
  for (const auto& name : compared) {
    const auto a = base.read(name);
    const auto b = finetuned.read(name);
    const double d = tensor_delta_avg(a, b);
    const std::size_t count = a.values.size();
    report.per_tensor[name] = d;
    report.element_counts[name] = count;
    weighted.add(d * static_cast<double>(count));
    total_count += count;
  }
  report.global = total_count ? weighted.value() / static_cast<double>(total_count) : 0.0;
  return report;
}

std::vector<DeltaRatioRow> delta_ratio(std::span<const DeltaReport> reports) {
  if (reports.empty()) {
    throw ValidationError("delta_ratio requires at least one report");
  }
  double min_global = std::numeric_limits<double>::infinity();
  for (const auto& r : reports) min_global = std::min(min_global, r.global);

  std::vector<DeltaRatioRow> rows;
  rows.reserve(reports.size());
  for (const auto& r : reports) {
    DeltaRatioRow row;
    row.model_id = r.model_id;
    row.global = r.global;
    row.ratio = min_global > 0.0 ? r.global / min_global
                                 : std::numeric_limits<double>::infinity();
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.global > b.global;
  });
  return rows;
}

std::string delta_report_to_json(const DeltaReport& report) {
  nlohmann::ordered_json j;
  j["model_id"] = report.model_id;
  j["global"] = report.global;
  j["per_tensor"] = nlohmann::ordered_json::object();
  for (const auto& [name, d] : report.per_tensor) j["per_tensor"][name] = d;
  j["skipped"] = report.skipped;
  j["element_counts"] = nlohmann::ordered_json::object();
  for (const auto& [name, c] : report.element_counts) j["element_counts"][name] = c;
  return j.dump(2) + "\n";
}

DeltaReport delta_report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object() || !j.contains("model_id") ||
      !j.contains("global") || !j.contains("per_tensor")) {
    throw ValidationError("malformed delta report JSON");
  }
  DeltaReport report;
  report.model_id = j["model_id"].get<std::string>();
  report.global = j["global"].get<double>();
  for (const auto& [name, d] : j["per_tensor"].items()) {
    report.per_tensor[name] = d.get<double>();
  }
  if (j.contains("skipped")) {
    report.skipped = j["skipped"].get<std::vector<std::string>>();
  }
  if (j.contains("element_counts")) {
    for (const auto& [name, c] : j["element_counts"].items()) {
      report.element_counts[name] = c.get<std::size_t>();
    }
  }
  return report;
}

void save_delta_report(const DeltaReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << delta_report_to_json(report);
  if (!out) throw IoError("write failed on " + path.string());
}

DeltaReport load_delta_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return delta_report_from_json(text);
}

void write_delta_csv(const DeltaReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << "name,count,delta_avg\n";
  out.precision(17);
  for (const auto& [name, d] : report.per_tensor) {
    out << name << "," << report.element_counts.at(name) << "," << d << "\n";
  }
  if (!out) throw IoError("write failed on " + path.string());
}

}  // namespace weightlab
