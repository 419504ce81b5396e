#include "weightlab/merge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>

#include <nlohmann/json.hpp>

#include "weightlab/util.hpp"

namespace weightlab {
namespace {

constexpr const char* kGlobalKey = "__global__";

std::string mode_name(MergeMode m) {
  return m == MergeMode::Average ? "average" : "weighted";
}

std::string granularity_name(Granularity g) {
  return g == Granularity::PerTensor ? "per_tensor" : "per_model";
}

struct TensorJob {
  std::string name;
  Disposition disposition = Disposition::Merge;
  DType out_dtype = DType::F32;
  std::vector<std::size_t> shape;
  const TensorArchive* copy_from = nullptr;
};

const TensorArchive* find_source(const MergePlan& plan, const std::string& id) {
  for (const auto& s : plan.sources) {
    if (s.id == id) return s.archive;
  }
  throw ValidationError("unknown merge source \"" + id + "\"");
}

// Resolves dispositions shared by both merge modes. `base_like` is the
// source whose dtype/bytes back tensors that are not merged.
void resolve_dispositions(MergePlan& plan) {
  std::vector<const TensorArchive*> archives;
  for (const auto& s : plan.sources) archives.push_back(s.archive);
  const auto alignment = validate_alignment(archives);
  const auto& filter = plan.recipe.name_filter;
  const MergeInput& base_like = plan.sources.front();

  std::size_t merged = 0;
  for (const auto& name : alignment.shared) {
    if (!filter || glob_match(*filter, name)) {
      plan.dispositions[name] = Disposition::Merge;
      ++merged;
    } else {
      plan.dispositions[name] = Disposition::Copy;
      plan.copy_source[name] = base_like.id;
    }
  }
  if (merged == 0) {
    throw ValidationError("empty shared tensor set: nothing to merge");
  }
  for (const auto& name : alignment.shape_conflicts) {
    if (!filter || glob_match(*filter, name)) {
      throw ValidationError("shape conflict on tensor \"" + name + "\"");
    }
    plan.dispositions[name] = Disposition::Copy;
    plan.copy_source[name] = base_like.id;
  }
  for (const auto& name : alignment.partial) {
    switch (plan.recipe.nonshared.kind) {
      case NonsharedPolicy::Kind::Exclude:
        plan.dispositions[name] = Disposition::Exclude;
        break;
      case NonsharedPolicy::Kind::CopyFirst:
        for (const auto& s : plan.sources) {
          if (s.archive->contains(name)) {
            plan.copy_source[name] = s.id;
            break;
          }
        }
        plan.dispositions[name] = Disposition::Copy;
        break;
      case NonsharedPolicy::Kind::CopyFrom: {
        const TensorArchive* src = find_source(plan, plan.recipe.nonshared.source_id);
        if (!src->contains(name)) {
          throw ValidationError("nonshared policy copy_from \"" +
                                plan.recipe.nonshared.source_id +
                                "\" lacks tensor \"" + name + "\"");
        }
        plan.dispositions[name] = Disposition::Copy;
        plan.copy_source[name] = plan.recipe.nonshared.source_id;
        break;
      }
    }
  }

  for (const auto& [name, disp] : plan.dispositions) {
    if (disp == Disposition::Exclude) continue;
    if (plan.recipe.output_dtype) {
      plan.output_dtypes[name] = *plan.recipe.output_dtype;
    } else if (disp == Disposition::Merge) {
      plan.output_dtypes[name] = base_like.archive->meta(name).dtype;
    } else {
      plan.output_dtypes[name] =
          find_source(plan, plan.copy_source.at(name))->meta(name).dtype;
    }
  }
}

std::vector<unsigned char> encode_values(std::span<const double> values, DType dtype,
                                         bool saturate, const std::string& name) {
  const std::size_t width = byte_width(dtype);
  std::vector<unsigned char> bytes(values.size() * width);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!encode_scalar(dtype, values[i], bytes.data() + i * width, saturate)) {
      throw ValidationError("value " + std::to_string(values[i]) + " overflows " +
                            std::string(dtype_name(dtype)) + " (tensor \"" + name + "\")");
    }
  }
  return bytes;
}

std::vector<unsigned char> produce_tensor(const MergePlan& plan, const TensorJob& job) {
  if (job.disposition == Disposition::Copy) {
    const auto raw = job.copy_from->read_raw(job.name);
    if (job.copy_from->meta(job.name).dtype == job.out_dtype) return raw;
    const auto data = job.copy_from->read(job.name);
    return encode_values(data.values, job.out_dtype, plan.recipe.saturate, job.name);
  }

  const std::size_t first_candidate = plan.has_base ? 1 : 0;
  const std::size_t n = plan.candidate_count();
  std::vector<double> merged;

  if (plan.recipe.mode == MergeMode::Average) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = plan.sources[first_candidate + i].archive->read(job.name);
      if (merged.empty()) {
        merged = x.values;
      } else {
        for (std::size_t k = 0; k < merged.size(); ++k) merged[k] += x.values[k];
      }
    }
    const auto dn = static_cast<double>(n);
    for (auto& v : merged) v /= dn;
  } else {
    const auto base = plan.sources.front().archive->read(job.name);
    if (plan.recipe.alpha0 == 1.0) {
      merged = base.values;  // Eq. identity: full base retention
    } else {
      const auto& alphas = plan.weights_for(job.name);
      merged.assign(base.values.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto x = plan.sources[first_candidate + i].archive->read(job.name);
        const double a = alphas[i];
        for (std::size_t k = 0; k < merged.size(); ++k) merged[k] += a * x.values[k];
      }
      const double a0 = plan.recipe.alpha0;
      for (std::size_t k = 0; k < merged.size(); ++k) {
        merged[k] = a0 * base.values[k] + (1.0 - a0) * merged[k];
      }
    }
  }
  return encode_values(merged, job.out_dtype, plan.recipe.saturate, job.name);
}

std::vector<TensorJob> build_jobs(const MergePlan& plan) {
  std::vector<TensorJob> jobs;
  for (const auto& [name, disp] : plan.dispositions) {  // sorted: deterministic output
    if (disp == Disposition::Exclude) continue;
    TensorJob job;
    job.name = name;
    job.disposition = disp;
    job.out_dtype = plan.output_dtypes.at(name);
    if (disp == Disposition::Copy) {
      job.copy_from = find_source(plan, plan.copy_source.at(name));
      job.shape = job.copy_from->meta(name).shape;
    } else {
      job.shape = plan.sources.front().archive->meta(name).shape;
    }
    jobs.push_back(std::move(job));
  }
  return jobs;
}

void check_candidates(const std::vector<MergeInput>& models, std::size_t minimum) {
  if (models.size() < minimum) {
    throw ValidationError("merge requires at least " + std::to_string(minimum) +
                          " candidate models");
  }
  for (const auto& m : models) {
    if (!m.archive) throw ValidationError("null archive for model \"" + m.id + "\"");
  }
}

}  // namespace

NonsharedPolicy NonsharedPolicy::parse(const std::string& text) {
  NonsharedPolicy p;
  if (text == "exclude") {
    p.kind = Kind::Exclude;
  } else if (text == "copy_first") {
    p.kind = Kind::CopyFirst;
  } else if (text.rfind("copy_from:", 0) == 0) {
    p.kind = Kind::CopyFrom;
    p.source_id = text.substr(10);
    if (p.source_id.empty()) {
      throw ValidationError("nonshared_policy copy_from needs a model id");
    }
  } else {
    throw ValidationError("unknown nonshared_policy \"" + text + "\"");
  }
  return p;
}

std::string NonsharedPolicy::str() const {
  switch (kind) {
    case Kind::Exclude: return "exclude";
    case Kind::CopyFirst: return "copy_first";
    case Kind::CopyFrom: return "copy_from:" + source_id;
  }
  return "?";
}

void MergeRecipe::validate() const {
  if (!(alpha0 >= 0.0 && alpha0 <= 1.0)) {
    throw ValidationError("alpha0 must lie in [0, 1]");
  }
  if (!(temperature > 0.0)) {
    throw ValidationError("temperature must be positive");
  }
}

std::vector<double> softmax_weights(std::span<const double> deltas, double temperature) {
  if (deltas.empty()) throw ValidationError("softmax over empty delta vector");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  double hi = -std::numeric_limits<double>::infinity();
  for (double d : deltas) hi = std::max(hi, d / temperature);
  std::vector<double> w(deltas.size());
  double total = 0.0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    w[i] = std::exp(deltas[i] / temperature - hi);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

const std::vector<double>& MergePlan::weights_for(const std::string& tensor) const {
  if (recipe.granularity == Granularity::PerModel) return weights.at(kGlobalKey);
  return weights.at(tensor);
}

MergePlan plan_average_merge(const std::vector<MergeInput>& models, const MergeRecipe& recipe) {
  recipe.validate();
  check_candidates(models, 2);
  MergePlan plan;
  plan.recipe = recipe;
  plan.recipe.mode = MergeMode::Average;
  plan.has_base = false;
  plan.sources = models;
  resolve_dispositions(plan);

  const std::vector<double> uniform(models.size(), 1.0 / static_cast<double>(models.size()));
  if (recipe.granularity == Granularity::PerModel) {
    plan.weights[kGlobalKey] = uniform;
  } else {
    for (const auto& [name, disp] : plan.dispositions) {
      if (disp == Disposition::Merge) plan.weights[name] = uniform;
    }
  }
  return plan;
}

MergePlan plan_weighted_merge(const MergeInput& base, const std::vector<MergeInput>& models,
                              std::span<const DeltaReport> reports, const MergeRecipe& recipe) {
  recipe.validate();
  check_candidates(models, 1);
  if (!base.archive) throw ValidationError("null base archive");
  if (reports.size() != models.size()) {
    throw ValidationError("expected one delta report per candidate model (got " +
                          std::to_string(reports.size()) + " for " +
                          std::to_string(models.size()) + " models)");
  }
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (reports[i].model_id != models[i].id) {
      throw ValidationError("delta report \"" + reports[i].model_id +
                            "\" does not match model \"" + models[i].id + "\"");
    }
  }

  MergePlan plan;
  plan.recipe = recipe;
  plan.recipe.mode = MergeMode::Weighted;
  plan.has_base = true;
  plan.sources.push_back(base);
  for (const auto& m : models) plan.sources.push_back(m);
  resolve_dispositions(plan);

  if (recipe.granularity == Granularity::PerModel) {
    std::vector<double> globals;
    globals.reserve(reports.size());
    for (const auto& r : reports) globals.push_back(r.global);
    plan.weights[kGlobalKey] = softmax_weights(globals, recipe.temperature);
  } else {
    for (const auto& [name, disp] : plan.dispositions) {
      if (disp != Disposition::Merge) continue;
      std::vector<double> deltas;
      deltas.reserve(reports.size());
      for (const auto& r : reports) {
        auto it = r.per_tensor.find(name);
        if (it == r.per_tensor.end()) {
          throw ValidationError("delta report \"" + r.model_id +
                                "\" lacks per-tensor delta for \"" + name + "\"");
        }
        deltas.push_back(it->second);
      }
      plan.weights[name] = softmax_weights(deltas, recipe.temperature);
    }
  }
  return plan;
}

void execute_plan(const MergePlan& plan, const std::filesystem::path& out_path, int threads) {
  const auto jobs = build_jobs(plan);

  std::vector<TensorDecl> layout;
  layout.reserve(jobs.size());
  for (const auto& job : jobs) layout.push_back({job.name, job.out_dtype, job.shape});

  std::map<std::string, std::string> metadata;
  metadata["merge_mode"] = mode_name(plan.recipe.mode);
  ArchiveWriter writer(out_path, std::move(layout), metadata,
                       WriteOptions{plan.recipe.saturate});

  if (threads <= 1) {
    for (const auto& job : jobs) {
      const auto bytes = produce_tensor(plan, job);
      writer.append_raw(job.name, bytes);
    }
  } else {
    // Per-tensor work is pure over immutable archives; a bounded window of
    // futures keeps memory flat while the writer drains in declared order.
    const std::size_t window = static_cast<std::size_t>(threads) * 2;
    std::vector<std::future<std::vector<unsigned char>>> pending;
    std::size_t next_write = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      pending.push_back(std::async(std::launch::async,
                                   [&plan, &jobs, i] { return produce_tensor(plan, jobs[i]); }));
      while (pending.size() - next_write >= window ||
             (i + 1 == jobs.size() && next_write < pending.size())) {
        const auto bytes = pending[next_write].get();
        writer.append_raw(jobs[next_write].name, bytes);
        pending[next_write] = {};
        ++next_write;
      }
    }
  }
  writer.finish();
}

void average_merge(const std::vector<MergeInput>& models, const MergeRecipe& recipe,
                   const std::filesystem::path& out_path, int threads) {
  execute_plan(plan_average_merge(models, recipe), out_path, threads);
}

void weighted_merge(const MergeInput& base, const std::vector<MergeInput>& models,
                    std::span<const DeltaReport> reports, const MergeRecipe& recipe,
                    const std::filesystem::path& out_path, int threads) {
  execute_plan(plan_weighted_merge(base, models, reports, recipe), out_path, threads);
}

void write_weights_sidecar(const MergePlan& plan, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, w] : plan.weights) j[name] = w;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed on " + path.string());
}

std::string plan_to_json(const MergePlan& plan) {
  nlohmann::ordered_json j;
  j["mode"] = mode_name(plan.recipe.mode);
  j["alpha0"] = plan.recipe.alpha0;
  j["temperature"] = plan.recipe.temperature;
  j["granularity"] = granularity_name(plan.recipe.granularity);
  j["nonshared_policy"] = plan.recipe.nonshared.str();
  j["output_dtype"] = plan.recipe.output_dtype
                          ? std::string(dtype_name(*plan.recipe.output_dtype))
                          : std::string("preserve");
  if (plan.recipe.name_filter) j["name_filter"] = *plan.recipe.name_filter;
  j["sources"] = nlohmann::ordered_json::array();
  for (const auto& s : plan.sources) {
    j["sources"].push_back({{"id", s.id}, {"path", s.archive->path().string()}});
  }
  j["dispositions"] = nlohmann::ordered_json::object();
  for (const auto& [name, disp] : plan.dispositions) {
    switch (disp) {
      case Disposition::Merge: j["dispositions"][name] = "merge"; break;
      case Disposition::Copy:
        j["dispositions"][name] = "copy:" + plan.copy_source.at(name);
        break;
      case Disposition::Exclude: j["dispositions"][name] = "exclude"; break;
    }
  }
  j["weights"] = nlohmann::ordered_json::object();
  for (const auto& [name, w] : plan.weights) j["weights"][name] = w;
  return j.dump(2) + "\n";
}

RecipeFile load_recipe_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open recipe " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    throw ValidationError("malformed recipe JSON: " + path.string());
  }

  RecipeFile rf;
  const std::string mode = j.value("mode", "average");
  if (mode == "average") {
    rf.recipe.mode = MergeMode::Average;
  } else if (mode == "weighted") {
    rf.recipe.mode = MergeMode::Weighted;
  } else {
    throw ValidationError("unknown merge mode \"" + mode + "\"");
  }
  rf.recipe.alpha0 = j.value("alpha0", 0.5);
  rf.recipe.temperature = j.value("temperature", 1.0);
  const std::string gran = j.value("granularity", "per_tensor");
  if (gran == "per_tensor") {
    rf.recipe.granularity = Granularity::PerTensor;
  } else if (gran == "per_model") {
    rf.recipe.granularity = Granularity::PerModel;
  } else {
    throw ValidationError("unknown granularity \"" + gran + "\"");
  }
  rf.recipe.nonshared = NonsharedPolicy::parse(j.value("nonshared_policy", "copy_first"));
  const std::string od = j.value("output_dtype", "preserve");
  if (od != "preserve") {
    const auto dt = parse_dtype(od);
    if (!dt) throw ValidationError("unknown output_dtype \"" + od + "\"");
    rf.recipe.output_dtype = *dt;
  }
  if (j.contains("name_filter")) rf.recipe.name_filter = j["name_filter"].get<std::string>();
  rf.recipe.saturate = j.value("saturate", false);
  rf.recipe.validate();

  auto parse_input = [](const nlohmann::json& v, std::string* id,
                        std::filesystem::path* p) {
    if (v.is_string()) {
      *p = v.get<std::string>();
      *id = p->stem().string();
    } else if (v.is_object() && v.contains("path")) {
      *p = v["path"].get<std::string>();
      *id = v.value("id", p->stem().string());
    } else {
      throw ValidationError("model entries must be a path or {id, path}");
    }
  };

  if (rf.recipe.mode == MergeMode::Weighted) {
    if (!j.contains("base")) throw ValidationError("weighted recipe needs a base model");
    parse_input(j["base"], &rf.base_id, &rf.base_path);
  }
  if (!j.contains("models") || !j["models"].is_array() || j["models"].empty()) {
    throw ValidationError("recipe needs a non-empty models array");
  }
  for (const auto& v : j["models"]) {
    std::string id;
    std::filesystem::path p;
    parse_input(v, &id, &p);
    rf.model_ids.push_back(id);
    rf.model_paths.push_back(p);
  }
  if (j.contains("delta_reports")) {
    for (const auto& v : j["delta_reports"]) {
      rf.delta_report_paths.emplace_back(v.get<std::string>());
    }
  }
  if (j.contains("output")) rf.output = std::filesystem::path(j["output"].get<std::string>());
  return rf;
}

}  // namespace weightlab
