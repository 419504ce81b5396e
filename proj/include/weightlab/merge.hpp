#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weightlab/delta.hpp"
#include "weightlab/tensor_store.hpp"

namespace weightlab {

enum class MergeMode { Average, Weighted };
enum class Granularity { PerTensor, PerModel };

// What happens to tensors that are not shared by every input (e.g. encoder
// and projector stacks that only some candidates carry).
struct NonsharedPolicy {
  enum class Kind { Exclude, CopyFirst, CopyFrom };
  Kind kind = Kind::CopyFirst;
  std::string source_id;  // CopyFrom only

  static NonsharedPolicy parse(const std::string& text);
  std::string str() const;
};

struct MergeRecipe {
  MergeMode mode = MergeMode::Average;
  double alpha0 = 0.5;       // base retention weight, weighted mode only
  double temperature = 1.0;  // softmax temperature over the delta values
  Granularity granularity = Granularity::PerTensor;
  NonsharedPolicy nonshared;
  std::optional<DType> output_dtype;      // nullopt = preserve source dtypes
  std::optional<std::string> name_filter; // merge only matching tensors
  bool saturate = false;

  void validate() const;
};

// w_i = exp(d_i / t - max_j d_j / t) / sum_k ...; non-negative, sums to one,
// order preserving in the deltas.
std::vector<double> softmax_weights(std::span<const double> deltas, double temperature);

struct MergeInput {
  std::string id;
  const TensorArchive* archive = nullptr;
};

enum class Disposition { Merge, Copy, Exclude };

// Fully resolved dry run: weights, per-tensor dispositions and output dtypes.
// Executing the plan is the only way tensors get written, so plan-then-execute
// and the direct merge entry points cannot drift apart.
struct MergePlan {
  MergeRecipe recipe;
  bool has_base = false;           // sources[0] is the base when set
  std::vector<MergeInput> sources; // base first (weighted), then candidates
  std::map<std::string, Disposition> dispositions;
  std::map<std::string, std::string> copy_source;  // tensor -> source id
  std::map<std::string, DType> output_dtypes;      // written tensors only
  // "__global__" key when granularity is per_model; per merged tensor otherwise.
  std::map<std::string, std::vector<double>> weights;

  std::size_t candidate_count() const { return sources.size() - (has_base ? 1 : 0); }
  const std::vector<double>& weights_for(const std::string& tensor) const;
};

MergePlan plan_average_merge(const std::vector<MergeInput>& models, const MergeRecipe& recipe);
MergePlan plan_weighted_merge(const MergeInput& base, const std::vector<MergeInput>& models,
                              std::span<const DeltaReport> reports, const MergeRecipe& recipe);

void execute_plan(const MergePlan& plan, const std::filesystem::path& out_path,
                  int threads = 1);

void average_merge(const std::vector<MergeInput>& models, const MergeRecipe& recipe,
                   const std::filesystem::path& out_path, int threads = 1);
void weighted_merge(const MergeInput& base, const std::vector<MergeInput>& models,
                    std::span<const DeltaReport> reports, const MergeRecipe& recipe,
                    const std::filesystem::path& out_path, int threads = 1);

void write_weights_sidecar(const MergePlan& plan, const std::filesystem::path& path);
std::string plan_to_json(const MergePlan& plan);

// Declarative merge job as stored in a recipe file: the recipe plus input
// paths. Model ids default to the path stem.
struct RecipeFile {
  MergeRecipe recipe;
  std::string base_id;                       // weighted only
  std::filesystem::path base_path;           // weighted only
  std::vector<std::string> model_ids;
  std::vector<std::filesystem::path> model_paths;
  std::vector<std::filesystem::path> delta_report_paths;  // optional, weighted
  std::optional<std::filesystem::path> output;
};

RecipeFile load_recipe_file(const std::filesystem::path& path);

}  // namespace weightlab
