#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "weightlab/tensor_store.hpp"

namespace weightlab {

// Maps tensor names onto the attention geometry of a checkpoint. Name
// templates contain a "{layer}" placeholder. head_major states that the
// output projection consumes head-major concatenated head outputs (head h
// owns input columns [h*head_dim, (h+1)*head_dim)); otherwise columns are
// interleaved dimension-major (column = dim * n_heads + head).
struct ArchitectureSpec {
  int n_layers = 0;
  int n_heads = 0;
  int head_dim = 0;
  int hidden_dim = 0;
  std::string query_template;
  std::string key_template;
  std::string value_template;
  std::string output_template;
  bool head_major = true;

  void validate() const;  // n_heads * head_dim == hidden_dim, dims positive
  std::string resolve(const std::string& tmpl, int layer) const;
  std::string query_name(int layer) const { return resolve(query_template, layer); }
  std::string key_name(int layer) const { return resolve(key_template, layer); }
  std::string value_name(int layer) const { return resolve(value_template, layer); }
  std::string output_name(int layer) const { return resolve(output_template, layer); }
};

ArchitectureSpec load_architecture_spec(const std::filesystem::path& path);
void save_architecture_spec(const ArchitectureSpec& arch, const std::filesystem::path& path);

struct HeadMaskSpec {
  int layer = 0;
  int head = 0;

  friend bool operator<(const HeadMaskSpec& a, const HeadMaskSpec& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.head < b.head;
  }
  friend bool operator==(const HeadMaskSpec& a, const HeadMaskSpec& b) {
    return a.layer == b.layer && a.head == b.head;
  }
};

inline std::string mask_tag(const HeadMaskSpec& m) {
  return "masked_L" + std::to_string(m.layer) + "_H" + std::to_string(m.head);
}

// Writes a copy of the archive with one head exactly ablated: the output
// projection columns feeding that head's contribution into the residual
// stream are zeroed, every other byte is copied verbatim. Masking an
// already-masked head is a byte-level no-op.
void mask_head(const TensorArchive& archive, const ArchitectureSpec& arch,
               const HeadMaskSpec& mask, const std::filesystem::path& out_path);

// Full grid in row-major (layer-outer) order, n_layers * n_heads entries.
std::vector<HeadMaskSpec> enumerate_masks(const ArchitectureSpec& arch);

}  // namespace weightlab
