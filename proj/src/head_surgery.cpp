#include "weightlab/head_surgery.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace weightlab {

void ArchitectureSpec::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || hidden_dim <= 0) {
    throw ValidationError("architecture dimensions must be positive");
  }
  if (n_heads * head_dim != hidden_dim) {
    throw ValidationError("n_heads * head_dim must equal hidden_dim (" +
                          std::to_string(n_heads) + " * " + std::to_string(head_dim) +
                          " != " + std::to_string(hidden_dim) + ")");
  }
  if (query_template.empty() || key_template.empty() || value_template.empty() ||
      output_template.empty()) {
    throw ValidationError("architecture name templates must be non-empty");
  }
}

std::string ArchitectureSpec::resolve(const std::string& tmpl, int layer) const {
  const std::string placeholder = "{layer}";
  const auto pos = tmpl.find(placeholder);
  if (pos == std::string::npos) {
    throw ValidationError("name template \"" + tmpl + "\" lacks a {layer} placeholder");
  }
  std::string out = tmpl;
  out.replace(pos, placeholder.size(), std::to_string(layer));
  return out;
}

ArchitectureSpec load_architecture_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open architecture spec " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    throw ValidationError("malformed architecture spec JSON: " + path.string());
  }
  ArchitectureSpec arch;
  try {
    arch.n_layers = j.at("n_layers").get<int>();
    arch.n_heads = j.at("n_heads").get<int>();
    arch.head_dim = j.at("head_dim").get<int>();
    arch.hidden_dim = j.at("hidden_dim").get<int>();
    const auto& t = j.at("templates");
    arch.query_template = t.at("query").get<std::string>();
    arch.key_template = t.at("key").get<std::string>();
    arch.value_template = t.at("value").get<std::string>();
    arch.output_template = t.at("output").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("architecture spec " + path.string() + ": " + e.what());
  }
  arch.head_major = j.value("head_major", true);
  arch.validate();
  return arch;
}

void save_architecture_spec(const ArchitectureSpec& arch, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["n_layers"] = arch.n_layers;
  j["n_heads"] = arch.n_heads;
  j["head_dim"] = arch.head_dim;
  j["hidden_dim"] = arch.hidden_dim;
  j["templates"] = {{"query", arch.query_template},
                    {"key", arch.key_template},
                    {"value", arch.value_template},
                    {"output", arch.output_template}};
  j["head_major"] = arch.head_major;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed on " + path.string());
}

void mask_head(const TensorArchive& archive, const ArchitectureSpec& arch,
               const HeadMaskSpec& mask, const std::filesystem::path& out_path) {
  arch.validate();
  if (mask.layer < 0 || mask.layer >= arch.n_layers) {
    throw ValidationError("layer index " + std::to_string(mask.layer) + " out of range [0, " +
                          std::to_string(arch.n_layers) + ")");
  }
  if (mask.head < 0 || mask.head >= arch.n_heads) {
    throw ValidationError("head index " + std::to_string(mask.head) + " out of range [0, " +
                          std::to_string(arch.n_heads) + ")");
  }

  for (const auto& name : {arch.query_name(mask.layer), arch.key_name(mask.layer),
                           arch.value_name(mask.layer), arch.output_name(mask.layer)}) {
    if (!archive.contains(name)) {
      throw ValidationError("archive lacks attention tensor \"" + name + "\"");
    }
  }

  const std::string target = arch.output_name(mask.layer);
  const TensorMeta& target_meta = archive.meta(target);
  const auto& shape = target_meta.shape;
  const auto in_dim = static_cast<std::size_t>(arch.n_heads) * arch.head_dim;
  if (shape.size() != 2 || shape[1] != in_dim) {
    throw ValidationError("output projection \"" + target +
                          "\" does not match architecture: expected [*, " +
                          std::to_string(in_dim) + "]");
  }

  // Zeroing the encoded bytes keeps untouched entries bit-identical and makes
  // re-masking a no-op; +0.0 is the all-zero pattern in every dtype here.
  auto bytes = archive.read_raw(target);
  const std::size_t width = byte_width(target_meta.dtype);
  const std::size_t rows = shape[0];
  const std::size_t cols = shape[1];
  const auto head_dim = static_cast<std::size_t>(arch.head_dim);
  const auto head = static_cast<std::size_t>(mask.head);
  for (std::size_t r = 0; r < rows; ++r) {
    if (arch.head_major) {
      std::memset(bytes.data() + (r * cols + head * head_dim) * width, 0, head_dim * width);
    } else {
      for (std::size_t d = 0; d < head_dim; ++d) {
        const std::size_t c = d * arch.n_heads + head;
        std::memset(bytes.data() + (r * cols + c) * width, 0, width);
      }
    }
  }

  auto metadata = archive.metadata();
  metadata["masked_head"] = mask_tag(mask);

  std::vector<TensorDecl> layout;
  for (const auto& name : archive.names()) {
    const auto& m = archive.meta(name);
    layout.push_back({name, m.dtype, m.shape});
  }
  ArchiveWriter writer(out_path, std::move(layout), metadata);
  for (const auto& name : archive.names()) {
    if (name == target) {
      writer.append_raw(name, bytes);
    } else {
      writer.append_raw(name, archive.read_raw(name));
    }
  }
  writer.finish();
}

std::vector<HeadMaskSpec> enumerate_masks(const ArchitectureSpec& arch) {
  arch.validate();
  std::vector<HeadMaskSpec> masks;
  masks.reserve(static_cast<std::size_t>(arch.n_layers) * arch.n_heads);
  for (int layer = 0; layer < arch.n_layers; ++layer) {
    for (int head = 0; head < arch.n_heads; ++head) {
      masks.push_back({layer, head});
    }
  }
  return masks;
}

}  // namespace weightlab
