#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "affseg/tensor.hpp"

namespace affseg {

inline constexpr int kStages = 4;
inline constexpr int kConfigFormatVersion = 1;

/// Component switches for ablation runs. All enabled is the full network.
struct AblationFlags {
  bool effn_enabled = true;
  bool lrd_enabled = true;
  bool mff_enabled = true;
  bool asc_enabled = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Architecture hyper-parameters. Every tensor shape in the network is a
/// function of this struct alone.
struct ModelConfig {
  int in_channels = 1;
  int num_classes = 3;
  int img_height = 64;
  int img_width = 64;
  int patch_size = 2;
  int embed_dim = 32;
  std::array<int, kStages> depths{2, 2, 2, 2};
  std::array<int, kStages> num_heads{2, 4, 8, 16};
  int window_size = 4;
  double mlp_ratio = 4.0;
  double leaky_slope = 0.01;
  AblationFlags ablation;

  int stage_dim(int s) const { return embed_dim << s; }
  int stage_height(int s) const { return img_height / (patch_size << s); }
  int stage_width(int s) const { return img_width / (patch_size << s); }
  int shift_size() const { return window_size / 2; }
  int hidden_dim(int s) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AugmentConfig {
  double hflip_prob = 0.5;
  double rotate_max_deg = 15.0;

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct TrainConfig {
  double lr_init = 1e-2;
  double lr_final = 6e-6;
  double momentum = 0.98;
  double weight_decay = 1e-6;
  int epochs = 200;
  int batch_size = 4;
  std::int64_t seed = 0;
  AugmentConfig augment;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Outcome of validation: empty violations means OK.
struct ValidationResult {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  explicit operator bool() const { return ok(); }
  std::string message() const;
};

ValidationResult validate_config(const ModelConfig& cfg);
ValidationResult validate_train_config(const TrainConfig& cfg);

/// Throws ConfigError carrying every violation when validation fails.
void require_valid(const ModelConfig& cfg);
void require_valid(const TrainConfig& cfg);

/// 64x64 single-channel preset sized for CPU tests.
ModelConfig desk_preset();
/// 512x512, patch 4, window 8, C = 96 with heads[s] = C * 2^s / 32.
ModelConfig full_scale_preset();

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
/// Strict parsing: every field required, unknown keys rejected. Throws ParseError.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Loads {"model": ..., "train": ...}; parses strictly and validates both.
std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ModelConfig& model,
                 const TrainConfig& train);

}  // namespace affseg
