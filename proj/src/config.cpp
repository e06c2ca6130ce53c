#include "affseg/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "affseg/errors.hpp"

namespace affseg {

using nlohmann::json;

int ModelConfig::hidden_dim(int s) const {
  return static_cast<int>(std::lround(mlp_ratio * stage_dim(s)));
}

std::string ValidationResult::message() const {
  std::string out;
  for (const auto& v : violations) {
    if (!out.empty()) out += "; ";
    out += v;
  }
  return out;
}

ValidationResult validate_config(const ModelConfig& cfg) {
  ValidationResult r;
  auto fail = [&](const std::string& msg) { r.violations.push_back(msg); };

  if (cfg.in_channels < 1) fail("in_channels must be >= 1 (got " + std::to_string(cfg.in_channels) + ")");
  if (cfg.num_classes < 1) fail("num_classes must be >= 1 (got " + std::to_string(cfg.num_classes) + ")");
  if (cfg.patch_size < 1 || (cfg.patch_size & (cfg.patch_size - 1)) != 0)
    fail("patch_size must be a power of two (got " + std::to_string(cfg.patch_size) + ")");
  if (cfg.window_size < 1) fail("window_size must be >= 1 (got " + std::to_string(cfg.window_size) + ")");
  if (cfg.embed_dim < 1 || cfg.embed_dim % 4 != 0)
    fail("embed_dim must be a positive multiple of 4 (got " + std::to_string(cfg.embed_dim) + ")");
  if (!(cfg.mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
  if (!(cfg.leaky_slope > 0.0 && cfg.leaky_slope < 1.0)) fail("leaky_slope must lie in (0, 1)");

  for (int s = 0; s < kStages; ++s) {
    if (cfg.depths[s] < 0 || cfg.depths[s] % 2 != 0)
      fail("depths must be even (depths[" + std::to_string(s) + "] = " + std::to_string(cfg.depths[s]) + ")");
    if (cfg.num_heads[s] < 1) {
      fail("num_heads[" + std::to_string(s) + "] must be >= 1");
    } else if (cfg.embed_dim >= 1 && cfg.stage_dim(s) % cfg.num_heads[s] != 0) {
      fail("stage " + std::to_string(s) + " dim " + std::to_string(cfg.stage_dim(s)) +
           " not divisible by num_heads[" + std::to_string(s) + "] = " + std::to_string(cfg.num_heads[s]));
    }
  }
  if (cfg.patch_size < 1 || cfg.window_size < 1) return r;

  const int factor = cfg.patch_size * (1 << (kStages - 1));
  if (cfg.img_height < 1 || cfg.img_height % factor != 0)
    fail("img height " + std::to_string(cfg.img_height) + " not divisible by patch_size*8 = " + std::to_string(factor));
  if (cfg.img_width < 1 || cfg.img_width % factor != 0)
    fail("img width " + std::to_string(cfg.img_width) + " not divisible by patch_size*8 = " + std::to_string(factor));
  for (int s = 0; s < kStages; ++s) {
    const int scale = cfg.patch_size << s;
    if (cfg.img_height % scale != 0 || cfg.img_width % scale != 0) continue;
    const int h = cfg.img_height / scale;
    const int w = cfg.img_width / scale;
    if (h % cfg.window_size != 0 || w % cfg.window_size != 0)
      fail("stage " + std::to_string(s) + " grid " + std::to_string(h) + "x" + std::to_string(w) +
           " not divisible by window_size " + std::to_string(cfg.window_size));
  }
  return r;
}

ValidationResult validate_train_config(const TrainConfig& cfg) {
  ValidationResult r;
  auto fail = [&](const std::string& msg) { r.violations.push_back(msg); };
  if (!(cfg.lr_final > 0.0 && cfg.lr_final < cfg.lr_init))
    fail("learning rates must satisfy 0 < lr_final < lr_init (lr_init = " +
         std::to_string(cfg.lr_init) + ", lr_final = " + std::to_string(cfg.lr_final) + ")");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (cfg.epochs < 1) fail("epochs must be >= 1");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (!(cfg.augment.hflip_prob >= 0.0 && cfg.augment.hflip_prob <= 1.0))
    fail("hflip_prob must lie in [0, 1]");
  if (!(cfg.augment.rotate_max_deg >= 0.0)) fail("rotate_max_deg must be >= 0");
  return r;
}

void require_valid(const ModelConfig& cfg) {
  if (auto r = validate_config(cfg); !r) throw ConfigError("invalid model config: " + r.message());
}

void require_valid(const TrainConfig& cfg) {
  if (auto r = validate_train_config(cfg); !r) throw ConfigError("invalid train config: " + r.message());
}

ModelConfig desk_preset() { return ModelConfig{}; }

ModelConfig full_scale_preset() {
  ModelConfig cfg;
  cfg.img_height = 512;
  cfg.img_width = 512;
  cfg.patch_size = 4;
  cfg.window_size = 8;
  cfg.embed_dim = 96;
  cfg.depths = {2, 2, 2, 2};
  for (int s = 0; s < kStages; ++s) cfg.num_heads[s] = cfg.stage_dim(s) / 32;
  return cfg;
}

json to_json(const ModelConfig& cfg) {
  return json{{"in_channels", cfg.in_channels},
              {"num_classes", cfg.num_classes},
              {"img_size", {cfg.img_height, cfg.img_width}},
              {"patch_size", cfg.patch_size},
              {"embed_dim", cfg.embed_dim},
              {"depths", cfg.depths},
              {"num_heads", cfg.num_heads},
              {"window_size", cfg.window_size},
              {"mlp_ratio", cfg.mlp_ratio},
              {"leaky_slope", cfg.leaky_slope},
              {"ablation",
               {{"effn_enabled", cfg.ablation.effn_enabled},
                {"lrd_enabled", cfg.ablation.lrd_enabled},
                {"mff_enabled", cfg.ablation.mff_enabled},
                {"asc_enabled", cfg.ablation.asc_enabled}}}};
}

json to_json(const TrainConfig& cfg) {
  return json{{"lr_init", cfg.lr_init},
              {"lr_final", cfg.lr_final},
              {"momentum", cfg.momentum},
              {"weight_decay", cfg.weight_decay},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"seed", cfg.seed},
              {"augment",
               {{"hflip_prob", cfg.augment.hflip_prob},
                {"rotate_max_deg", cfg.augment.rotate_max_deg}}}};
}

namespace {

// Reads fields out of one JSON object, rejecting absent and unknown keys.
class StrictObject {
 public:
  StrictObject(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ParseError(context_ + ": expected a JSON object");
  }

  const json& field(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) throw ParseError(key + " absent" + where());
    return *it;
  }

  template <typename T>
  T get(const std::string& key) {
    const json& v = field(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ParseError(key + ": expected boolean" + where());
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ParseError(key + ": expected integer" + where());
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ParseError(key + ": expected number" + where());
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ParseError(key + ": " + e.what() + where());
    }
  }

  std::array<int, kStages> get_stage_list(const std::string& key) {
    const json& v = field(key);
    if (!v.is_array() || v.size() != kStages)
      throw ParseError(key + ": expected a list of " + std::to_string(kStages) + " integers" + where());
    std::array<int, kStages> out{};
    for (int s = 0; s < kStages; ++s) {
      if (!v[s].is_number_integer()) throw ParseError(key + ": expected integers" + where());
      out[s] = v[s].get<int>();
    }
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ParseError("unknown key " + it.key() + where());
  }

 private:
  std::string where() const { return " (in " + context_ + ")"; }

  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  StrictObject obj(j, "model");
  ModelConfig cfg;
  cfg.in_channels = obj.get<int>("in_channels");
  cfg.num_classes = obj.get<int>("num_classes");
  const json& size = obj.field("img_size");
  if (!size.is_array() || size.size() != 2 || !size[0].is_number_integer() || !size[1].is_number_integer())
    throw ParseError("img_size: expected [H, W] (in model)");
  cfg.img_height = size[0].get<int>();
  cfg.img_width = size[1].get<int>();
  cfg.patch_size = obj.get<int>("patch_size");
  cfg.embed_dim = obj.get<int>("embed_dim");
  cfg.depths = obj.get_stage_list("depths");
  cfg.num_heads = obj.get_stage_list("num_heads");
  cfg.window_size = obj.get<int>("window_size");
  cfg.mlp_ratio = obj.get<double>("mlp_ratio");
  cfg.leaky_slope = obj.get<double>("leaky_slope");
  StrictObject abl(obj.field("ablation"), "model.ablation");
  cfg.ablation.effn_enabled = abl.get<bool>("effn_enabled");
  cfg.ablation.lrd_enabled = abl.get<bool>("lrd_enabled");
  cfg.ablation.mff_enabled = abl.get<bool>("mff_enabled");
  cfg.ablation.asc_enabled = abl.get<bool>("asc_enabled");
  abl.finish();
  obj.finish();
  return cfg;
}

TrainConfig train_config_from_json(const json& j) {
  StrictObject obj(j, "train");
  TrainConfig cfg;
  cfg.lr_init = obj.get<double>("lr_init");
  cfg.lr_final = obj.get<double>("lr_final");
  cfg.momentum = obj.get<double>("momentum");
  cfg.weight_decay = obj.get<double>("weight_decay");
  cfg.epochs = obj.get<int>("epochs");
  cfg.batch_size = obj.get<int>("batch_size");
  cfg.seed = obj.get<std::int64_t>("seed");
  StrictObject aug(obj.field("augment"), "train.augment");
  cfg.augment.hflip_prob = aug.get<double>("hflip_prob");
  cfg.augment.rotate_max_deg = aug.get<double>("rotate_max_deg");
  aug.finish();
  obj.finish();
  return cfg;
}

std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError("config root must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "model" && it.key() != "train" && it.key() != "format_version")
      throw ParseError("unknown key " + it.key() + " (in config root)");
  }
  if (!j.contains("model")) throw ParseError("model absent (in config root)");
  if (!j.contains("train")) throw ParseError("train absent (in config root)");
  auto model = model_config_from_json(j["model"]);
  auto train = train_config_from_json(j["train"]);
  require_valid(model);
  require_valid(train);
  return {model, train};
}

void save_config(const std::filesystem::path& path, const ModelConfig& model,
                 const TrainConfig& train) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write config file " + path.string());
  json j{{"format_version", kConfigFormatVersion}, {"model", to_json(model)}, {"train", to_json(train)}};
  out << j.dump(2) << '\n';
}

}  // namespace affseg
