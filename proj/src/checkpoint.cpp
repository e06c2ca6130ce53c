#include <cstring>
#include <fstream>

#include "affseg/training.hpp"

namespace affseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'F', 'F', 'S', 'E', 'G', 'C', 'K'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& is, const fs::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError("checkpoint " + path.string() + ": truncated");
  return v;
}

template <typename T>
void write_block(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename Stored, typename T>
Tensor<T> read_data(std::istream& is, Shape shape, const fs::path& path) {
  Tensor<Stored> raw(std::move(shape));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(Stored))))
    throw ParseError("checkpoint " + path.string() + ": truncated tensor data");
  if constexpr (std::is_same_v<Stored, T>) return raw;
  else return raw.template cast<T>();
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

}  // namespace

fs::path sidecar_path(const fs::path& ckpt) {
  fs::path p = ckpt;
  p += ".json";
  return p;
}

template <typename T>
void save_checkpoint(const fs::path& path, const Checkpoint<T>& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ParseError("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointFormatVersion);
    put<std::uint32_t>(os, sizeof(T));
    put<std::uint64_t>(os, ckpt.params.size() + ckpt.velocity.size());
    for (const auto& [name, t] : ckpt.params) write_block(os, "param/" + name, t);
    for (const auto& [name, t] : ckpt.velocity) write_block(os, "velocity/" + name, t);
    if (!os) throw ParseError("failed writing " + path.string());
  }
  const json meta{{"format_version", kCheckpointFormatVersion},
                  {"dtype", dtype_name<T>()},
                  {"epoch", ckpt.history.empty() ? 0 : ckpt.history.back().epoch},
                  {"step", ckpt.step},
                  {"current_lr", ckpt.current_lr},
                  {"partial_loss_sum", ckpt.partial_loss_sum},
                  {"configs", {{"model", to_json(ckpt.model)}, {"train", to_json(ckpt.train)}}},
                  {"metric_history", to_json(ckpt.history)}};
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw ParseError("cannot open " + sidecar_path(path).string() + " for writing");
  js << meta.dump(2) << '\n';
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw ParseError("checkpoint metadata " + sidecar_path(path).string() + " not found");
  Checkpoint<T> ckpt;
  try {
    const json meta = json::parse(js);
    if (meta.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw ParseError("checkpoint " + path.string() + ": unsupported format_version " +
                       meta.at("format_version").dump());
    ckpt.model = model_config_from_json(meta.at("configs").at("model"));
    ckpt.train = train_config_from_json(meta.at("configs").at("train"));
    meta.at("step").get_to(ckpt.step);
    meta.at("current_lr").get_to(ckpt.current_lr);
    meta.at("partial_loss_sum").get_to(ckpt.partial_loss_sum);
    ckpt.history = history_from_json(meta.at("metric_history"));
  } catch (const json::exception& e) {
    throw ParseError("checkpoint metadata " + sidecar_path(path).string() + ": " + e.what());
  }

  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("checkpoint " + path.string() + " not found");
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw ParseError(path.string() + " is not a checkpoint file");
  if (get<std::uint32_t>(is, path) != kCheckpointFormatVersion)
    throw ParseError("checkpoint " + path.string() + ": unsupported binary version");
  const auto scalar = get<std::uint32_t>(is, path);
  if (scalar != 4 && scalar != 8) throw ParseError("checkpoint " + path.string() + ": bad scalar size");
  const auto blocks = get<std::uint64_t>(is, path);
  for (std::uint64_t b = 0; b < blocks; ++b) {
    const auto len = get<std::uint32_t>(is, path);
    if (len > 4096) throw ParseError("checkpoint " + path.string() + ": corrupt block name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("checkpoint " + path.string() + ": truncated");
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw ParseError("checkpoint " + path.string() + ": corrupt rank in " + name);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(get<std::int64_t>(is, path));
    Tensor<T> t = scalar == 4 ? read_data<float, T>(is, shape, path) : read_data<double, T>(is, shape, path);
    if (name.starts_with("param/")) ckpt.params.emplace(name.substr(6), std::move(t));
    else if (name.starts_with("velocity/")) ckpt.velocity.emplace(name.substr(9), std::move(t));
    else throw ParseError("checkpoint " + path.string() + ": unknown block " + name);
  }
  return ckpt;
}

template void save_checkpoint<float>(const fs::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const fs::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const fs::path&);
template Checkpoint<double> load_checkpoint<double>(const fs::path&);

}  // namespace affseg
