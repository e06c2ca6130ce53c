#include "affseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace affseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ seeds

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, const std::string& id) {
  return derive_seed(seed, a, fnv1a(id));
}

// ---------------------------------------------------------- spec and JSON

namespace {

json shape_json(const ShapeSpec& s) {
  return {{"count", s.count}, {"radius_range", s.radius_range}};
}

ShapeSpec shape_from_json(const json& j) {
  ShapeSpec s;
  j.at("count").get_to(s.count);
  j.at("radius_range").get_to(s.radius_range);
  return s;
}

}  // namespace

json to_json(const SyntheticSpec& s) {
  json tumor = shape_json(s.tumor);
  tumor["inside_organ"] = s.tumor_inside_organ;
  return {{"format_version", 1},
          {"canvas", {s.height, s.width}},
          {"organ", shape_json(s.organ)},
          {"tumor", tumor},
          {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  try {
    SyntheticSpec s;
    const auto canvas = j.at("canvas").get<std::array<int, 2>>();
    s.height = canvas[0];
    s.width = canvas[1];
    s.organ = shape_from_json(j.at("organ"));
    s.tumor = shape_from_json(j.at("tumor"));
    if (j.at("tumor").contains("inside_organ")) j.at("tumor").at("inside_organ").get_to(s.tumor_inside_organ);
    j.at("noise_std").get_to(s.noise_std);
    if (j.contains("seed")) j.at("seed").get_to(s.seed);
    validate(s);
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic spec: ") + e.what());
  }
}

void validate(const SyntheticSpec& s) {
  std::vector<std::string> errs;
  if (s.height < 8 || s.width < 8) errs.push_back("canvas must be at least 8x8");
  if (s.organ.count < 0 || s.tumor.count < 0) errs.push_back("counts must be >= 0");
  for (const auto* shape : {&s.organ, &s.tumor}) {
    const auto& r = shape->radius_range;
    if (!(r[0] > 0) || r[1] < r[0]) {
      errs.push_back("radius_range must satisfy 0 < min <= max");
      break;
    }
  }
  if (s.tumor.count > 0 && s.organ.count > 0 && s.tumor.radius_range[1] >= s.organ.radius_range[0])
    errs.push_back("tumor radii must be smaller than organ radii");
  if (s.tumor.count > 0 && s.tumor_inside_organ && s.organ.count == 0)
    errs.push_back("tumor.inside_organ requires at least one organ");
  if (!(s.noise_std >= 0)) errs.push_back("noise_std must be >= 0");
  if (errs.empty()) return;
  std::string msg = "invalid synthetic spec:";
  for (const auto& e : errs) msg += "\n  - " + e;
  throw ConfigError(msg);
}

// -------------------------------------------------------------- generator

namespace {

SegmentationSample generate_one(const SyntheticSpec& spec, int index) {
  std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const int h = spec.height, w = spec.width;
  Tensor<int> organ_map({h, w});

  for (int o = 0; o < spec.organ.count; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const double a = uniform(spec.organ.radius_range[0], spec.organ.radius_range[1]);
      const double b = uniform(spec.organ.radius_range[0], spec.organ.radius_range[1]);
      const double theta = uniform(0.0, std::numbers::pi);
      const double extent = std::max(a, b);
      if (2 * extent >= w || 2 * extent >= h) continue;
      const double cx = uniform(extent, w - extent), cy = uniform(extent, h - extent);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) organ_map.at(y, x) = 1;
        }
      placed = true;
    }
    if (!placed)
      throw DataError("synthetic sample " + std::to_string(index) + ": organ with radius_range [" +
                      std::to_string(spec.organ.radius_range[0]) + ", " + std::to_string(spec.organ.radius_range[1]) +
                      "] does not fit the " + std::to_string(h) + "x" + std::to_string(w) + " canvas after " +
                      std::to_string(kPlacementAttempts) + " attempts");
  }

  Tensor<int> mask = organ_map;
  std::vector<std::pair<int, int>> organ_pixels;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (organ_map.at(y, x)) organ_pixels.emplace_back(y, x);

  for (int t = 0; t < spec.tumor.count; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const double r = uniform(spec.tumor.radius_range[0], spec.tumor.radius_range[1]);
      double cx, cy;
      if (spec.tumor_inside_organ) {
        if (organ_pixels.empty()) break;
        const auto [py, px] =
            organ_pixels[std::uniform_int_distribution<std::size_t>(0, organ_pixels.size() - 1)(rng)];
        cx = px + 0.5;
        cy = py + 0.5;
      } else {
        if (2 * r >= w || 2 * r >= h) continue;
        cx = uniform(r, w - r);
        cy = uniform(r, h - r);
      }
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))), y1 = std::min(h - 1, static_cast<int>(cy + r));
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))), x1 = std::min(w - 1, static_cast<int>(cx + r));
      auto inside = [&](int y, int x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        return dx * dx + dy * dy <= r * r;
      };
      // Inside means the disk and its 4-neighbourhood are organ pixels.
      auto organ_at = [&](int y, int x) { return y >= 0 && x >= 0 && y < h && x < w && organ_map.at(y, x) != 0; };
      bool fits = true;
      if (spec.tumor_inside_organ)
        for (int y = y0; y <= y1 && fits; ++y)
          for (int x = x0; x <= x1; ++x)
            if (inside(y, x) && !(organ_at(y, x) && organ_at(y - 1, x) && organ_at(y + 1, x) &&
                                  organ_at(y, x - 1) && organ_at(y, x + 1))) {
              fits = false;
              break;
            }
      if (!fits) continue;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (inside(y, x)) mask.at(y, x) = 2;
      placed = true;
    }
    if (!placed)
      throw DataError("synthetic sample " + std::to_string(index) + ": no tumor disk with radius_range [" +
                      std::to_string(spec.tumor.radius_range[0]) + ", " + std::to_string(spec.tumor.radius_range[1]) +
                      "] fits " + (spec.tumor_inside_organ ? "inside an organ" : "the canvas") + " after " +
                      std::to_string(kPlacementAttempts) + " attempts");
  }

  Tensor<float> image({1, h, w});
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  for (Index i = 0; i < mask.size(); ++i) {
    double v = kSyntheticIntensity[static_cast<std::size_t>(mask[i])];
    if (spec.noise_std > 0) v += noise(rng);
    image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  char id[32];
  std::snprintf(id, sizeof id, "s%05d", index);
  return {std::move(image), std::move(mask), id};
}

}  // namespace

std::vector<SegmentationSample> generate_synthetic(const SyntheticSpec& spec, int n) {
  validate(spec);
  if (n < 0) throw ConfigError("generate_synthetic: negative sample count");
  std::vector<SegmentationSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_one(spec, i));
  return out;
}

// -------------------------------------------------------------------- PNG

namespace {

std::vector<png_byte> read_png_raw(const fs::path& path, png_uint_32 format, int& h, int& w) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = format;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + msg);
  }
  h = static_cast<int>(img.height);
  w = static_cast<int>(img.width);
  return buf;
}

void write_png_raw(const fs::path& path, png_uint_32 format, int h, int w, const std::vector<png_byte>& buf) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.format = format;
  img.height = static_cast<png_uint_32>(h);
  img.width = static_cast<png_uint_32>(w);
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path.string() + ": " + img.message);
}

png_byte quantize(float v) {
  return static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Tensor<float> read_png_image(const fs::path& path, int channels) {
  if (channels != 1 && channels != 3) throw ConfigError("PNG images support 1 or 3 channels, got " + std::to_string(channels));
  int h = 0, w = 0;
  const auto buf = read_png_raw(path, channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB, h, w);
  Tensor<float> out({channels, h, w});
  for (int c = 0; c < channels; ++c)
    for (Index p = 0; p < Index{h} * w; ++p)
      out[c * h * w + p] = static_cast<float>(buf[static_cast<std::size_t>(p * channels + c)]) / 255.0f;
  return out;
}

Tensor<int> read_png_mask(const fs::path& path) {
  int h = 0, w = 0;
  const auto buf = read_png_raw(path, PNG_FORMAT_GRAY, h, w);
  Tensor<int> out({h, w});
  for (Index i = 0; i < out.size(); ++i) out[i] = buf[static_cast<std::size_t>(i)];
  return out;
}

void write_png_image(const fs::path& path, const Tensor<float>& image) {
  image.require_rank(3, "write_png_image");
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3) throw ShapeError("write_png_image: 1 or 3 channels, got " + to_string(image.shape()));
  std::vector<png_byte> buf(static_cast<std::size_t>(image.size()));
  for (Index ch = 0; ch < c; ++ch)
    for (Index p = 0; p < h * w; ++p) buf[static_cast<std::size_t>(p * c + ch)] = quantize(image[ch * h * w + p]);
  write_png_raw(path, c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB, static_cast<int>(h), static_cast<int>(w), buf);
}

void write_png_rgb(const fs::path& path, const Tensor<float>& rgb) {
  rgb.require_shape({3, rgb.dim(1), rgb.dim(2)}, "write_png_rgb");
  write_png_image(path, rgb);
}

void write_png_mask(const fs::path& path, const Tensor<int>& mask) {
  mask.require_rank(2, "write_png_mask");
  std::vector<png_byte> buf(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] > 255) throw DataError("write_png_mask: label " + std::to_string(mask[i]) + " outside 0..255");
    buf[static_cast<std::size_t>(i)] = static_cast<png_byte>(mask[i]);
  }
  write_png_raw(path, PNG_FORMAT_GRAY, static_cast<int>(mask.dim(0)), static_cast<int>(mask.dim(1)), buf);
}

void save_sample(const fs::path& dir, const SegmentationSample& s) {
  write_png_image(dir / (s.id + "_img.png"), s.image);
  write_png_mask(dir / (s.id + "_mask.png"), s.mask);
}

std::vector<SegmentationSample> load_directory(const fs::path& dir, int num_classes, int channels) {
  if (!fs::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  std::map<std::string, std::pair<bool, bool>> pairs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    auto ends = [&](const std::string& suffix) {
      return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends("_img.png")) pairs[name.substr(0, name.size() - 8)].first = true;
    else if (ends("_mask.png")) pairs[name.substr(0, name.size() - 9)].second = true;
  }
  std::vector<std::string> orphans;
  for (const auto& [id, have] : pairs)
    if (!have.first || !have.second) orphans.push_back(id + (have.first ? " (mask missing)" : " (image missing)"));
  if (!orphans.empty()) {
    std::string msg = "unpaired files in " + dir.string() + ":";
    for (const auto& o : orphans) msg += " " + o;
    throw DataError(msg);
  }
  if (pairs.empty()) throw DataError("no <id>_img.png / <id>_mask.png pairs in " + dir.string());

  const int labels = std::max(2, num_classes);
  std::vector<SegmentationSample> out;
  for (const auto& [id, have] : pairs) {
    SegmentationSample s{read_png_image(dir / (id + "_img.png"), channels), read_png_mask(dir / (id + "_mask.png")), id};
    if (s.mask.dim(0) != s.image.dim(1) || s.mask.dim(1) != s.image.dim(2))
      throw DataError("sample " + id + ": mask " + to_string(s.mask.shape()) + " does not match image " +
                      to_string(s.image.shape()));
    for (Index i = 0; i < s.mask.size(); ++i)
      if (s.mask[i] >= labels)
        throw DataError("sample " + id + ": mask value " + std::to_string(s.mask[i]) + " at pixel " +
                        std::to_string(i) + " is not a valid class for num_classes " + std::to_string(num_classes));
    out.push_back(std::move(s));
  }
  return out;
}

// ----------------------------------------------------------- geometry ops

SegmentationSample hflip(const SegmentationSample& s) {
  SegmentationSample out = s;
  const Index c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.image.at(ch, y, x) = s.image.at(ch, y, w - 1 - x);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) out.mask.at(y, x) = s.mask.at(y, w - 1 - x);
  return out;
}

SegmentationSample rotate(const SegmentationSample& s, double degrees) {
  SegmentationSample out{Tensor<float>(s.image.shape()), Tensor<int>(s.mask.shape()), s.id};
  const Index c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double ct = std::cos(rad), st = std::sin(rad);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + ct * dx - st * dy;
      const double sy = cy + st * dx + ct * dy;
      const auto nx = static_cast<Index>(std::lround(sx)), ny = static_cast<Index>(std::lround(sy));
      if (nx >= 0 && nx < w && ny >= 0 && ny < h) out.mask.at(y, x) = s.mask.at(ny, nx);
      const auto x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (Index ch = 0; ch < c; ++ch) {
        double v = 0;
        for (Index oy = 0; oy < 2; ++oy)
          for (Index ox = 0; ox < 2; ++ox) {
            const Index px = x0 + ox, py = y0 + oy;
            if (px < 0 || px >= w || py < 0 || py >= h) continue;
            const double wgt = (ox ? fx : 1 - fx) * (oy ? fy : 1 - fy);
            if (wgt != 0) v += wgt * s.image.at(ch, py, px);
          }
        out.image.at(ch, y, x) = static_cast<float>(v);
      }
    }
  return out;
}

SegmentationSample augment(const SegmentationSample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SegmentationSample out = unit(rng) < cfg.hflip_prob ? hflip(s) : s;
  if (cfg.rotate_max_deg > 0) {
    const double angle = std::uniform_real_distribution<double>(-cfg.rotate_max_deg, cfg.rotate_max_deg)(rng);
    out = rotate(out, angle);
  }
  return out;
}

SegmentationSample resize(const SegmentationSample& s, int height, int width) {
  if (height < 1 || width < 1) throw ConfigError("resize: target must be positive");
  const Index c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  SegmentationSample out{Tensor<float>({c, height, width}), Tensor<int>({height, width}), s.id};
  const double scale_y = static_cast<double>(h) / height, scale_x = static_cast<double>(w) / width;
  for (Index y = 0; y < height; ++y) {
    const double sy = std::clamp((y + 0.5) * scale_y - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<Index>(sy);
    const Index y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    const Index ny = std::min(h - 1, static_cast<Index>((y + 0.5) * scale_y));
    for (Index x = 0; x < width; ++x) {
      const double sx = std::clamp((x + 0.5) * scale_x - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<Index>(sx);
      const Index x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      for (Index ch = 0; ch < c; ++ch) {
        const double top = (1 - fx) * s.image.at(ch, y0, x0) + fx * s.image.at(ch, y0, x1);
        const double bottom = (1 - fx) * s.image.at(ch, y1, x0) + fx * s.image.at(ch, y1, x1);
        out.image.at(ch, y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
      }
      out.mask.at(y, x) = s.mask.at(ny, std::min(w - 1, static_cast<Index>((x + 0.5) * scale_x)));
    }
  }
  return out;
}

// ------------------------------------------------------------------ split

DataSplit split(const std::vector<SegmentationSample>& samples, std::uint64_t seed, std::array<double, 3> fractions) {
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9 ||
      std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0; }))
    throw ConfigError("split: fractions must be non-negative and sum to 1");
  const auto n = static_cast<Index>(samples.size());
  if (n < 3) throw DataError("split: need at least 3 samples, got " + std::to_string(n));
  DataSplit out;
  auto sized = [&](double f, const char* name) {
    Index k = std::llround(f * static_cast<double>(n));
    if (k < 1) {
      out.warnings.push_back(std::string(name) + " split would be empty for n = " + std::to_string(n) +
                             "; using 1 sample");
      k = 1;
    }
    return k;
  };
  const Index n_val = sized(fractions[1], "validation");
  const Index n_test = sized(fractions[2], "test");
  const Index n_train = n - n_val - n_test;
  if (n_train < 1) throw DataError("split: no training samples left for n = " + std::to_string(n));

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x53504c4954ULL));
  std::shuffle(order.begin(), order.end(), rng);
  for (Index i = 0; i < n; ++i) {
    const auto& s = samples[order[static_cast<std::size_t>(i)]];
    if (i < n_train) out.train.push_back(s);
    else if (i < n_train + n_val) out.val.push_back(s);
    else out.test.push_back(s);
  }
  return out;
}

// ----------------------------------------------------------------- batches

template <typename T>
Batch<T> make_batch(const std::vector<SegmentationSample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  const Index c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  const auto b = static_cast<Index>(indices.size());
  Batch<T> out{Tensor<T>({b, c, h, w}), Tensor<int>({b, h, w})};
  for (Index i = 0; i < b; ++i) {
    const auto& s = samples.at(indices[static_cast<std::size_t>(i)]);
    s.image.require_shape(first.image.shape(), "make_batch image");
    s.mask.require_shape(first.mask.shape(), "make_batch mask");
    std::transform(s.image.data(), s.image.data() + s.image.size(), out.images.data() + i * c * h * w,
                   [](float v) { return static_cast<T>(v); });
    std::copy(s.mask.data(), s.mask.data() + s.mask.size(), out.labels.data() + i * h * w);
  }
  return out;
}

template Batch<float> make_batch<float>(const std::vector<SegmentationSample>&, const std::vector<std::size_t>&);
template Batch<double> make_batch<double>(const std::vector<SegmentationSample>&, const std::vector<std::size_t>&);

void check_compatible(const std::vector<SegmentationSample>& samples, const ModelConfig& cfg) {
  const int labels = std::max(2, cfg.num_classes);
  for (const auto& s : samples) {
    if (s.image.rank() != 3 || s.image.dim(0) != cfg.in_channels || s.image.dim(1) != cfg.img_height ||
        s.image.dim(2) != cfg.img_width)
      throw DataError("sample " + s.id + ": image " + to_string(s.image.shape()) + " does not match model input [" +
                      std::to_string(cfg.in_channels) + ", " + std::to_string(cfg.img_height) + ", " +
                      std::to_string(cfg.img_width) + "]");
    const auto [lo, hi] = std::minmax_element(s.mask.data(), s.mask.data() + s.mask.size());
    if (*lo < 0 || *hi >= labels)
      throw DataError("sample " + s.id + ": mask value " + std::to_string(*hi >= labels ? *hi : *lo) +
                      " is not a valid class for num_classes " + std::to_string(cfg.num_classes));
  }
}

}  // namespace affseg
