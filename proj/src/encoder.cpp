#include "affseg/encoder.hpp"

namespace affseg {

template <typename T>
PatchEmbed<T>::PatchEmbed(Index in_channels, Index patch, Index dim, nn::Rng& rng)
    : in_channels_(in_channels), patch_(patch), proj_(in_channels * patch * patch, dim, true, rng) {}

template <typename T>
Tensor<T> PatchEmbed<T>::flatten_patches(const Tensor<T>& image) const {
  image.require_rank(4, "patch_embed");
  const Index b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (c != in_channels_)
    throw ShapeError("patch_embed: expected " + std::to_string(in_channels_) + " channels, got " +
                     to_string(image.shape()));
  if (h % patch_ != 0 || w % patch_ != 0)
    throw ShapeError("patch_embed: " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(patch_));
  const Index gh = h / patch_, gw = w / patch_;
  const Index feat = c * patch_ * patch_;
  Tensor<T> rows({b, gh, gw, feat});
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < b * gh; ++r) {
    const Index n = r / gh, ty = r % gh;
    for (Index tx = 0; tx < gw; ++tx) {
      T* dst = rows.data() + (r * gw + tx) * feat;
      for (Index ch = 0; ch < c; ++ch)
        for (Index py = 0; py < patch_; ++py)
          for (Index px = 0; px < patch_; ++px)
            *dst++ = image.data()[((n * c + ch) * h + ty * patch_ + py) * w + tx * patch_ + px];
    }
  }
  return rows;
}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& image, Cache* cache) const {
  return proj_.forward(flatten_patches(image), cache ? &cache->proj : nullptr);
}

template <typename T>
void PatchEmbed<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  proj_.backward(cache.proj, gy);
}

template <typename T>
void PatchEmbed<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  proj_.collect_params(prefix + ".proj", out);
}

template <typename T>
PatchMerging<T>::PatchMerging(Index dim, nn::Rng& rng) : dim_(dim), reduce_(4 * dim, 2 * dim, false, rng) {}

template <typename T>
Tensor<T> PatchMerging<T>::gather(const Tensor<T>& x) {
  x.require_rank(4, "patch_merging");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("patch_merging: odd grid " + to_string(x.shape()));
  Tensor<T> out({b, h / 2, w / 2, 4 * c});
  for (Index n = 0; n < b; ++n)
    for (Index i = 0; i < h / 2; ++i)
      for (Index j = 0; j < w / 2; ++j) {
        T* dst = out.data() + ((n * (h / 2) + i) * (w / 2) + j) * 4 * c;
        for (Index q = 0; q < 4; ++q) {
          const Index di = q / 2, dj = q % 2;  // TL, TR, BL, BR
          const T* src = x.data() + ((n * h + 2 * i + di) * w + 2 * j + dj) * c;
          std::copy(src, src + c, dst + q * c);
        }
      }
  return out;
}

template <typename T>
Tensor<T> PatchMerging<T>::scatter(const Tensor<T>& g) {
  const Index b = g.dim(0), h2 = g.dim(1), w2 = g.dim(2), c = g.dim(3) / 4;
  Tensor<T> out({b, 2 * h2, 2 * w2, c});
  for (Index n = 0; n < b; ++n)
    for (Index i = 0; i < h2; ++i)
      for (Index j = 0; j < w2; ++j) {
        const T* src = g.data() + ((n * h2 + i) * w2 + j) * 4 * c;
        for (Index q = 0; q < 4; ++q) {
          const Index di = q / 2, dj = q % 2;
          std::copy(src + q * c, src + (q + 1) * c,
                    out.data() + ((n * 2 * h2 + 2 * i + di) * 2 * w2 + 2 * j + dj) * c);
        }
      }
  return out;
}

template <typename T>
Tensor<T> PatchMerging<T>::forward(const Tensor<T>& x, Cache* cache) const {
  if (x.rank() != 4 || x.dim(3) != dim_)
    throw ShapeError("patch_merging: expected " + std::to_string(dim_) + " channels, got " +
                     to_string(x.shape()));
  return reduce_.forward(gather(x), cache ? &cache->reduce : nullptr);
}

template <typename T>
Tensor<T> PatchMerging<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  return scatter(reduce_.backward(cache.reduce, gy));
}

template <typename T>
void PatchMerging<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  reduce_.collect_params(prefix + ".reduce", out);
}

template <typename T>
Encoder<T>::Encoder(const ModelConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  require_valid(cfg);
  embed_ = PatchEmbed<T>(cfg.in_channels, cfg.patch_size, cfg.embed_dim, rng);
  for (int s = 0; s < kStages; ++s) {
    auto& stage = stages_[static_cast<std::size_t>(s)];
    for (int p = 0; p < cfg.depths[s] / 2; ++p)
      stage.emplace_back(cfg.stage_dim(s), cfg.num_heads[s], cfg.window_size, cfg.shift_size(),
                         cfg.stage_height(s), cfg.stage_width(s), cfg.hidden_dim(s),
                         cfg.ablation.effn_enabled, rng);
    if (s < kStages - 1) merges_[static_cast<std::size_t>(s)] = PatchMerging<T>(cfg.stage_dim(s), rng);
  }
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const Tensor<T>& image, Cache* cache) const {
  image.require_rank(4, "encoder");
  if (image.dim(1) != cfg_.in_channels || image.dim(2) != cfg_.img_height ||
      image.dim(3) != cfg_.img_width)
    throw ShapeError("encoder: expected image [B, " + std::to_string(cfg_.in_channels) + ", " +
                     std::to_string(cfg_.img_height) + ", " + std::to_string(cfg_.img_width) +
                     "], got " + to_string(image.shape()));
  EncoderOutput<T> out;
  Tensor<T> x = embed_.forward(image, cache ? &cache->embed : nullptr);
  for (int s = 0; s < kStages; ++s) {
    const auto& stage = stages_[static_cast<std::size_t>(s)];
    if (cache) cache->stages[static_cast<std::size_t>(s)].resize(stage.size());
    for (std::size_t p = 0; p < stage.size(); ++p)
      x = stage[p].forward(x, cache ? &cache->stages[static_cast<std::size_t>(s)][p] : nullptr);
    if (s < kStages - 1) {
      out.skips[static_cast<std::size_t>(s)] = x;
      x = merges_[static_cast<std::size_t>(s)].forward(
          x, cache ? &cache->merges[static_cast<std::size_t>(s)] : nullptr);
    }
  }
  out.bottleneck = std::move(x);
  return out;
}

template <typename T>
void Encoder<T>::backward(const Cache& cache, const EncoderOutput<T>& grads) {
  Tensor<T> g = grads.bottleneck;
  for (int s = kStages - 1; s >= 0; --s) {
    const auto i = static_cast<std::size_t>(s);
    if (s < kStages - 1) {
      g = merges_[i].backward(cache.merges[i], g);
      g += grads.skips[i];
    }
    auto& stage = stages_[i];
    for (std::size_t p = stage.size(); p-- > 0;) g = stage[p].backward(cache.stages[i][p], g);
  }
  embed_.backward(cache.embed, g);
}

template <typename T>
void Encoder<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  embed_.collect_params(prefix + ".patch_embed", out);
  for (int s = 0; s < kStages; ++s) {
    auto& stage = stages_[static_cast<std::size_t>(s)];
    const std::string sp = prefix + ".stage" + std::to_string(s);
    for (std::size_t p = 0; p < stage.size(); ++p) stage[p].collect_params(sp + ".pair" + std::to_string(p), out);
    if (s < kStages - 1) merges_[static_cast<std::size_t>(s)].collect_params(sp + ".merge", out);
  }
}

template class PatchEmbed<float>;
template class PatchEmbed<double>;
template class PatchMerging<float>;
template class PatchMerging<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace affseg
