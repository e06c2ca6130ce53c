#include "affseg/decoder.hpp"

#include <bit>

namespace affseg {

template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& x) {
  x.require_rank(4, "nhwc_to_nchw");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> out({b, c, h, w});
  for (Index n = 0; n < b; ++n)
    for (Index p = 0; p < h * w; ++p)
      for (Index ch = 0; ch < c; ++ch) out[(n * c + ch) * h * w + p] = x[(n * h * w + p) * c + ch];
  return out;
}

template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x) {
  x.require_rank(4, "nchw_to_nhwc");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({b, h, w, c});
  for (Index n = 0; n < b; ++n)
    for (Index p = 0; p < h * w; ++p)
      for (Index ch = 0; ch < c; ++ch) out[(n * h * w + p) * c + ch] = x[(n * c + ch) * h * w + p];
  return out;
}

// ------------------------------------------------------------------- LRD

template <typename T>
LrdBlock<T>::LrdBlock(Index channels, T slope, nn::Rng& rng) : channels_(channels), slope_(slope) {
  for (std::size_t i = 0; i < convs_.size(); ++i)
    convs_[i] = nn::Conv2d<T>(channels, channels, 3, kLrdDilations[i], rng);
}

template <typename T>
Tensor<T> LrdBlock<T>::forward(const Tensor<T>& x, Cache* cache) const {
  if (x.rank() != 4 || x.dim(3) != channels_)
    throw ShapeError("lrd_forward: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(x.shape()));
  Tensor<T> h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    Tensor<T> pre = convs_[i].forward(h, cache ? &cache->convs[i] : nullptr);
    h = nn::leaky_relu(pre, slope_);
    if (cache) cache->pre_act[i] = std::move(pre);
  }
  h += x;
  return h;
}

template <typename T>
Tensor<T> LrdBlock<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  Tensor<T> g = gy;
  for (std::size_t i = convs_.size(); i-- > 0;) {
    g = nn::leaky_relu_backward(cache.pre_act[i], g, slope_);
    g = convs_[i].backward(cache.convs[i], g);
  }
  g += gy;
  return g;
}

template <typename T>
void LrdBlock<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  for (std::size_t i = 0; i < convs_.size(); ++i)
    convs_[i].collect_params(prefix + ".conv" + std::to_string(i), out);
}

// ------------------------------------------------------------------- ASC

template <typename T>
AscBlock<T>::AscBlock(Index channels, T slope, nn::Rng& rng)
    : channels_(channels),
      slope_(slope),
      fc1_(channels, channels / kAscReduction, true, rng),
      fc2_(channels / kAscReduction, channels, true, rng) {
  if (channels % kAscReduction != 0)
    throw ShapeError("asc: channels " + std::to_string(channels) + " not divisible by " +
                     std::to_string(kAscReduction));
}

namespace {

template <typename T>
Tensor<T> average_pool(const Tensor<T>& x) {
  const Index b = x.dim(0), c = x.dim(3);
  const Index pixels = x.dim(1) * x.dim(2);
  Tensor<T> pooled({b, c});
  for (Index n = 0; n < b; ++n) {
    T* dst = pooled.data() + n * c;
    for (Index p = 0; p < pixels; ++p) {
      const T* src = x.data() + (n * pixels + p) * c;
      for (Index ch = 0; ch < c; ++ch) dst[ch] += src[ch];
    }
    for (Index ch = 0; ch < c; ++ch) dst[ch] /= static_cast<T>(pixels);
  }
  return pooled;
}

}  // namespace

template <typename T>
Tensor<T> AscBlock<T>::gate(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(3) != channels_)
    throw ShapeError("asc_forward: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(x.shape()));
  Tensor<T> hidden = fc1_.forward(average_pool(x), nullptr);
  return nn::sigmoid(fc2_.forward(nn::leaky_relu(hidden, slope_), nullptr));
}

template <typename T>
Tensor<T> AscBlock<T>::forward(const Tensor<T>& x, Cache* cache) const {
  if (x.rank() != 4 || x.dim(3) != channels_)
    throw ShapeError("asc_forward: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(x.shape()));
  Tensor<T> hidden = fc1_.forward(average_pool(x), cache ? &cache->fc1 : nullptr);
  Tensor<T> g = nn::sigmoid(fc2_.forward(nn::leaky_relu(hidden, slope_), cache ? &cache->fc2 : nullptr));
  const Index b = x.dim(0), c = channels_;
  const Index pixels = x.dim(1) * x.dim(2);
  Tensor<T> out(x.shape());
  for (Index n = 0; n < b; ++n)
    for (Index p = 0; p < pixels; ++p)
      for (Index ch = 0; ch < c; ++ch)
        out[(n * pixels + p) * c + ch] = x[(n * pixels + p) * c + ch] * g[n * c + ch];
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(hidden);
    cache->gate = std::move(g);
  }
  return out;
}

template <typename T>
Tensor<T> AscBlock<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Tensor<T>& x = cache.input;
  const Tensor<T>& g = cache.gate;
  const Index b = x.dim(0), c = channels_;
  const Index pixels = x.dim(1) * x.dim(2);
  Tensor<T> gx(x.shape());
  Tensor<T> ggate({b, c});
  for (Index n = 0; n < b; ++n)
    for (Index p = 0; p < pixels; ++p)
      for (Index ch = 0; ch < c; ++ch) {
        const Index i = (n * pixels + p) * c + ch;
        gx[i] = gy[i] * g[n * c + ch];
        ggate[n * c + ch] += gy[i] * x[i];
      }
  Tensor<T> gz2 = nn::sigmoid_backward(g, ggate);
  Tensor<T> gh = nn::leaky_relu_backward(cache.hidden, fc2_.backward(cache.fc2, gz2), slope_);
  Tensor<T> gpool = fc1_.backward(cache.fc1, gh);
  const T inv = T(1) / static_cast<T>(pixels);
  for (Index n = 0; n < b; ++n)
    for (Index p = 0; p < pixels; ++p)
      for (Index ch = 0; ch < c; ++ch) gx[(n * pixels + p) * c + ch] += gpool[n * c + ch] * inv;
  return gx;
}

template <typename T>
void AscBlock<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  fc1_.collect_params(prefix + ".fc1", out);
  fc2_.collect_params(prefix + ".fc2", out);
}

// ---------------------------------------------------------- DecoderStage

template <typename T>
DecoderStage<T>::DecoderStage(Index in_channels, Index stage_channels, const AblationFlags& flags,
                              T slope, nn::Rng& rng)
    : stage_channels_(stage_channels),
      flags_(flags),
      deconv_(in_channels, stage_channels, rng),
      proj1_(2 * stage_channels, stage_channels, true, rng, nn::Init::FanIn) {
  if (uses_lrd()) lrd_ = LrdBlock<T>(stage_channels, slope, rng);
  if (flags_.mff_enabled) mask_ = nn::Linear<T>(2 * stage_channels, 1, true, rng, nn::Init::FanIn);
  if (flags_.asc_enabled) asc_ = AscBlock<T>(stage_channels, slope, rng);
}

template <typename T>
Tensor<T> DecoderStage<T>::forward(const Tensor<T>& x, const Tensor<T>& skip, Cache* cache,
                                   StageTrace<T>* trace) const {
  Tensor<T> up = deconv_.forward(x, cache ? &cache->deconv : nullptr);
  if (skip.rank() != 4 || skip.dim(0) != up.dim(0) || skip.dim(1) != up.dim(1) ||
      skip.dim(2) != up.dim(2) || skip.dim(3) != stage_channels_)
    throw ShapeError("decoder_stage: upsampled " + to_string(up.shape()) +
                     " does not match skip " + to_string(skip.shape()));
  const Tensor<T> y = nn::concat_channels(up, skip);
  Tensor<T> line1 = proj1_.forward(y, cache ? &cache->proj1 : nullptr);
  Tensor<T> fused;
  if (flags_.mff_enabled) {
    Tensor<T> sum = line1;
    if (uses_lrd()) {
      Tensor<T> line2 = lrd_.forward(line1, cache ? &cache->lrd : nullptr);
      sum += line2;
      if (trace) trace->line2 = std::move(line2);
    }
    Tensor<T> line3 = nn::sigmoid(mask_.forward(y, cache ? &cache->mask : nullptr));
    fused = Tensor<T>(sum.shape());
    const Index c = stage_channels_;
    for (Index p = 0; p < line3.size(); ++p)
      for (Index ch = 0; ch < c; ++ch) fused[p * c + ch] = sum[p * c + ch] * line3[p];
    if (trace) trace->line3 = line3;
    if (cache) {
      cache->line_sum = std::move(sum);
      cache->line3 = std::move(line3);
    }
  } else {
    fused = line1;
  }
  if (trace) {
    trace->line1 = std::move(line1);
    trace->fused = fused;
  }
  if (!flags_.asc_enabled) return fused;
  return asc_.forward(fused, cache ? &cache->asc : nullptr);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DecoderStage<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  Tensor<T> g = flags_.asc_enabled ? asc_.backward(cache.asc, gy) : gy;
  Tensor<T> gy_concat;
  if (flags_.mff_enabled) {
    const Index c = stage_channels_;
    const Tensor<T>& m = cache.line3;
    Tensor<T> gsum(g.shape());
    Tensor<T> gm(m.shape());
    for (Index p = 0; p < m.size(); ++p) {
      T acc = 0;
      for (Index ch = 0; ch < c; ++ch) {
        gsum[p * c + ch] = g[p * c + ch] * m[p];
        acc += g[p * c + ch] * cache.line_sum[p * c + ch];
      }
      gm[p] = acc;
    }
    Tensor<T> gmask_in = mask_.backward(cache.mask, nn::sigmoid_backward(m, gm));
    Tensor<T> gline1 = gsum;
    if (uses_lrd()) gline1 += lrd_.backward(cache.lrd, gsum);
    gy_concat = proj1_.backward(cache.proj1, gline1);
    gy_concat += gmask_in;
  } else {
    gy_concat = proj1_.backward(cache.proj1, g);
  }
  auto [gup, gskip] = nn::split_channels(gy_concat, stage_channels_);
  return {deconv_.backward(cache.deconv, gup), std::move(gskip)};
}

template <typename T>
void DecoderStage<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  deconv_.collect_params(prefix + ".deconv", out);
  proj1_.collect_params(prefix + ".proj1", out);
  if (uses_lrd()) lrd_.collect_params(prefix + ".lrd", out);
  if (flags_.mff_enabled) mask_.collect_params(prefix + ".mask_line", out);
  if (flags_.asc_enabled) asc_.collect_params(prefix + ".asc", out);
}

// --------------------------------------------------------------- Decoder

template <typename T>
Decoder<T>::Decoder(const ModelConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  require_valid(cfg);
  const T slope = static_cast<T>(cfg.leaky_slope);
  for (int i = 0; i < 3; ++i)
    stages_[static_cast<std::size_t>(i)] =
        DecoderStage<T>(cfg.stage_dim(3 - i), cfg.stage_dim(2 - i), cfg.ablation, slope, rng);
  const int expansions = std::countr_zero(static_cast<unsigned>(cfg.patch_size));
  for (int i = 0; i < expansions; ++i) expand_.emplace_back(cfg.embed_dim, cfg.embed_dim, rng);
  head_ = nn::Linear<T>(cfg.embed_dim, cfg.num_classes, true, rng, nn::Init::FanIn);
}

template <typename T>
Tensor<T> Decoder<T>::forward(const EncoderOutput<T>& enc, Cache* cache) const {
  const T slope = static_cast<T>(cfg_.leaky_slope);
  Tensor<T> x = enc.bottleneck;
  for (std::size_t i = 0; i < stages_.size(); ++i)
    x = stages_[i].forward(x, enc.skips[2 - i], cache ? &cache->stages[i] : nullptr);
  if (cache) {
    cache->expand.resize(expand_.size());
    cache->expand_pre_act.resize(expand_.size());
  }
  for (std::size_t i = 0; i < expand_.size(); ++i) {
    Tensor<T> pre = expand_[i].forward(x, cache ? &cache->expand[i] : nullptr);
    x = nn::leaky_relu(pre, slope);
    if (cache) cache->expand_pre_act[i] = std::move(pre);
  }
  return nhwc_to_nchw(head_.forward(x, cache ? &cache->head : nullptr));
}

template <typename T>
EncoderOutput<T> Decoder<T>::backward(const Cache& cache, const Tensor<T>& glogits) {
  const T slope = static_cast<T>(cfg_.leaky_slope);
  Tensor<T> g = head_.backward(cache.head, nchw_to_nhwc(glogits));
  for (std::size_t i = expand_.size(); i-- > 0;) {
    g = nn::leaky_relu_backward(cache.expand_pre_act[i], g, slope);
    g = expand_[i].backward(cache.expand[i], g);
  }
  EncoderOutput<T> grads;
  for (std::size_t i = stages_.size(); i-- > 0;) {
    auto [gx, gskip] = stages_[i].backward(cache.stages[i], g);
    grads.skips[2 - i] = std::move(gskip);
    g = std::move(gx);
  }
  grads.bottleneck = std::move(g);
  return grads;
}

template <typename T>
void Decoder<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  for (std::size_t i = 0; i < stages_.size(); ++i)
    stages_[i].collect_params(prefix + ".stage" + std::to_string(i), out);
  for (std::size_t i = 0; i < expand_.size(); ++i)
    expand_[i].collect_params(prefix + ".expand" + std::to_string(i), out);
  head_.collect_params(prefix + ".head", out);
}

#define AFFSEG_INSTANTIATE_DECODER(T)                          \
  template Tensor<T> nhwc_to_nchw<T>(const Tensor<T>&);        \
  template Tensor<T> nchw_to_nhwc<T>(const Tensor<T>&);        \
  template class LrdBlock<T>;                                  \
  template class AscBlock<T>;                                  \
  template class DecoderStage<T>;                              \
  template class Decoder<T>;

AFFSEG_INSTANTIATE_DECODER(float)
AFFSEG_INSTANTIATE_DECODER(double)

}  // namespace affseg
