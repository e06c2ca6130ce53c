#pragma once

#include <array>
#include <optional>
#include <vector>

#include "affseg/config.hpp"
#include "affseg/encoder.hpp"
#include "affseg/nn/layers.hpp"

namespace affseg {

inline constexpr Index kAscReduction = 4;
inline constexpr std::array<Index, 3> kLrdDilations{1, 2, 4};

/// Long-range dependency block: x + stack(x), where the stack is three
/// 3x3 convolutions with dilations 1, 2, 4, each followed by LeakyReLU.
/// Receptive field 15 x 15; channels and spatial size preserved.
template <typename T>
class LrdBlock {
 public:
  struct Cache {
    std::array<typename nn::Conv2d<T>::Cache, 3> convs;
    std::array<Tensor<T>, 3> pre_act;
  };

  LrdBlock() = default;
  LrdBlock(Index channels, T slope, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);
  nn::Conv2d<T>& conv(int i) { return convs_[static_cast<std::size_t>(i)]; }

 private:
  Index channels_ = 0;
  T slope_ = T(0.01);
  std::array<nn::Conv2d<T>, 3> convs_;
};

/// Adaptive semantic center: global average pool -> FC (C -> C/4) ->
/// LeakyReLU -> FC (C/4 -> C) -> sigmoid, used as a per-channel gate.
template <typename T>
class AscBlock {
 public:
  struct Cache {
    Tensor<T> input;
    typename nn::Linear<T>::Cache fc1;
    Tensor<T> hidden;
    typename nn::Linear<T>::Cache fc2;
    Tensor<T> gate;
  };

  AscBlock() = default;
  AscBlock(Index channels, T slope, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);
  /// The [B, C] gate for x, in (0, 1).
  Tensor<T> gate(const Tensor<T>& x) const;
  nn::Linear<T>& fc1() { return fc1_; }
  nn::Linear<T>& fc2() { return fc2_; }

 private:
  Index channels_ = 0;
  T slope_ = T(0.01);
  nn::Linear<T> fc1_;
  nn::Linear<T> fc2_;
};

/// Intermediate values of one decoder stage, exposed for tests.
template <typename T>
struct StageTrace {
  Tensor<T> line1;
  Tensor<T> line2;  // empty when LRD or MFF is disabled
  Tensor<T> line3;  // [B, H, W, 1]; empty when MFF is disabled
  Tensor<T> fused;  // input to the ASC block
};

/// One AFF decoder stage: deconvolution up-sampling, skip concatenation,
/// then three lines over the concatenation y:
///   line1 = proj1(y)                1x1 conv back to stage width
///   line2 = LRD(line1)
///   line3 = sigmoid(mask(y))        1x1 conv to one channel
/// fused = (line1 + line2) * line3, output = ASC(fused).
/// Ablation flags remove LRD (fused = line1 * line3), MFF (fused = line1)
/// or ASC (identity).
template <typename T>
class DecoderStage {
 public:
  struct Cache {
    typename nn::ConvTranspose2x2<T>::Cache deconv;
    typename nn::Linear<T>::Cache proj1;
    typename LrdBlock<T>::Cache lrd;
    typename nn::Linear<T>::Cache mask;
    Tensor<T> line_sum;
    Tensor<T> line3;
    typename AscBlock<T>::Cache asc;
  };

  DecoderStage() = default;
  /// in_channels from the coarser level; output has stage_channels = in / 2.
  DecoderStage(Index in_channels, Index stage_channels, const AblationFlags& flags, T slope,
               nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip, Cache* cache,
                    StageTrace<T>* trace = nullptr) const;
  /// Returns (gradient w.r.t. x, gradient w.r.t. skip).
  std::pair<Tensor<T>, Tensor<T>> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  nn::ConvTranspose2x2<T>& deconv() { return deconv_; }
  nn::Linear<T>& proj1() { return proj1_; }
  LrdBlock<T>& lrd() { return lrd_; }
  nn::Linear<T>& mask_line() { return mask_; }
  AscBlock<T>& asc() { return asc_; }
  const AblationFlags& flags() const { return flags_; }

 private:
  bool uses_lrd() const { return flags_.mff_enabled && flags_.lrd_enabled; }

  Index stage_channels_ = 0;
  AblationFlags flags_;
  nn::ConvTranspose2x2<T> deconv_;
  nn::Linear<T> proj1_;
  LrdBlock<T> lrd_;
  nn::Linear<T> mask_;
  AscBlock<T> asc_;
};

/// Three AFF stages (coarse to fine), log2(patch) stride-2 expansion
/// deconvolutions with LeakyReLU, and a 1x1 output head.
/// Produces logits [B, num_classes, H, W] (channels-first).
template <typename T>
class Decoder {
 public:
  struct Cache {
    std::array<typename DecoderStage<T>::Cache, 3> stages;
    std::vector<typename nn::ConvTranspose2x2<T>::Cache> expand;
    std::vector<Tensor<T>> expand_pre_act;
    typename nn::Linear<T>::Cache head;
  };

  Decoder() = default;
  Decoder(const ModelConfig& cfg, nn::Rng& rng);

  Tensor<T> forward(const EncoderOutput<T>& enc, Cache* cache) const;
  EncoderOutput<T> backward(const Cache& cache, const Tensor<T>& glogits);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  /// stage(0) consumes the bottleneck; stage(2) produces the 1/p map.
  DecoderStage<T>& stage(int i) { return stages_[static_cast<std::size_t>(i)]; }
  std::vector<nn::ConvTranspose2x2<T>>& expansion() { return expand_; }
  nn::Linear<T>& head() { return head_; }

 private:
  ModelConfig cfg_;
  std::array<DecoderStage<T>, 3> stages_;
  std::vector<nn::ConvTranspose2x2<T>> expand_;
  nn::Linear<T> head_;
};

/// NHWC <-> NCHW conversions for the model boundary.
template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& x);
template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x);

}  // namespace affseg
