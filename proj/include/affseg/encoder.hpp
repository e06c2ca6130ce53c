#pragma once

#include <array>
#include <vector>

#include "affseg/config.hpp"
#include "affseg/mwa_block.hpp"

namespace affseg {

/// Non-overlapping patch_size x patch_size patches, flattened in
/// (channel, row, col) order and linearly projected to embed_dim.
/// Image [B, Cin, H, W] (channels-first) -> tokens [B, H/p, W/p, C].
template <typename T>
class PatchEmbed {
 public:
  struct Cache {
    typename nn::Linear<T>::Cache proj;
  };

  PatchEmbed() = default;
  PatchEmbed(Index in_channels, Index patch, Index dim, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& image, Cache* cache) const;
  /// Accumulates parameter gradients; the image gradient is not needed.
  void backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);
  nn::Linear<T>& proj() { return proj_; }

  /// [B, Cin, H, W] -> [B, H/p, W/p, Cin*p*p], the rows fed to the projection.
  Tensor<T> flatten_patches(const Tensor<T>& image) const;

 private:
  Index in_channels_ = 1;
  Index patch_ = 1;
  nn::Linear<T> proj_;
};

/// 2x2 neighbourhood concat in (top-left, top-right, bottom-left,
/// bottom-right) order followed by a bias-free 4C -> 2C projection.
template <typename T>
class PatchMerging {
 public:
  struct Cache {
    typename nn::Linear<T>::Cache reduce;
  };

  PatchMerging() = default;
  PatchMerging(Index dim, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);
  nn::Linear<T>& reduce() { return reduce_; }

  static Tensor<T> gather(const Tensor<T>& x);
  static Tensor<T> scatter(const Tensor<T>& g);

 private:
  Index dim_ = 0;
  nn::Linear<T> reduce_;
};

/// Bottleneck at 1/(8p) with 8C channels plus skips at 1/p, 1/(2p), 1/(4p)
/// with C, 2C, 4C channels (fine to coarse). All NHWC.
template <typename T>
struct EncoderOutput {
  Tensor<T> bottleneck;
  std::array<Tensor<T>, 3> skips;
};

template <typename T>
class Encoder {
 public:
  struct Cache {
    typename PatchEmbed<T>::Cache embed;
    std::array<std::vector<typename MwaBlockPair<T>::Cache>, kStages> stages;
    std::array<typename PatchMerging<T>::Cache, kStages - 1> merges;
  };

  Encoder() = default;
  Encoder(const ModelConfig& cfg, nn::Rng& rng);

  EncoderOutput<T> forward(const Tensor<T>& image, Cache* cache) const;
  /// Gradients w.r.t. the bottleneck and each skip; accumulates into parameters.
  void backward(const Cache& cache, const EncoderOutput<T>& grads);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  PatchEmbed<T>& embed() { return embed_; }
  std::vector<MwaBlockPair<T>>& stage(int s) { return stages_[static_cast<std::size_t>(s)]; }
  PatchMerging<T>& merge(int s) { return merges_[static_cast<std::size_t>(s)]; }

 private:
  ModelConfig cfg_;
  PatchEmbed<T> embed_;
  std::array<std::vector<MwaBlockPair<T>>, kStages> stages_;
  std::array<PatchMerging<T>, kStages - 1> merges_;
};

}  // namespace affseg
