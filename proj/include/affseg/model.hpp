#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "affseg/config.hpp"
#include "affseg/decoder.hpp"
#include "affseg/encoder.hpp"

namespace affseg {

/// Encoder plus AFF decoder. Image [B, Cin, H, W] -> logits [B, K, H, W].
template <typename T>
class AffSegNet {
 public:
  struct Cache {
    typename Encoder<T>::Cache encoder;
    typename Decoder<T>::Cache decoder;
  };

  AffSegNet() = default;
  AffSegNet(const ModelConfig& cfg, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& image, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients for the loss gradient w.r.t. logits.
  void backward(const Cache& cache, const Tensor<T>& glogits);

  /// Named parameters in a fixed traversal order. The pointers are valid
  /// until the model is moved.
  nn::ParamRefs<T> params();
  Index parameter_count();
  void zero_grad();

  /// Values keyed by parameter name; load requires the exact same key set
  /// and shapes.
  std::map<std::string, Tensor<T>> state();
  void load_state(const std::map<std::string, Tensor<T>>& state);

  const ModelConfig& config() const { return cfg_; }
  Encoder<T>& encoder() { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
};

}  // namespace affseg
