#include "affseg/model.hpp"

namespace affseg {

template <typename T>
AffSegNet<T>::AffSegNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require_valid(cfg);
  nn::Rng rng(seed);
  encoder_ = Encoder<T>(cfg, rng);
  decoder_ = Decoder<T>(cfg, rng);
}

template <typename T>
Tensor<T> AffSegNet<T>::forward(const Tensor<T>& image, Cache* cache) const {
  const EncoderOutput<T> enc = encoder_.forward(image, cache ? &cache->encoder : nullptr);
  return decoder_.forward(enc, cache ? &cache->decoder : nullptr);
}

template <typename T>
void AffSegNet<T>::backward(const Cache& cache, const Tensor<T>& glogits) {
  encoder_.backward(cache.encoder, decoder_.backward(cache.decoder, glogits));
}

template <typename T>
nn::ParamRefs<T> AffSegNet<T>::params() {
  nn::ParamRefs<T> out;
  encoder_.collect_params("encoder", out);
  decoder_.collect_params("decoder", out);
  return out;
}

template <typename T>
Index AffSegNet<T>::parameter_count() {
  return nn::parameter_count(params());
}

template <typename T>
void AffSegNet<T>::zero_grad() {
  for (auto& [name, p] : params()) p->zero_grad();
}

template <typename T>
std::map<std::string, Tensor<T>> AffSegNet<T>::state() {
  std::map<std::string, Tensor<T>> out;
  for (auto& [name, p] : params()) out.emplace(name, p->value);
  return out;
}

template <typename T>
void AffSegNet<T>::load_state(const std::map<std::string, Tensor<T>>& state) {
  auto refs = params();
  if (refs.size() != state.size())
    throw ShapeError("load_state: model has " + std::to_string(refs.size()) + " parameters, state has " +
                     std::to_string(state.size()));
  for (auto& [name, p] : refs) {
    auto it = state.find(name);
    if (it == state.end()) throw ShapeError("load_state: missing parameter " + name);
    it->second.require_shape(p->value.shape(), name.c_str());
  }
  for (auto& [name, p] : refs) p->value = state.at(name);
}

template class AffSegNet<float>;
template class AffSegNet<double>;

}  // namespace affseg
