#include "affseg/mwa_block.hpp"

namespace affseg {

template <typename T>
FeedForward<T>::FeedForward(Index dim, Index hidden, bool enhanced, Index height, Index width,
                            nn::Rng& rng)
    : dim_(dim),
      hidden_(hidden),
      enhanced_(enhanced),
      height_(height),
      width_(width),
      expand_(dim, hidden, true, rng) {
  if (enhanced_) {
    dw_ = nn::DepthwiseConv3x3<T>(hidden, rng);
    pw_ = nn::Linear<T>(hidden, hidden, true, rng, nn::Init::FanIn);
  }
  project_ = nn::Linear<T>(hidden, dim, true, rng);
}

template <typename T>
Shape FeedForward<T>::grid_shape(const Tensor<T>& x) const {
  if (x.rank() == 3) {
    if (x.dim(1) != height_ * width_)
      throw ShapeError("FeedForward: token count " + std::to_string(x.dim(1)) + " != H*W = " +
                       std::to_string(height_ * width_));
  } else if (x.rank() == 4) {
    if (x.dim(1) != height_ || x.dim(2) != width_)
      throw ShapeError("FeedForward: grid " + to_string(x.shape()) + " does not match " +
                       std::to_string(height_) + "x" + std::to_string(width_));
  } else {
    throw ShapeError("FeedForward: expected [B, L, C] or [B, H, W, C], got " + to_string(x.shape()));
  }
  if (x.dim(-1) != dim_) throw ShapeError("FeedForward: channel mismatch " + to_string(x.shape()));
  return {x.dim(0), height_, width_, hidden_};
}

template <typename T>
Tensor<T> FeedForward<T>::forward(const Tensor<T>& x, Cache* cache) const {
  const Shape grid = grid_shape(x);
  Tensor<T> h = expand_.forward(x, cache ? &cache->expand : nullptr).reshape(grid);
  if (enhanced_) {
    Tensor<T> d = dw_.forward(h, cache ? &cache->dw : nullptr);
    Tensor<T> a = nn::gelu(d);
    Tensor<T> p = pw_.forward(a, cache ? &cache->pw : nullptr);
    h = nn::gelu(p);
    if (cache) {
      cache->dw_out = std::move(d);
      cache->pw_out = std::move(p);
    }
  } else {
    if (cache) cache->dw_out = h;
    h = nn::gelu(h);
  }
  Tensor<T> y = project_.forward(h, cache ? &cache->project : nullptr);
  return std::move(y).reshape(x.shape());
}

template <typename T>
Tensor<T> FeedForward<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Shape in_shape = cache.expand.input.shape();
  const Shape grid = grid_shape(cache.expand.input);
  Shape out_grid = grid;
  out_grid.back() = dim_;
  Tensor<T> g = project_.backward(cache.project, gy.reshaped(out_grid));
  if (enhanced_) {
    g = nn::gelu_backward(cache.pw_out, g);
    g = pw_.backward(cache.pw, g);
    g = nn::gelu_backward(cache.dw_out, g);
    g = dw_.backward(cache.dw, g);
  } else {
    g = nn::gelu_backward(cache.dw_out, g);
  }
  Shape hidden_shape = in_shape;
  hidden_shape.back() = hidden_;
  g.reshape(hidden_shape);
  return expand_.backward(cache.expand, g);
}

template <typename T>
void FeedForward<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  expand_.collect_params(prefix + ".expand", out);
  if (enhanced_) {
    dw_.collect_params(prefix + ".dw", out);
    pw_.collect_params(prefix + ".pw", out);
  }
  project_.collect_params(prefix + ".project", out);
}

template <typename T>
TransformerBlock<T>::TransformerBlock(Index dim, Index heads, Index window, Index shift,
                                      Index height, Index width, Index hidden, bool effn,
                                      nn::Rng& rng)
    : norm1_(dim),
      attn_(dim, heads, window, shift, height, width, rng),
      norm2_(dim),
      ffn_(dim, hidden, effn, height, width, rng) {}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, Cache* cache) const {
  Tensor<T> y = attn_.forward(norm1_.forward(x, cache ? &cache->norm1 : nullptr),
                              cache ? &cache->attn : nullptr);
  y += x;
  Tensor<T> f = ffn_.forward(norm2_.forward(y, cache ? &cache->norm2 : nullptr),
                             cache ? &cache->ffn : nullptr);
  f += y;
  return f;
}

template <typename T>
Tensor<T> TransformerBlock<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  Tensor<T> g_mid = norm2_.backward(cache.norm2, ffn_.backward(cache.ffn, gy));
  g_mid += gy;
  Tensor<T> gx = norm1_.backward(cache.norm1, attn_.backward(cache.attn, g_mid));
  gx += g_mid;
  return gx;
}

template <typename T>
void TransformerBlock<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  norm1_.collect_params(prefix + ".norm1", out);
  attn_.collect_params(prefix + ".attn", out);
  norm2_.collect_params(prefix + ".norm2", out);
  ffn_.collect_params(prefix + ".ffn", out);
}

template <typename T>
MwaBlockPair<T>::MwaBlockPair(Index dim, Index heads, Index window, Index shift, Index height,
                              Index width, Index hidden, bool effn, nn::Rng& rng)
    : blocks_{TransformerBlock<T>(dim, heads, window, 0, height, width, hidden, effn, rng),
              TransformerBlock<T>(dim, heads, window, shift, height, width, hidden, effn, rng)} {}

template <typename T>
Tensor<T> MwaBlockPair<T>::forward(const Tensor<T>& x, Cache* cache) const {
  Tensor<T> y = blocks_[0].forward(x, cache ? &cache->blocks[0] : nullptr);
  return blocks_[1].forward(y, cache ? &cache->blocks[1] : nullptr);
}

template <typename T>
Tensor<T> MwaBlockPair<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  return blocks_[0].backward(cache.blocks[0], blocks_[1].backward(cache.blocks[1], gy));
}

template <typename T>
void MwaBlockPair<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  blocks_[0].collect_params(prefix + ".wmsa", out);
  blocks_[1].collect_params(prefix + ".swmsa", out);
}

template class FeedForward<float>;
template class FeedForward<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class MwaBlockPair<float>;
template class MwaBlockPair<double>;

}  // namespace affseg
