/*
 * Copyright (c) 2026, the dlrmkit authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dlrmkit/mlp.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace dlrmkit {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline float sigmoid(float x) {
  if (x >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-x));
  }
  const float e = std::exp(x);
  return e / (1.0f + e);
}

inline float apply_act(Activation act, float v) {
  switch (act) {
    case Activation::kRelu:
      return v > 0.0f ? v : 0.0f;
    case Activation::kSigmoid:
      return sigmoid(v);
    case Activation::kNone:
      return v;
  }
  return v;
}

inline float act_derivative(Activation act, float preact) {
  switch (act) {
    case Activation::kRelu:
      return preact > 0.0f ? 1.0f : 0.0f;
    case Activation::kSigmoid: {
      const float s = sigmoid(preact);
      return s * (1.0f - s);
    }
    case Activation::kNone:
      return 1.0f;
  }
  return 1.0f;
}

// Walks the (rows x cols) output-block grid for one worker, optionally in square
// tiles. Cells outside [begin, end) of the flattened row-major order are skipped,
// so tiling never changes which worker owns a block.
template <typename Fn>
void for_grid(int64_t rows, int64_t cols, int64_t begin, int64_t end, int64_t tile, Fn&& fn) {
  if (tile <= 0) {
    for (int64_t g = begin; g < end; ++g) fn(g / cols, g % cols);
    return;
  }
  for (int64_t r0 = 0; r0 < rows; r0 += tile) {
    for (int64_t c0 = 0; c0 < cols; c0 += tile) {
      const int64_t r1 = std::min(r0 + tile, rows), c1 = std::min(c0 + tile, cols);
      for (int64_t r = r0; r < r1; ++r) {
        for (int64_t c = c0; c < c1; ++c) {
          const int64_t g = r * cols + c;
          if (g >= begin && g < end) fn(r, c);
        }
      }
    }
  }
}

void check_forward_shapes(const FCLayer& layer, const BlockedTensor4& x) {
  if (x.role != BlockedRole::kActivation || x.inner2 != layer.block_in ||
      x.outer1 * x.inner2 != layer.in_features) {
    throw std::invalid_argument("fc layer: input tensor does not match layer dimensions");
  }
}

}  // namespace

void batch_reduce_gemm(const float* const* a_blocks, const float* const* b_blocks, int64_t count,
                       float* out, int64_t bn, int64_t bc, int64_t bk) {
  for (int64_t i = 0; i < count; ++i) {
    const float* a = a_blocks[i];
    const float* b = b_blocks[i];
    for (int64_t n = 0; n < bn; ++n) {
      const float* brow = b + n * bc;
      float* orow = out + n * bk;
      for (int64_t c = 0; c < bc; ++c) {
        const float bv = brow[c];
        const float* arow = a + c * bk;
        for (int64_t k = 0; k < bk; ++k) orow[k] += bv * arow[k];
      }
    }
  }
}

void batch_reduce_gemm_bt(const float* const* a_blocks, const float* const* b_blocks, int64_t count,
                          float* out, int64_t br, int64_t bm, int64_t bj) {
  for (int64_t i = 0; i < count; ++i) {
    const float* a = a_blocks[i];
    const float* b = b_blocks[i];
    for (int64_t r = 0; r < br; ++r) {
      const float* arow = a + r * bj;
      const float* brow = b + r * bm;
      for (int64_t m = 0; m < bm; ++m) {
        const float bv = brow[m];
        float* orow = out + m * bj;
        for (int64_t j = 0; j < bj; ++j) orow[j] += bv * arow[j];
      }
    }
  }
}

BlockedTensor4 fc_forward(const FCLayer& layer, const BlockedTensor4& x, WorkerPool& pool,
                          FcCache* cache, int64_t grid_tile) {
  check_forward_shapes(layer, x);
  const int64_t cb = x.outer1, nb = x.outer2, bn = x.inner1, bc = x.inner2;
  const int64_t kb = layer.weight.outer1, bk = layer.weight.inner2;

  BlockedTensor4 y;
  y.role = BlockedRole::kActivation;
  y.outer1 = kb;
  y.outer2 = nb;
  y.inner1 = bn;
  y.inner2 = bk;
  y.data.assign(static_cast<size_t>(y.numel()), 0.0f);
  if (cache != nullptr) {
    cache->input = x;
    cache->preact = y;  // same geometry, filled below
  }

  const int64_t grid = nb * kb;
  pool.run([&](int tid) {
    auto [begin, end] = partition_rows(grid, pool.size(), tid);
    std::vector<const float*> aptrs(static_cast<size_t>(cb));
    std::vector<const float*> bptrs(static_cast<size_t>(cb));
    for_grid(nb, kb, begin, end, grid_tile, [&](int64_t ibn, int64_t ibk) {
      for (int64_t ibc = 0; ibc < cb; ++ibc) {
        aptrs[static_cast<size_t>(ibc)] = layer.weight.block(ibk, ibc);
        bptrs[static_cast<size_t>(ibc)] = x.block(ibc, ibn);
      }
      float* out = y.block(ibk, ibn);
      batch_reduce_gemm(aptrs.data(), bptrs.data(), cb, out, bn, bc, bk);
      const float* bias = layer.bias.data() + ibk * bk;
      for (int64_t n = 0; n < bn; ++n) {
        for (int64_t k = 0; k < bk; ++k) out[n * bk + k] += bias[k];
      }
      if (cache != nullptr) {
        float* pre = cache->preact.block(ibk, ibn);
        for (int64_t i = 0; i < bn * bk; ++i) pre[i] = out[i];
      }
      for (int64_t i = 0; i < bn * bk; ++i) out[i] = apply_act(layer.act, out[i]);
    });
  });
  return y;
}

namespace {

// dZ = dY ⊙ act'(preact); dY and preact share the output-block geometry.
BlockedTensor4 masked_grad(const FCLayer& layer, const BlockedTensor4& d_out,
                           const BlockedTensor4& preact, WorkerPool& pool) {
  if (d_out.numel() != preact.numel() || d_out.outer1 != preact.outer1) {
    throw std::invalid_argument("fc layer: output gradient does not match cached pre-activations");
  }
  BlockedTensor4 dz = d_out;
  if (layer.act == Activation::kNone) return dz;
  const int64_t total = dz.numel();
  pool.run([&](int tid) {
    auto [begin, end] = partition_rows(total, pool.size(), tid);
    for (int64_t i = begin; i < end; ++i) {
      dz.data[static_cast<size_t>(i)] *= act_derivative(layer.act, preact.data[static_cast<size_t>(i)]);
    }
  });
  return dz;
}

// W[K_b][C_b][b_c][b_k] -> Wt[C_b][K_b][b_k][b_c]
BlockedTensor4 transpose_blocked_weight(const BlockedTensor4& w) {
  BlockedTensor4 wt;
  wt.role = BlockedRole::kWeight;
  wt.outer1 = w.outer2;
  wt.outer2 = w.outer1;
  wt.inner1 = w.inner2;
  wt.inner2 = w.inner1;
  wt.data.assign(static_cast<size_t>(w.numel()), 0.0f);
  for (int64_t ibk = 0; ibk < w.outer1; ++ibk) {
    for (int64_t ibc = 0; ibc < w.outer2; ++ibc) {
      const float* src = w.block(ibk, ibc);
      float* dst = wt.block(ibc, ibk);
      for (int64_t c = 0; c < w.inner1; ++c) {
        for (int64_t k = 0; k < w.inner2; ++k) dst[k * w.inner1 + c] = src[c * w.inner2 + k];
      }
    }
  }
  return wt;
}

}  // namespace

BlockedTensor4 fc_backward_data(const FCLayer& layer, const BlockedTensor4& d_out,
                                const FcCache& cache, WorkerPool& pool, int64_t grid_tile) {
  const int64_t kb = d_out.outer1, nb = d_out.outer2, bn = d_out.inner1, bk = d_out.inner2;
  if (bk != layer.block_out || kb * bk != layer.out_features) {
    throw std::invalid_argument("fc_backward_data: gradient does not match layer dimensions");
  }
  const BlockedTensor4 dz = masked_grad(layer, d_out, cache.preact, pool);
  const BlockedTensor4 wt = transpose_blocked_weight(layer.weight);
  const int64_t cb = wt.outer1, bc = wt.inner2;

  BlockedTensor4 dx;
  dx.role = BlockedRole::kActivation;
  dx.outer1 = cb;
  dx.outer2 = nb;
  dx.inner1 = bn;
  dx.inner2 = bc;
  dx.data.assign(static_cast<size_t>(cb * nb * bn * bc), 0.0f);

  const int64_t grid = nb * cb;
  pool.run([&](int tid) {
    auto [begin, end] = partition_rows(grid, pool.size(), tid);
    std::vector<const float*> aptrs(static_cast<size_t>(kb));
    std::vector<const float*> bptrs(static_cast<size_t>(kb));
    for_grid(nb, cb, begin, end, grid_tile, [&](int64_t ibn, int64_t ibc) {
      for (int64_t ibk = 0; ibk < kb; ++ibk) {
        aptrs[static_cast<size_t>(ibk)] = wt.block(ibc, ibk);
        bptrs[static_cast<size_t>(ibk)] = dz.block(ibk, ibn);
      }
      batch_reduce_gemm(aptrs.data(), bptrs.data(), kb, dx.block(ibc, ibn), bn, bk, bc);
    });
  });
  return dx;
}

FcWeightGrads fc_backward_weights(const FCLayer& layer, const BlockedTensor4& d_out,
                                  const FcCache& cache, WorkerPool& pool, int64_t grid_tile) {
  const int64_t kb = d_out.outer1, nb = d_out.outer2, bn = d_out.inner1, bk = d_out.inner2;
  if (bk != layer.block_out || kb * bk != layer.out_features) {
    throw std::invalid_argument("fc_backward_weights: gradient does not match layer dimensions");
  }
  const BlockedTensor4 dz = masked_grad(layer, d_out, cache.preact, pool);
  const BlockedTensor4& x = cache.input;
  const int64_t cb = x.outer1, bc = x.inner2;

  FcWeightGrads grads;
  grads.weight.role = BlockedRole::kWeight;
  grads.weight.outer1 = kb;
  grads.weight.outer2 = cb;
  grads.weight.inner1 = bc;
  grads.weight.inner2 = bk;
  grads.weight.data.assign(static_cast<size_t>(kb * cb * bc * bk), 0.0f);
  grads.bias = DenseTensor({layer.out_features});

  const int64_t grid = kb * cb;
  pool.run([&](int tid) {
    auto [begin, end] = partition_rows(grid, pool.size(), tid);
    std::vector<const float*> aptrs(static_cast<size_t>(nb));
    std::vector<const float*> bptrs(static_cast<size_t>(nb));
    for_grid(kb, cb, begin, end, grid_tile, [&](int64_t ibk, int64_t ibc) {
      for (int64_t ibn = 0; ibn < nb; ++ibn) {
        aptrs[static_cast<size_t>(ibn)] = dz.block(ibk, ibn);
        bptrs[static_cast<size_t>(ibn)] = x.block(ibc, ibn);
      }
      batch_reduce_gemm_bt(aptrs.data(), bptrs.data(), nb, grads.weight.block(ibk, ibc), bn, bc, bk);
    });
  });

  // Bias gradient: global n ascends within each K block, keeping the reduction
  // order identical to the naive column sum.
  pool.run([&](int tid) {
    auto [kb_begin, kb_end] = partition_rows(kb, pool.size(), tid);
    for (int64_t ibk = kb_begin; ibk < kb_end; ++ibk) {
      float* db = grads.bias.data() + ibk * bk;
      for (int64_t ibn = 0; ibn < nb; ++ibn) {
        const float* blk = dz.block(ibk, ibn);
        for (int64_t n = 0; n < bn; ++n) {
          for (int64_t k = 0; k < bk; ++k) db[k] += blk[n * bk + k];
        }
      }
    }
  });
  return grads;
}

Mlp::Mlp(int64_t input_width, std::span<const int64_t> widths, Activation hidden,
         Activation final_act, const MlpTuning& tuning, std::mt19937_64& rng)
    : input_width_(input_width), tuning_(tuning) {
  if (widths.empty()) throw std::invalid_argument("Mlp: needs at least one layer");
  layers_.reserve(widths.size());
  int64_t in = input_width;
  for (size_t i = 0; i < widths.size(); ++i) {
    const int64_t out = widths[i];
    FCLayer layer;
    layer.in_features = in;
    layer.out_features = out;
    layer.block_in = pick_block(in, tuning.pref_block);
    layer.block_out = pick_block(out, tuning.pref_block);
    layer.act = (i + 1 == widths.size()) ? final_act : hidden;
    const float bound = std::sqrt(6.0f / static_cast<float>(in + out));
    std::uniform_real_distribution<float> dist(-bound, bound);
    DenseTensor w({out, in});
    for (float& v : w.flat()) v = dist(rng);
    layer.weight = to_blocked(w, BlockedRole::kWeight, layer.block_out, layer.block_in);
    layer.bias = DenseTensor({out});
    layers_.push_back(std::move(layer));
    in = out;
  }
}

int64_t Mlp::param_count() const {
  int64_t n = 0;
  for (const auto& l : layers_) n += l.in_features * l.out_features + l.out_features;
  return n;
}

DenseTensor Mlp::forward(const DenseTensor& x, WorkerPool& pool, std::vector<FcCache>* caches) {
  if (x.rank() != 2 || x.dim(1) != input_width_) {
    throw std::invalid_argument("Mlp::forward: input width mismatch");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t n = x.dim(0);
  const int64_t bn = pick_block(n, tuning_.pref_block);
  if (caches != nullptr) caches->assign(layers_.size(), FcCache{});

  BlockedTensor4 cur = to_blocked(x, BlockedRole::kActivation, bn, layers_.front().block_in);
  double flops = 0.0;
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (tuning_.bf16_inputs) bf16_truncate_span(cur.data);
    FcCache* cache = caches != nullptr ? &(*caches)[i] : nullptr;
    cur = fc_forward(layers_[i], cur, pool, cache, tuning_.grid_tile);
    flops += 2.0 * static_cast<double>(n) * static_cast<double>(layers_[i].in_features) *
             static_cast<double>(layers_[i].out_features);
  }
  fwd_stats_.flops += flops;
  fwd_stats_.seconds += seconds_since(t0);
  return from_blocked(cur);
}

Mlp::Grads Mlp::backward(const std::vector<FcCache>& caches, const DenseTensor& d_out,
                         WorkerPool& pool) {
  if (caches.size() != layers_.size()) {
    throw std::invalid_argument("Mlp::backward: cache count does not match layer count");
  }
  if (d_out.rank() != 2 || d_out.dim(1) != output_width()) {
    throw std::invalid_argument("Mlp::backward: gradient width mismatch");
  }
  const int64_t n = d_out.dim(0);
  const int64_t bn = caches.front().input.inner1;

  Grads grads;
  grads.layers.resize(layers_.size());
  BlockedTensor4 dy =
      to_blocked(d_out, BlockedRole::kActivation, bn, layers_.back().block_out);
  double flops_w = 0.0, flops_d = 0.0;
  double secs_w = 0.0, secs_d = 0.0;
  for (size_t ri = layers_.size(); ri-- > 0;) {
    if (tuning_.bf16_inputs) bf16_truncate_span(dy.data);
    const double lw = 2.0 * static_cast<double>(n) *
                      static_cast<double>(layers_[ri].in_features) *
                      static_cast<double>(layers_[ri].out_features);
    auto tw = std::chrono::steady_clock::now();
    grads.layers[ri] = fc_backward_weights(layers_[ri], dy, caches[ri], pool, tuning_.grid_tile);
    secs_w += seconds_since(tw);
    flops_w += lw;
    auto td = std::chrono::steady_clock::now();
    dy = fc_backward_data(layers_[ri], dy, caches[ri], pool, tuning_.grid_tile);
    secs_d += seconds_since(td);
    flops_d += lw;
  }
  grads.input = from_blocked(dy);
  bwd_w_stats_.flops += flops_w;
  bwd_w_stats_.seconds += secs_w;
  bwd_d_stats_.flops += flops_d;
  bwd_d_stats_.seconds += secs_d;
  return grads;
}

}  // namespace dlrmkit
