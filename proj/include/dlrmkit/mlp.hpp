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
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dlrmkit/tensor.hpp"
#include "dlrmkit/worker_pool.hpp"

namespace dlrmkit {

enum class Activation { kNone, kRelu, kSigmoid };

struct FCLayer {
  int64_t in_features = 0;   // C
  int64_t out_features = 0;  // K
  int64_t block_in = 1;      // b_c
  int64_t block_out = 1;     // b_k
  BlockedTensor4 weight;     // [K_b][C_b][b_c][b_k]
  DenseTensor bias;          // [K]
  Activation act = Activation::kNone;
};

// Saved by the forward pass for the backward masks and the weight-gradient GEMM.
struct FcCache {
  BlockedTensor4 input;   // X as consumed, [C_b][N_b][b_n][b_c]
  BlockedTensor4 preact;  // W*X + bias before the activation, output layout
};

struct FcWeightGrads {
  BlockedTensor4 weight;  // same layout as FCLayer::weight
  DenseTensor bias;       // [K]
};

struct PassStats {
  double flops = 0.0;
  double seconds = 0.0;
  double gflops() const { return seconds > 0.0 ? flops / seconds * 1e-9 : 0.0; }
};

struct MlpTuning {
  int64_t pref_block = 32;  // preferred b_n / b_c / b_k, clamped to each extent
  int64_t grid_tile = 0;    // optional extra cache blocking of the (N_b x K_b) grid; 0 = off
  bool bf16_inputs = false; // truncate layer inputs to BF16 values before compute
};

// out[n][k] += sum_i B_i[n][c] * A_i[c][k]; A blocks are [bc][bk], B blocks [bn][bc].
// Accumulation runs i-major with c ascending, so the order is fixed regardless of caller.
void batch_reduce_gemm(const float* const* a_blocks, const float* const* b_blocks, int64_t count,
                       float* out, int64_t bn, int64_t bc, int64_t bk);

// out[m][j] += sum_i B_i[r][m] * A_i[r][j]; B is consumed transposed.
// A blocks are [br][bj], B blocks [br][bm]. Used by the backward-by-weights pass.
void batch_reduce_gemm_bt(const float* const* a_blocks, const float* const* b_blocks, int64_t count,
                          float* out, int64_t br, int64_t bm, int64_t bj);

// x is an activation-layout tensor with inner2 == layer.block_in. Returns the
// post-activation output, again in activation layout (inner2 == layer.block_out).
BlockedTensor4 fc_forward(const FCLayer& layer, const BlockedTensor4& x, WorkerPool& pool,
                          FcCache* cache = nullptr, int64_t grid_tile = 0);

// dX = W^T * (dY ⊙ act'(preact)), blocked analogously to the forward pass.
BlockedTensor4 fc_backward_data(const FCLayer& layer, const BlockedTensor4& d_out,
                                const FcCache& cache, WorkerPool& pool, int64_t grid_tile = 0);

// dW = (dY ⊙ act'(preact)) * X^T per block, db = column sums of the masked dY.
FcWeightGrads fc_backward_weights(const FCLayer& layer, const BlockedTensor4& d_out,
                                  const FcCache& cache, WorkerPool& pool, int64_t grid_tile = 0);

class Mlp {
 public:
  struct Grads {
    std::vector<FcWeightGrads> layers;
    DenseTensor input;  // gradient w.r.t. the MLP input, [N][C0]
  };

  Mlp() = default;
  // widths[i] is the output width of layer i; hidden layers use `hidden`,
  // the last layer uses `final_act`. Weights are Glorot-uniform from `rng`.
  Mlp(int64_t input_width, std::span<const int64_t> widths, Activation hidden,
      Activation final_act, const MlpTuning& tuning, std::mt19937_64& rng);

  DenseTensor forward(const DenseTensor& x, WorkerPool& pool,
                      std::vector<FcCache>* caches = nullptr);
  Grads backward(const std::vector<FcCache>& caches, const DenseTensor& d_out, WorkerPool& pool);

  std::vector<FCLayer>& layers() { return layers_; }
  const std::vector<FCLayer>& layers() const { return layers_; }
  int64_t input_width() const { return input_width_; }
  int64_t output_width() const { return layers_.back().out_features; }
  int64_t param_count() const;

  const MlpTuning& tuning() const { return tuning_; }
  PassStats& forward_stats() { return fwd_stats_; }
  PassStats& backward_data_stats() { return bwd_d_stats_; }
  PassStats& backward_weights_stats() { return bwd_w_stats_; }

 private:
  int64_t input_width_ = 0;
  std::vector<FCLayer> layers_;
  MlpTuning tuning_;
  PassStats fwd_stats_, bwd_d_stats_, bwd_w_stats_;
};

}  // namespace dlrmkit
