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
#include <span>
#include <vector>

#include "dlrmkit/embedding.hpp"
#include "dlrmkit/tensor.hpp"
#include "dlrmkit/worker_pool.hpp"

namespace dlrmkit {

// An FP32 tensor stored as two 16-bit planes: hi holds the upper 16 bits of every
// element (a valid BFLOAT16 tensor on its own), lo the lower 16. Reconstructing
// (hi << 16) | lo is bit-identical to the original FP32 data, so the pair acts as
// implicit master weights at 4 bytes per parameter. The lo8 variant keeps only the
// top 8 of the low bits (3 bytes per parameter); it exists to demonstrate that
// 8 extra mantissa bits are not enough to track the FP32 trajectory.
struct SplitTensorBF16 {
  std::vector<int64_t> shape;
  std::vector<uint16_t> hi;
  std::vector<uint16_t> lo;
  std::vector<uint8_t> lo8;
  bool lo8_mode = false;

  int64_t numel() const { return static_cast<int64_t>(hi.size()); }
  int64_t storage_bytes() const {
    return static_cast<int64_t>(hi.size() * 2 + lo.size() * 2 + lo8.size());
  }
};

SplitTensorBF16 split_fp32(const DenseTensor& t);
SplitTensorBF16 split_fp32_lo8(const DenseTensor& t);
DenseTensor reconstruct(const SplitTensorBF16& t);

// FP32 tensor whose elements carry only their BF16 (hi-plane) value; the lower
// 16 bits are zero. Emulates what a BF16 forward/backward pass reads.
DenseTensor bf16_truncate_forward(const DenseTensor& t);

// p -= lr * g, plain FP32.
void sgd_step_dense_fp32(std::span<float> params, std::span<const float> grad, float lr);

// Reconstruct -> FP32 update -> re-split, both planes updated as a pair. If
// `working` is non-empty it receives the BF16-truncated updated values (what the
// next forward pass should read).
void sgd_step_dense_split(SplitTensorBF16& master, std::span<const float> grad, float lr,
                          std::span<float> working = {});

enum class DtypeMode { kFp32, kSplitBf16, kSplitBf16Lo8 };

// Plain SGD over registered dense parameter spans and embedding tables. In the
// split modes the registered buffers hold BF16-truncated values for compute while
// the optimizer keeps the exact hi/lo planes; FP32 mode updates buffers in place.
class SgdOptimizer {
 public:
  SgdOptimizer(DtypeMode mode, float lr) : mode_(mode), lr_(lr) {}

  int register_dense(std::span<float> params);
  int register_sparse(EmbeddingTable* table);
  // Splits the current values into master planes (split modes) and truncates the
  // working copies. Call once after all registrations.
  void finalize();

  void step_dense(int slot, std::span<const float> grad);
  void step_sparse(int slot, const SparseGrad& grad, UpdateStrategy strategy, WorkerPool& pool,
                   const UpdateOptions& opts = {});

  DtypeMode mode() const { return mode_; }
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  int64_t dense_param_count() const;
  // Bytes held by the optimizer beyond the model's own working copies.
  int64_t optimizer_state_bytes() const;

 private:
  struct DenseSlot {
    std::span<float> params;
    SplitTensorBF16 master;
  };
  struct SparseSlot {
    EmbeddingTable* table = nullptr;
    SplitTensorBF16 master;
  };

  DtypeMode mode_;
  float lr_;
  bool finalized_ = false;
  std::vector<DenseSlot> dense_;
  std::vector<SparseSlot> sparse_;
};

}  // namespace dlrmkit
