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
#include "dlrmkit/optim.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

namespace dlrmkit {

namespace {

inline uint32_t split_bits(const SplitTensorBF16& t, size_t i) {
  const uint32_t high = static_cast<uint32_t>(t.hi[i]) << 16;
  if (t.lo8_mode) return high | (static_cast<uint32_t>(t.lo8[i]) << 8);
  return high | t.lo[i];
}

inline void store_bits(SplitTensorBF16& t, size_t i, uint32_t bits) {
  t.hi[i] = static_cast<uint16_t>(bits >> 16);
  if (t.lo8_mode) {
    t.lo8[i] = static_cast<uint8_t>((bits >> 8) & 0xFFu);
  } else {
    t.lo[i] = static_cast<uint16_t>(bits & 0xFFFFu);
  }
}

}  // namespace

SplitTensorBF16 split_fp32(const DenseTensor& t) {
  SplitTensorBF16 s;
  s.shape = t.shape();
  const size_t n = static_cast<size_t>(t.numel());
  s.hi.resize(n);
  s.lo.resize(n);
  const float* data = t.data();
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = std::bit_cast<uint32_t>(data[i]);
    s.hi[i] = static_cast<uint16_t>(bits >> 16);
    s.lo[i] = static_cast<uint16_t>(bits & 0xFFFFu);
  }
  return s;
}

SplitTensorBF16 split_fp32_lo8(const DenseTensor& t) {
  SplitTensorBF16 s;
  s.shape = t.shape();
  s.lo8_mode = true;
  const size_t n = static_cast<size_t>(t.numel());
  s.hi.resize(n);
  s.lo8.resize(n);
  const float* data = t.data();
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = std::bit_cast<uint32_t>(data[i]);
    s.hi[i] = static_cast<uint16_t>(bits >> 16);
    s.lo8[i] = static_cast<uint8_t>((bits >> 8) & 0xFFu);
  }
  return s;
}

DenseTensor reconstruct(const SplitTensorBF16& t) {
  DenseTensor out(t.shape);
  float* data = out.data();
  for (size_t i = 0; i < t.hi.size(); ++i) data[i] = std::bit_cast<float>(split_bits(t, i));
  return out;
}

DenseTensor bf16_truncate_forward(const DenseTensor& t) {
  DenseTensor out = t;
  bf16_truncate_span(out.flat());
  return out;
}

void sgd_step_dense_fp32(std::span<float> params, std::span<const float> grad, float lr) {
  if (params.size() != grad.size()) {
    throw std::invalid_argument("sgd step: parameter/gradient size mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

void sgd_step_dense_split(SplitTensorBF16& master, std::span<const float> grad, float lr,
                          std::span<float> working) {
  if (static_cast<size_t>(master.numel()) != grad.size()) {
    throw std::invalid_argument("sgd step: parameter/gradient size mismatch");
  }
  if (!working.empty() && working.size() != grad.size()) {
    throw std::invalid_argument("sgd step: working buffer size mismatch");
  }
  for (size_t i = 0; i < grad.size(); ++i) {
    float v = std::bit_cast<float>(split_bits(master, i));
    v -= lr * grad[i];
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    store_bits(master, i, bits);
    if (!working.empty()) working[i] = std::bit_cast<float>(bits & 0xFFFF0000u);
  }
}

int SgdOptimizer::register_dense(std::span<float> params) {
  if (finalized_) throw std::logic_error("SgdOptimizer: register after finalize");
  for (const auto& slot : dense_) {
    if (slot.params.data() == params.data()) {
      throw std::invalid_argument("SgdOptimizer: dense parameter registered twice");
    }
  }
  dense_.push_back(DenseSlot{params, {}});
  return static_cast<int>(dense_.size()) - 1;
}

int SgdOptimizer::register_sparse(EmbeddingTable* table) {
  if (finalized_) throw std::logic_error("SgdOptimizer: register after finalize");
  for (const auto& slot : sparse_) {
    if (slot.table == table) {
      throw std::invalid_argument("SgdOptimizer: table registered twice");
    }
  }
  sparse_.push_back(SparseSlot{table, {}});
  return static_cast<int>(sparse_.size()) - 1;
}

void SgdOptimizer::finalize() {
  if (finalized_) return;
  finalized_ = true;
  if (mode_ == DtypeMode::kFp32) return;
  const bool lo8 = mode_ == DtypeMode::kSplitBf16Lo8;
  for (auto& slot : dense_) {
    DenseTensor t = DenseTensor::from({static_cast<int64_t>(slot.params.size())},
                                      std::vector<float>(slot.params.begin(), slot.params.end()));
    slot.master = lo8 ? split_fp32_lo8(t) : split_fp32(t);
    bf16_truncate_span(slot.params);
  }
  for (auto& slot : sparse_) {
    slot.master = lo8 ? split_fp32_lo8(slot.table->weights) : split_fp32(slot.table->weights);
    bf16_truncate_span(slot.table->weights.flat());
  }
}

void SgdOptimizer::step_dense(int slot, std::span<const float> grad) {
  if (!finalized_) throw std::logic_error("SgdOptimizer: step before finalize");
  DenseSlot& s = dense_.at(static_cast<size_t>(slot));
  if (mode_ == DtypeMode::kFp32) {
    sgd_step_dense_fp32(s.params, grad, lr_);
  } else {
    sgd_step_dense_split(s.master, grad, lr_, s.params);
  }
}

void SgdOptimizer::step_sparse(int slot, const SparseGrad& grad, UpdateStrategy strategy,
                               WorkerPool& pool, const UpdateOptions& opts) {
  if (!finalized_) throw std::logic_error("SgdOptimizer: step before finalize");
  SparseSlot& s = sparse_.at(static_cast<size_t>(slot));
  if (grad.indices.empty()) return;
  if (mode_ == DtypeMode::kFp32) {
    embedding_update(*s.table, grad, -lr_, strategy, pool, opts);
    return;
  }
  // Reconstruct the touched rows to full FP32, run the update there, then
  // re-split and leave the working rows BF16-truncated for the next forward.
  std::vector<int64_t> touched = grad.indices;
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  const int64_t e = s.table->dim();
  for (int64_t row : touched) {
    float* w = s.table->weights.row(row).data();
    const size_t base = static_cast<size_t>(row * e);
    for (int64_t j = 0; j < e; ++j) {
      w[j] = std::bit_cast<float>(split_bits(s.master, base + static_cast<size_t>(j)));
    }
  }
  embedding_update(*s.table, grad, -lr_, strategy, pool, opts);
  for (int64_t row : touched) {
    float* w = s.table->weights.row(row).data();
    const size_t base = static_cast<size_t>(row * e);
    for (int64_t j = 0; j < e; ++j) {
      const uint32_t bits = std::bit_cast<uint32_t>(w[j]);
      store_bits(s.master, base + static_cast<size_t>(j), bits);
      w[j] = std::bit_cast<float>(bits & 0xFFFF0000u);
    }
  }
}

int64_t SgdOptimizer::dense_param_count() const {
  int64_t n = 0;
  for (const auto& s : dense_) n += static_cast<int64_t>(s.params.size());
  return n;
}

int64_t SgdOptimizer::optimizer_state_bytes() const {
  int64_t n = 0;
  for (const auto& s : dense_) {
    n += static_cast<int64_t>(s.master.lo.size() * 2 + s.master.lo8.size());
  }
  for (const auto& s : sparse_) {
    n += static_cast<int64_t>(s.master.lo.size() * 2 + s.master.lo8.size());
  }
  return n;
}

}  // namespace dlrmkit
