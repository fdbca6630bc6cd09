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
#include <utility>
#include <vector>

#include "dlrmkit/tensor.hpp"
#include "dlrmkit/worker_pool.hpp"

namespace dlrmkit {

struct EmbeddingTable {
  DenseTensor weights;  // [M][E]

  EmbeddingTable() = default;
  EmbeddingTable(int64_t rows, int64_t dim) : weights({rows, dim}) {}

  int64_t rows() const { return weights.dim(0); }
  int64_t dim() const { return weights.dim(1); }
};

// Bag-of-lookups minibatch: bag n covers indices[offsets[n] .. offsets[n+1]).
// offsets has bags+1 entries, offsets[0] == 0, nondecreasing; empty bags are legal,
// as are duplicate indices within a bag.
struct LookupBatch {
  int64_t bags = 0;
  std::vector<int64_t> offsets;
  std::vector<int64_t> indices;

  int64_t lookups() const { return static_cast<int64_t>(indices.size()); }
  // Throws std::invalid_argument naming the offending position.
  void validate(int64_t table_rows) const;
};

// Per-lookup gradient: one row of `rows` per entry of `indices`.
struct SparseGrad {
  std::vector<int64_t> indices;
  DenseTensor rows;  // [NS][E]
};

enum class UpdateStrategy { kAtomicExchange, kLockedRowSimd, kRaceFreePartitioned };

struct UpdateOptions {
  int lock_stripes = 1024;  // kLockedRowSimd only
};

// Y[n] = sum of table rows selected by bag n; empty bags give zero rows.
DenseTensor embedding_forward(const EmbeddingTable& table, const LookupBatch& batch,
                              WorkerPool* pool = nullptr);

// dW[s] = dY[n] for every lookup s in bag n.
SparseGrad embedding_backward(const DenseTensor& d_out, const LookupBatch& batch,
                              WorkerPool* pool = nullptr);

// W[indices[i]] += alpha * rows[i] for every lookup, applied with the chosen
// strategy across pool.size() workers. alpha carries the sign (pass -lr for
// descent). kRaceFreePartitioned is bit-identical to the sequential loop for any
// thread count; the other two match it bit-exactly when indices are distinct.
void embedding_update(EmbeddingTable& table, const SparseGrad& grad, float alpha,
                      UpdateStrategy strategy, WorkerPool& pool, const UpdateOptions& opts = {});

}  // namespace dlrmkit
