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
#include "dlrmkit/embedding.hpp"

#include <atomic>
#include <mutex>
#include <stdexcept>
#include <string>

namespace dlrmkit {

void LookupBatch::validate(int64_t table_rows) const {
  if (static_cast<int64_t>(offsets.size()) != bags + 1) {
    throw std::invalid_argument("LookupBatch: offsets must have bags+1 entries");
  }
  if (offsets[0] != 0) throw std::invalid_argument("LookupBatch: offsets[0] must be 0");
  for (int64_t n = 0; n < bags; ++n) {
    if (offsets[static_cast<size_t>(n)] > offsets[static_cast<size_t>(n + 1)]) {
      throw std::invalid_argument("LookupBatch: offsets must be nondecreasing at bag " +
                                  std::to_string(n));
    }
  }
  if (offsets[static_cast<size_t>(bags)] != lookups()) {
    throw std::invalid_argument("LookupBatch: offsets[bags] must equal the index count");
  }
  for (size_t s = 0; s < indices.size(); ++s) {
    const int64_t ind = indices[s];
    if (ind < 0 || ind >= table_rows) {
      throw std::invalid_argument("embedding index out of range at position " + std::to_string(s) +
                                  ": " + std::to_string(ind) + " not in [0, " +
                                  std::to_string(table_rows) + ")");
    }
  }
}

DenseTensor embedding_forward(const EmbeddingTable& table, const LookupBatch& batch,
                              WorkerPool* pool) {
  batch.validate(table.rows());
  const int64_t e = table.dim();
  DenseTensor out({batch.bags, e});

  auto run_bags = [&](int64_t n_begin, int64_t n_end) {
    for (int64_t n = n_begin; n < n_end; ++n) {
      float* y = out.row(n).data();
      const int64_t start = batch.offsets[static_cast<size_t>(n)];
      const int64_t end = batch.offsets[static_cast<size_t>(n + 1)];
      for (int64_t s = start; s < end; ++s) {
        const float* w = table.weights.row(batch.indices[static_cast<size_t>(s)]).data();
        for (int64_t i = 0; i < e; ++i) y[i] += w[i];
      }
    }
  };

  if (pool != nullptr && pool->size() > 1) {
    pool->run([&](int tid) {
      auto [b, t] = partition_rows(batch.bags, pool->size(), tid);
      run_bags(b, t);
    });
  } else {
    run_bags(0, batch.bags);
  }
  return out;
}

SparseGrad embedding_backward(const DenseTensor& d_out, const LookupBatch& batch,
                              WorkerPool* pool) {
  if (d_out.rank() != 2 || d_out.dim(0) != batch.bags) {
    throw std::invalid_argument("embedding_backward: gradient shape does not match batch");
  }
  const int64_t e = d_out.dim(1);
  SparseGrad grad;
  grad.indices = batch.indices;
  grad.rows = DenseTensor({batch.lookups(), e});

  auto run_bags = [&](int64_t n_begin, int64_t n_end) {
    for (int64_t n = n_begin; n < n_end; ++n) {
      const float* dy = d_out.row(n).data();
      const int64_t start = batch.offsets[static_cast<size_t>(n)];
      const int64_t end = batch.offsets[static_cast<size_t>(n + 1)];
      for (int64_t s = start; s < end; ++s) {
        float* dw = grad.rows.row(s).data();
        for (int64_t i = 0; i < e; ++i) dw[i] = dy[i];
      }
    }
  };

  if (pool != nullptr && pool->size() > 1) {
    pool->run([&](int tid) {
      auto [b, t] = partition_rows(batch.bags, pool->size(), tid);
      run_bags(b, t);
    });
  } else {
    run_bags(0, batch.bags);
  }
  return grad;
}

namespace {

inline void atomic_add_f32(float* p, float v) {
  std::atomic_ref<float> ref(*p);
  float old = ref.load(std::memory_order_relaxed);
  while (!ref.compare_exchange_weak(old, old + v, std::memory_order_relaxed)) {
  }
}

void check_grad(const EmbeddingTable& table, const SparseGrad& grad) {
  if (grad.rows.rank() != 2 || grad.rows.dim(0) != static_cast<int64_t>(grad.indices.size()) ||
      grad.rows.dim(1) != table.dim()) {
    throw std::invalid_argument("embedding_update: gradient shape does not match table");
  }
  for (size_t i = 0; i < grad.indices.size(); ++i) {
    if (grad.indices[i] < 0 || grad.indices[i] >= table.rows()) {
      throw std::invalid_argument("embedding_update: index out of range at position " +
                                  std::to_string(i));
    }
  }
}

}  // namespace

void embedding_update(EmbeddingTable& table, const SparseGrad& grad, float alpha,
                      UpdateStrategy strategy, WorkerPool& pool, const UpdateOptions& opts) {
  check_grad(table, grad);
  const int64_t ns = static_cast<int64_t>(grad.indices.size());
  const int64_t e = table.dim();
  const int nthreads = pool.size();

  switch (strategy) {
    case UpdateStrategy::kRaceFreePartitioned: {
      // Every worker scans the full index list and applies only rows in its own
      // partition, so per-row application order stays the sequential one.
      pool.run([&](int tid) {
        auto [m_start, m_end] = partition_rows(table.rows(), nthreads, tid);
        for (int64_t i = 0; i < ns; ++i) {
          const int64_t ind = grad.indices[static_cast<size_t>(i)];
          if (ind >= m_start && ind < m_end) {
            float* w = table.weights.row(ind).data();
            const float* g = grad.rows.row(i).data();
            for (int64_t j = 0; j < e; ++j) w[j] += alpha * g[j];
          }
        }
      });
      break;
    }
    case UpdateStrategy::kAtomicExchange: {
      pool.run([&](int tid) {
        auto [begin, end] = partition_rows(ns, nthreads, tid);
        for (int64_t i = begin; i < end; ++i) {
          float* w = table.weights.row(grad.indices[static_cast<size_t>(i)]).data();
          const float* g = grad.rows.row(i).data();
          for (int64_t j = 0; j < e; ++j) atomic_add_f32(&w[j], alpha * g[j]);
        }
      });
      break;
    }
    case UpdateStrategy::kLockedRowSimd: {
      const int stripes = opts.lock_stripes > 0 ? opts.lock_stripes : 1;
      std::vector<std::mutex> locks(static_cast<size_t>(stripes));
      pool.run([&](int tid) {
        auto [begin, end] = partition_rows(ns, nthreads, tid);
        for (int64_t i = begin; i < end; ++i) {
          const int64_t ind = grad.indices[static_cast<size_t>(i)];
          float* w = table.weights.row(ind).data();
          const float* g = grad.rows.row(i).data();
          std::lock_guard<std::mutex> lk(locks[static_cast<size_t>(ind % stripes)]);
          for (int64_t j = 0; j < e; ++j) w[j] += alpha * g[j];
        }
      });
      break;
    }
  }
}

}  // namespace dlrmkit
