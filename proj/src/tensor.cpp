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
#include "dlrmkit/tensor.hpp"

#include <stdexcept>
#include <string>

namespace dlrmkit {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor extent must be >= 0");
    n *= d;
  }
  return n;
}

}  // namespace

DenseTensor::DenseTensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

DenseTensor DenseTensor::from(std::vector<int64_t> shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor value count does not match shape");
  }
  DenseTensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

BlockedTensor4 to_blocked(const DenseTensor& t, BlockedRole role, int64_t block_rows,
                          int64_t block_cols) {
  if (t.rank() != 2) throw std::invalid_argument("to_blocked expects a 2-D tensor");
  const int64_t rows = t.dim(0);
  const int64_t cols = t.dim(1);
  if (block_rows < 1 || block_cols < 1 || rows % block_rows != 0 || cols % block_cols != 0) {
    throw std::invalid_argument("blocking factors (" + std::to_string(block_rows) + "," +
                                std::to_string(block_cols) + ") do not divide tensor extents (" +
                                std::to_string(rows) + "," + std::to_string(cols) + ")");
  }
  BlockedTensor4 b;
  b.role = role;
  b.data.assign(static_cast<size_t>(t.numel()), 0.0f);
  if (role == BlockedRole::kWeight) {
    // W[K][C] -> [K_b][C_b][b_c][b_k]
    const int64_t bk = block_rows, bc = block_cols;
    b.outer1 = rows / bk;
    b.outer2 = cols / bc;
    b.inner1 = bc;
    b.inner2 = bk;
    for (int64_t k = 0; k < rows; ++k) {
      for (int64_t c = 0; c < cols; ++c) {
        float* blk = b.block(k / bk, c / bc);
        blk[(c % bc) * bk + (k % bk)] = t.at(k, c);
      }
    }
  } else {
    // X[N][C] -> [C_b][N_b][b_n][b_c]
    const int64_t bn = block_rows, bc = block_cols;
    b.outer1 = cols / bc;
    b.outer2 = rows / bn;
    b.inner1 = bn;
    b.inner2 = bc;
    for (int64_t n = 0; n < rows; ++n) {
      const float* src = t.row(n).data();
      for (int64_t c = 0; c < cols; ++c) {
        float* blk = b.block(c / bc, n / bn);
        blk[(n % bn) * bc + (c % bc)] = src[c];
      }
    }
  }
  return b;
}

DenseTensor from_blocked(const BlockedTensor4& t) {
  if (t.role == BlockedRole::kWeight) {
    const int64_t bk = t.inner2, bc = t.inner1;
    const int64_t rows = t.outer1 * bk, cols = t.outer2 * bc;
    DenseTensor out({rows, cols});
    for (int64_t k = 0; k < rows; ++k) {
      for (int64_t c = 0; c < cols; ++c) {
        const float* blk = t.block(k / bk, c / bc);
        out.at(k, c) = blk[(c % bc) * bk + (k % bk)];
      }
    }
    return out;
  }
  const int64_t bn = t.inner1, bc = t.inner2;
  const int64_t rows = t.outer2 * bn, cols = t.outer1 * bc;
  DenseTensor out({rows, cols});
  for (int64_t n = 0; n < rows; ++n) {
    float* dst = out.row(n).data();
    for (int64_t c = 0; c < cols; ++c) {
      const float* blk = t.block(c / bc, n / bn);
      dst[c] = blk[(n % bn) * bc + (c % bc)];
    }
  }
  return out;
}

int64_t pick_block(int64_t extent, int64_t preferred) {
  if (extent <= 0) throw std::invalid_argument("pick_block: extent must be positive");
  int64_t b = preferred < extent ? preferred : extent;
  while (b > 1 && extent % b != 0) --b;
  return b < 1 ? 1 : b;
}

void bf16_truncate_span(std::span<float> values) {
  for (float& v : values) v = bf16_truncate(v);
}

}  // namespace dlrmkit
