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

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

namespace dlrmkit {

// Dense FP32 tensor, row-major, owning its storage. No views, no broadcasting.
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(std::vector<int64_t> shape);
  static DenseTensor from(std::vector<int64_t> shape, std::vector<float> values);

  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> flat() { return data_; }
  std::span<const float> flat() const { return data_; }

  // 2-D accessors; callers guarantee rank()==2.
  float& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  float at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  std::span<float> row(int64_t i) {
    return std::span<float>(data_.data() + i * dim(1), static_cast<size_t>(dim(1)));
  }
  std::span<const float> row(int64_t i) const {
    return std::span<const float>(data_.data() + i * dim(1), static_cast<size_t>(dim(1)));
  }

  bool same_shape(const DenseTensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

enum class BlockedRole { kWeight, kActivation };

// 4-D blocked re-tiling of a 2-D tensor:
//   weight     W[K][C] -> [K_b][C_b][b_c][b_k]   (element (k,c) at block (k/b_k, c/b_c), offset (c%b_c, k%b_k))
//   activation X[N][C] -> [C_b][N_b][b_n][b_c]   (element (n,c) at block (c/b_c, n/b_n), offset (n%b_n, c%b_c))
struct BlockedTensor4 {
  BlockedRole role = BlockedRole::kWeight;
  int64_t outer1 = 0;
  int64_t outer2 = 0;
  int64_t inner1 = 0;
  int64_t inner2 = 0;
  std::vector<float> data;

  int64_t numel() const { return outer1 * outer2 * inner1 * inner2; }
  int64_t block_elems() const { return inner1 * inner2; }
  float* block(int64_t o1, int64_t o2) { return data.data() + (o1 * outer2 + o2) * block_elems(); }
  const float* block(int64_t o1, int64_t o2) const {
    return data.data() + (o1 * outer2 + o2) * block_elems();
  }
};

// Relayout between dense 2-D and blocked 4-D. `block_rows` blocks the first dense
// extent, `block_cols` the second; both must divide their extent exactly.
// from_blocked(to_blocked(t)) is the identity, bit for bit.
BlockedTensor4 to_blocked(const DenseTensor& t, BlockedRole role, int64_t block_rows,
                          int64_t block_cols);
DenseTensor from_blocked(const BlockedTensor4& t);

// Largest divisor of extent that is <= min(extent, preferred). preferred >= 1.
int64_t pick_block(int64_t extent, int64_t preferred);

// BF16 bit helpers shared by the mixed-precision optimizer and its compute emulation.
inline float bf16_truncate(float v) {
  return std::bit_cast<float>(std::bit_cast<uint32_t>(v) & 0xFFFF0000u);
}
void bf16_truncate_span(std::span<float> values);

}  // namespace dlrmkit
