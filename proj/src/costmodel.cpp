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
#include "dlrmkit/costmodel.hpp"

#include <stdexcept>

namespace dlrmkit {

int64_t allreduce_size_elems(std::span<const LayerDims> layers) {
  int64_t elems = 0;
  for (const auto& l : layers) elems += l.in * l.out + l.out;
  return elems;
}

int64_t allreduce_size_elems(const DlrmConfig& cfg) {
  const auto layers = dlrm_layer_dims(cfg);
  return allreduce_size_elems(layers);
}

int64_t alltoall_volume_bytes(const DlrmConfig& cfg, int64_t global_minibatch) {
  return cfg.num_tables * global_minibatch * cfg.embedding_dim * 4;
}

int64_t strong_scaling_msg_bytes(const DlrmConfig& cfg, int ranks) {
  if (ranks < 1) throw std::invalid_argument("strong_scaling_msg_bytes: ranks must be >= 1");
  return alltoall_volume_bytes(cfg, cfg.global_minibatch) / (static_cast<int64_t>(ranks) * ranks);
}

int64_t weak_scaling_volume_bytes(const DlrmConfig& cfg, int ranks) {
  if (ranks < 1) throw std::invalid_argument("weak_scaling_volume_bytes: ranks must be >= 1");
  return alltoall_volume_bytes(cfg, cfg.local_minibatch * ranks);
}

int64_t allreduce_ring_wire_bytes_per_rank(int64_t elems, int ranks) {
  if (ranks < 1) throw std::invalid_argument("allreduce_ring_wire_bytes_per_rank: bad ranks");
  return 2 * (ranks - 1) * (elems * 4) / ranks;
}

CommPlan comm_plan(const DlrmConfig& cfg, int ranks, ScalingMode mode) {
  CommPlan plan;
  plan.mode = mode;
  plan.allreduce_elems = allreduce_size_elems(cfg);
  plan.allreduce_bytes = plan.allreduce_elems * 4;
  const int64_t n = mode == ScalingMode::kStrong ? cfg.global_minibatch
                                                 : cfg.local_minibatch * ranks;
  plan.alltoall_total_bytes = alltoall_volume_bytes(cfg, n);
  plan.alltoall_msg_bytes = plan.alltoall_total_bytes / (static_cast<int64_t>(ranks) * ranks);
  return plan;
}

RegimePoint regime(const DlrmConfig& cfg, int ranks) {
  RegimePoint p;
  p.alltoall_per_rank_bytes = alltoall_volume_bytes(cfg, cfg.global_minibatch) / ranks;
  p.allreduce_per_rank_bytes =
      allreduce_ring_wire_bytes_per_rank(allreduce_size_elems(cfg), ranks);
  return p;
}

}  // namespace dlrmkit
