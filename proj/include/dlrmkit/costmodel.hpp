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

#include "dlrmkit/dlrm_config.hpp"

namespace dlrmkit {

// Closed-form communication sizing, evaluated analytically from the model shape.
// All functions are pure; byte figures assume FP32 payloads.

// Elements each rank allreduces per iteration: sum over every bottom+top layer of
// f_in*f_out + f_out (bias included). Independent of ranks and minibatch.
int64_t allreduce_size_elems(std::span<const LayerDims> layers);
int64_t allreduce_size_elems(const DlrmConfig& cfg);

// Total bytes redistributed for the interaction per iteration, across all ranks:
// tables * global_minibatch * emb_dim * 4.
int64_t alltoall_volume_bytes(const DlrmConfig& cfg, int64_t global_minibatch);

// Strong scaling: the volume is fixed and splits over ranks^2 point-to-point
// messages, so each doubling of ranks quarters the message size.
int64_t strong_scaling_msg_bytes(const DlrmConfig& cfg, int ranks);

// Weak scaling: per-rank minibatch fixed, volume grows linearly with ranks.
int64_t weak_scaling_volume_bytes(const DlrmConfig& cfg, int ranks);

// Wire bytes a ring allreduce moves per rank: 2*(ranks-1)/ranks * elems * 4.
int64_t allreduce_ring_wire_bytes_per_rank(int64_t elems, int ranks);

enum class ScalingMode { kStrong, kWeak };

struct CommPlan {
  int64_t allreduce_elems = 0;        // per rank
  int64_t allreduce_bytes = 0;        // buffer bytes per rank
  int64_t alltoall_total_bytes = 0;   // per iteration across ranks, one direction
  int64_t alltoall_msg_bytes = 0;     // per point-to-point message
  ScalingMode mode = ScalingMode::kStrong;
};

CommPlan comm_plan(const DlrmConfig& cfg, int ranks, ScalingMode mode);

// Per-rank traffic comparison used to predict whether a configuration is
// alltoall- or allreduce-bound at a given rank count (strong scaling).
struct RegimePoint {
  int64_t alltoall_per_rank_bytes = 0;
  int64_t allreduce_per_rank_bytes = 0;
  bool alltoall_bound() const { return alltoall_per_rank_bytes > allreduce_per_rank_bytes; }
};

RegimePoint regime(const DlrmConfig& cfg, int ranks);

}  // namespace dlrmkit
