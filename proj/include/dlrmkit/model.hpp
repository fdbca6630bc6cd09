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

#include <memory>
#include <optional>

#include "dlrmkit/comms.hpp"
#include "dlrmkit/dlrm_config.hpp"
#include "dlrmkit/embedding.hpp"
#include "dlrmkit/mlp.hpp"
#include "dlrmkit/optim.hpp"

namespace dlrmkit {

// One global minibatch: dense features, one lookup batch per table (all over the
// same sample count), binary labels.
struct MiniBatch {
  DenseTensor dense;                        // [N][d]
  std::vector<LookupBatch> table_batches;   // num_tables entries
  std::vector<float> labels;                // [N], values in {0, 1}
  int64_t samples() const { return dense.rank() > 0 ? dense.dim(0) : 0; }
};

// What one rank consumes per step: its sample slice of dense/labels plus the
// full-global-minibatch lookup batches of the tables it owns.
struct RankSlice {
  DenseTensor dense;                       // [N/world][d]
  std::vector<float> labels;               // [N/world]
  std::vector<LookupBatch> owned_batches;  // ascending owned-table order, each over N
  int64_t n_global = 0;
};

// Round-robin table placement; every table owned by exactly one rank.
std::vector<int> table_owners(int64_t tables, int world);
RankSlice slice_for_rank(const MiniBatch& batch, int rank, int world);

// Per sample: stack z_0 = bottom row, z_i = table i-1 output row, emit the dense
// row followed by the strictly-lower-triangle entries of Z Z^T in row-major
// (i, j<i) order. With concat_variant the rows are simply concatenated instead.
DenseTensor interaction(const DenseTensor& bottom_out, std::span<const DenseTensor> emb_out,
                        bool concat_variant = false);
void interaction_backward(const DenseTensor& d_out, const DenseTensor& bottom_out,
                          std::span<const DenseTensor> emb_out, DenseTensor& d_bottom,
                          std::vector<DenseTensor>& d_emb, bool concat_variant = false);

// Mean binary cross-entropy with predictions clamped to [eps, 1-eps], eps = 1e-7.
// `denom` defaults to the local sample count; distributed callers pass the global
// minibatch so partial losses/gradients sum to the global mean.
struct BceResult {
  double loss = 0.0;
  DenseTensor d_pred;  // [n]
};
BceResult bce_loss(std::span<const float> pred, std::span<const float> labels, int64_t denom = -1);

struct DlrmModelOptions {
  MlpTuning mlp;
  bool concat_interaction = false;
  float init_scale = 1.0f;
};

struct StepTimings {
  double emb_fwd = 0, bottom_fwd = 0, interaction_fwd = 0, top_fwd = 0, loss = 0;
  double top_bwd = 0, interaction_bwd = 0, bottom_bwd = 0, emb_bwd = 0, emb_update = 0;
  double sgd_dense = 0;
  CollTimings a2a_fwd, a2a_bwd, allreduce;
  double total = 0;
  double component_sum() const {
    return emb_fwd + bottom_fwd + interaction_fwd + top_fwd + loss + top_bwd + interaction_bwd +
           bottom_bwd + emb_bwd + emb_update + sgd_dense + a2a_fwd.pre_ms + a2a_fwd.wait_ms +
           a2a_fwd.post_ms + a2a_bwd.pre_ms + a2a_bwd.wait_ms + a2a_bwd.post_ms +
           allreduce.pre_ms + allreduce.wait_ms + allreduce.post_ms;
  }
};

struct TrainOptions {
  CommVariant variant = CommVariant::kAlltoall;
  bool blocking = false;
  UpdateStrategy strategy = UpdateStrategy::kRaceFreePartitioned;
};

// One DLRM replica: MLPs are full copies on every rank (data parallel), tables
// exist only on their owner (model parallel, one-table granularity).
class DlrmModel {
 public:
  DlrmModel(const DlrmConfig& cfg, uint64_t seed, int rank, int world,
            const DlrmModelOptions& opts = {});

  const DlrmConfig& config() const { return cfg_; }
  Mlp& bottom() { return bottom_; }
  Mlp& top() { return top_; }
  std::vector<EmbeddingTable>& tables() { return tables_; }
  const std::vector<int>& owners() const { return owners_; }
  const std::vector<int>& owned_table_ids() const { return owned_ids_; }
  bool concat_interaction() const { return opts_.concat_interaction; }

  int64_t dense_param_count() const { return bottom_.param_count() + top_.param_count(); }

  // Registers MLP parameters and owned tables with the optimizer in the same
  // order train steps pack gradients, then finalizes it.
  void register_with(SgdOptimizer& opt);

 private:
  friend double train_step_distributed(RankContext&, DlrmModel&, const RankSlice&, SgdOptimizer&,
                                       const TrainOptions&, WorkerPool&, StepTimings*);
  friend double train_step_local(DlrmModel&, const MiniBatch&, SgdOptimizer&, const TrainOptions&,
                                 WorkerPool&, StepTimings*);
  DlrmConfig cfg_;
  DlrmModelOptions opts_;
  Mlp bottom_, top_;
  std::vector<EmbeddingTable> tables_;  // owned tables only, ascending id
  std::vector<int> owners_;
  std::vector<int> owned_ids_;
  // optimizer slot bookkeeping
  struct MlpSlots {
    std::vector<int> weight_slots;
    std::vector<int> bias_slots;
  };
  MlpSlots bottom_slots_, top_slots_;
  std::vector<int> sparse_slots_;
  bool registered_ = false;
  std::unique_ptr<InProcessWorld> local_world_;  // lazily built by train_step_local
};

// Full fwd/bwd/update on one rank's slice. Embedding outputs travel through the
// chosen comm variant; MLP weight-gradient allreduces are issued nonblocking
// during the backward pass (unless opts.blocking) and awaited before the dense
// optimizer step. Returns the global mean loss.
double train_step_distributed(RankContext& ctx, DlrmModel& model, const RankSlice& slice,
                              SgdOptimizer& opt, const TrainOptions& opts, WorkerPool& pool,
                              StepTimings* timings = nullptr);

// Single-rank path over the whole minibatch; numerically identical to a world of
// one. The model must have been built with world == 1.
double train_step_local(DlrmModel& model, const MiniBatch& batch, SgdOptimizer& opt,
                        const TrainOptions& opts, WorkerPool& pool, StepTimings* timings = nullptr);

}  // namespace dlrmkit
