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
#include "dlrmkit/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dlrmkit/prng.hpp"

namespace dlrmkit {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void accum(CollTimings& into, const CollTimings& t) {
  into.pre_ms += t.pre_ms;
  into.wait_ms += t.wait_ms;
  into.post_ms += t.post_ms;
}

}  // namespace

std::vector<int> table_owners(int64_t tables, int world) {
  std::vector<int> owners(static_cast<size_t>(tables));
  for (int64_t t = 0; t < tables; ++t) owners[static_cast<size_t>(t)] = static_cast<int>(t % world);
  return owners;
}

RankSlice slice_for_rank(const MiniBatch& batch, int rank, int world) {
  const int64_t n = batch.samples();
  if (n % world != 0) {
    throw std::invalid_argument("minibatch does not divide evenly across ranks");
  }
  const int64_t nl = n / world;
  const int64_t d = batch.dense.dim(1);
  RankSlice slice;
  slice.n_global = n;
  slice.dense = DenseTensor({nl, d});
  std::memcpy(slice.dense.data(), batch.dense.data() + rank * nl * d,
              static_cast<size_t>(nl * d) * sizeof(float));
  slice.labels.assign(batch.labels.begin() + rank * nl, batch.labels.begin() + (rank + 1) * nl);
  for (size_t t = 0; t < batch.table_batches.size(); ++t) {
    if (static_cast<int>(t % static_cast<size_t>(world)) == rank) {
      slice.owned_batches.push_back(batch.table_batches[t]);
    }
  }
  return slice;
}

DenseTensor interaction(const DenseTensor& bottom_out, std::span<const DenseTensor> emb_out,
                        bool concat_variant) {
  const int64_t n = bottom_out.dim(0);
  const int64_t e = bottom_out.dim(1);
  const int64_t s = static_cast<int64_t>(emb_out.size());
  for (const auto& t : emb_out) {
    if (t.dim(0) != n || t.dim(1) != e) {
      throw std::invalid_argument("interaction: all inputs must be [n][E] with a common E");
    }
  }
  if (concat_variant) {
    DenseTensor out({n, e * (s + 1)});
    for (int64_t i = 0; i < n; ++i) {
      float* dst = out.row(i).data();
      std::memcpy(dst, bottom_out.row(i).data(), static_cast<size_t>(e) * sizeof(float));
      for (int64_t t = 0; t < s; ++t) {
        std::memcpy(dst + (t + 1) * e, emb_out[static_cast<size_t>(t)].row(i).data(),
                    static_cast<size_t>(e) * sizeof(float));
      }
    }
    return out;
  }
  const int64_t pairs = (s + 1) * s / 2;
  DenseTensor out({n, e + pairs});
  std::vector<const float*> z(static_cast<size_t>(s + 1));
  for (int64_t i = 0; i < n; ++i) {
    z[0] = bottom_out.row(i).data();
    for (int64_t t = 0; t < s; ++t) z[static_cast<size_t>(t + 1)] = emb_out[static_cast<size_t>(t)].row(i).data();
    float* dst = out.row(i).data();
    std::memcpy(dst, z[0], static_cast<size_t>(e) * sizeof(float));
    int64_t idx = e;
    for (int64_t a = 1; a <= s; ++a) {
      for (int64_t b = 0; b < a; ++b) {
        float dot = 0.0f;
        const float* za = z[static_cast<size_t>(a)];
        const float* zb = z[static_cast<size_t>(b)];
        for (int64_t k = 0; k < e; ++k) dot += za[k] * zb[k];
        dst[idx++] = dot;
      }
    }
  }
  return out;
}

void interaction_backward(const DenseTensor& d_out, const DenseTensor& bottom_out,
                          std::span<const DenseTensor> emb_out, DenseTensor& d_bottom,
                          std::vector<DenseTensor>& d_emb, bool concat_variant) {
  const int64_t n = bottom_out.dim(0);
  const int64_t e = bottom_out.dim(1);
  const int64_t s = static_cast<int64_t>(emb_out.size());
  const int64_t expect =
      concat_variant ? e * (s + 1) : e + (s + 1) * s / 2;
  if (d_out.dim(0) != n || d_out.dim(1) != expect) {
    throw std::invalid_argument("interaction_backward: upstream gradient shape mismatch");
  }
  d_bottom = DenseTensor({n, e});
  d_emb.assign(static_cast<size_t>(s), DenseTensor({n, e}));
  if (concat_variant) {
    for (int64_t i = 0; i < n; ++i) {
      const float* g = d_out.row(i).data();
      std::memcpy(d_bottom.row(i).data(), g, static_cast<size_t>(e) * sizeof(float));
      for (int64_t t = 0; t < s; ++t) {
        std::memcpy(d_emb[static_cast<size_t>(t)].row(i).data(), g + (t + 1) * e,
                    static_cast<size_t>(e) * sizeof(float));
      }
    }
    return;
  }
  std::vector<const float*> z(static_cast<size_t>(s + 1));
  std::vector<float*> dz(static_cast<size_t>(s + 1));
  for (int64_t i = 0; i < n; ++i) {
    z[0] = bottom_out.row(i).data();
    dz[0] = d_bottom.row(i).data();
    for (int64_t t = 0; t < s; ++t) {
      z[static_cast<size_t>(t + 1)] = emb_out[static_cast<size_t>(t)].row(i).data();
      dz[static_cast<size_t>(t + 1)] = d_emb[static_cast<size_t>(t)].row(i).data();
    }
    const float* g = d_out.row(i).data();
    for (int64_t k = 0; k < e; ++k) dz[0][k] = g[k];
    int64_t idx = e;
    for (int64_t a = 1; a <= s; ++a) {
      for (int64_t b = 0; b < a; ++b) {
        const float gv = g[idx++];
        float* da = dz[static_cast<size_t>(a)];
        float* db = dz[static_cast<size_t>(b)];
        const float* za = z[static_cast<size_t>(a)];
        const float* zb = z[static_cast<size_t>(b)];
        for (int64_t k = 0; k < e; ++k) {
          da[k] += gv * zb[k];
          db[k] += gv * za[k];
        }
      }
    }
  }
}

BceResult bce_loss(std::span<const float> pred, std::span<const float> labels, int64_t denom) {
  if (pred.size() != labels.size()) {
    throw std::invalid_argument("bce_loss: prediction/label count mismatch");
  }
  const int64_t n = static_cast<int64_t>(pred.size());
  if (denom < 0) denom = n;
  constexpr float kEps = 1e-7f;
  const float inv = 1.0f / static_cast<float>(denom);
  BceResult res;
  res.d_pred = DenseTensor({n});
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float p = std::min(std::max(pred[static_cast<size_t>(i)], kEps), 1.0f - kEps);
    const float y = labels[static_cast<size_t>(i)];
    acc -= static_cast<double>(y) * std::log(static_cast<double>(p)) +
           (1.0 - static_cast<double>(y)) * std::log(1.0 - static_cast<double>(p));
    res.d_pred.data()[i] = (p - y) / (p * (1.0f - p)) * inv;
  }
  res.loss = acc / static_cast<double>(denom);
  return res;
}

DlrmModel::DlrmModel(const DlrmConfig& cfg, uint64_t seed, int rank, int world,
                     const DlrmModelOptions& opts)
    : cfg_(cfg), opts_(opts) {
  cfg_.validate();
  if (world < 1 || rank < 0 || rank >= world) throw std::invalid_argument("DlrmModel: bad rank");
  if (world > cfg_.num_tables) {
    throw std::invalid_argument(
        "DlrmModel: world size exceeds table count; the model-parallel embedding split supports "
        "at most one rank per table");
  }
  std::mt19937_64 bot_rng(mix_seed(seed, 0xB077));
  bottom_ = Mlp(cfg_.bottom_mlp_input, cfg_.bottom_mlp, Activation::kRelu, Activation::kRelu,
                opts.mlp, bot_rng);
  const int64_t top_in =
      opts_.concat_interaction ? cfg_.embedding_dim * (cfg_.num_tables + 1)
                               : interaction_output_width(cfg_.num_tables, cfg_.embedding_dim);
  std::mt19937_64 top_rng(mix_seed(seed, 0x70B));
  top_ = Mlp(top_in, cfg_.top_mlp, Activation::kRelu, Activation::kSigmoid, opts.mlp, top_rng);

  owners_ = table_owners(cfg_.num_tables, world);
  const float bound = opts.init_scale / std::sqrt(static_cast<float>(cfg_.embedding_dim));
  for (int64_t t = 0; t < cfg_.num_tables; ++t) {
    if (owners_[static_cast<size_t>(t)] != rank) continue;
    owned_ids_.push_back(static_cast<int>(t));
    EmbeddingTable table(cfg_.rows_per_table, cfg_.embedding_dim);
    std::mt19937_64 rng(mix_seed(seed, 0x7AB1E5, static_cast<uint64_t>(t)));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : table.weights.flat()) v = dist(rng);
    tables_.push_back(std::move(table));
  }
}

void DlrmModel::register_with(SgdOptimizer& opt) {
  if (registered_) throw std::logic_error("DlrmModel: already registered with an optimizer");
  auto register_mlp = [&](Mlp& mlp, MlpSlots& slots) {
    for (auto& layer : mlp.layers()) {
      slots.weight_slots.push_back(opt.register_dense(layer.weight.data));
      slots.bias_slots.push_back(opt.register_dense(layer.bias.flat()));
    }
  };
  register_mlp(top_, top_slots_);
  register_mlp(bottom_, bottom_slots_);
  for (size_t i = 0; i < tables_.size(); ++i) {
    sparse_slots_.push_back(opt.register_sparse(&tables_[i]));
  }
  opt.finalize();
  registered_ = true;
}

namespace {

// Flatten layer gradients (dW then db per layer) for one allreduce buffer.
std::vector<float> pack_grads(const Mlp::Grads& grads) {
  size_t total = 0;
  for (const auto& g : grads.layers) {
    total += g.weight.data.size() + static_cast<size_t>(g.bias.numel());
  }
  std::vector<float> flat;
  flat.reserve(total);
  for (const auto& g : grads.layers) {
    flat.insert(flat.end(), g.weight.data.begin(), g.weight.data.end());
    flat.insert(flat.end(), g.bias.flat().begin(), g.bias.flat().end());
  }
  return flat;
}

}  // namespace

double train_step_distributed(RankContext& ctx, DlrmModel& model, const RankSlice& slice,
                              SgdOptimizer& opt, const TrainOptions& opts, WorkerPool& pool,
                              StepTimings* timings) {
  const auto t_total = Clock::now();
  StepTimings scratch;
  StepTimings& T = timings != nullptr ? *timings : scratch;
  T = StepTimings{};

  const int world = ctx.world_size();
  const int64_t n_global = slice.n_global;
  const int64_t n_local = slice.dense.dim(0);
  const int64_t e = model.cfg_.embedding_dim;
  if (n_local * world != n_global) {
    throw std::invalid_argument("train step: rank slice does not match the declared world size");
  }
  if (slice.owned_batches.size() != model.tables_.size()) {
    throw std::invalid_argument("train step: batch shard does not match this rank's tables");
  }
  for (const auto& b : slice.owned_batches) {
    if (b.bags != n_global) {
      throw std::invalid_argument("train step: owned tables must see the full global minibatch");
    }
  }
  if (static_cast<int64_t>(slice.labels.size()) != n_local) {
    throw std::invalid_argument("train step: label slice size mismatch");
  }

  // Embedding forward for owned tables, over the full global minibatch.
  auto t0 = Clock::now();
  std::vector<std::vector<float>> emb_out(model.tables_.size());
  for (size_t i = 0; i < model.tables_.size(); ++i) {
    DenseTensor y = embedding_forward(model.tables_[i], slice.owned_batches[i], &pool);
    emb_out[i].assign(y.flat().begin(), y.flat().end());
  }
  T.emb_fwd = ms_since(t0);

  // Table-major -> sample-major exchange, overlapped with the bottom MLP.
  PendingRedistribute pending_fwd = redistribute_forward_async(
      ctx, opts.variant, model.owners_, emb_out, n_global, e, opts.blocking, "emb_fwd");

  t0 = Clock::now();
  std::vector<FcCache> bottom_caches;
  DenseTensor bottom_out = model.bottom_.forward(slice.dense, pool, &bottom_caches);
  T.bottom_fwd = ms_since(t0);

  RedistributeResult redist = pending_fwd.finish();
  accum(T.a2a_fwd, redist.timings);
  std::vector<DenseTensor> emb_slices;
  emb_slices.reserve(redist.tensors.size());
  for (auto& v : redist.tensors) {
    emb_slices.push_back(DenseTensor::from({n_local, e}, std::move(v)));
  }

  t0 = Clock::now();
  DenseTensor inter = interaction(bottom_out, emb_slices, model.opts_.concat_interaction);
  T.interaction_fwd = ms_since(t0);

  t0 = Clock::now();
  std::vector<FcCache> top_caches;
  DenseTensor pred = model.top_.forward(inter, pool, &top_caches);
  T.top_fwd = ms_since(t0);

  t0 = Clock::now();
  BceResult bce =
      bce_loss(std::span<const float>(pred.data(), static_cast<size_t>(n_local)), slice.labels,
               n_global);
  float loss_buf[1] = {static_cast<float>(bce.loss)};
  CollectiveHandle h_loss = ctx.allreduce(std::span<float>(loss_buf, 1), false, false, "loss");
  ctx.wait(h_loss);
  T.loss = ms_since(t0);

  // Top MLP backward; its gradient allreduce overlaps everything that follows.
  t0 = Clock::now();
  DenseTensor d_pred = DenseTensor::from(
      {n_local, 1}, std::vector<float>(bce.d_pred.flat().begin(), bce.d_pred.flat().end()));
  Mlp::Grads top_grads = model.top_.backward(top_caches, d_pred, pool);
  T.top_bwd = ms_since(t0);

  auto t_pack = Clock::now();
  std::vector<float> top_flat = pack_grads(top_grads);
  CollectiveHandle h_top =
      ctx.allreduce(top_flat, false, false, "mlp_grads_top", ms_since(t_pack));
  bool top_waited = false;
  if (opts.blocking) {
    accum(T.allreduce, ctx.wait(h_top));
    top_waited = true;
  }

  t0 = Clock::now();
  DenseTensor d_bottom_out;
  std::vector<DenseTensor> d_emb;
  interaction_backward(top_grads.input, bottom_out, emb_slices, d_bottom_out, d_emb,
                       model.opts_.concat_interaction);
  T.interaction_bwd = ms_since(t0);

  std::vector<std::vector<float>> d_emb_flat(d_emb.size());
  for (size_t i = 0; i < d_emb.size(); ++i) {
    d_emb_flat[i].assign(d_emb[i].flat().begin(), d_emb[i].flat().end());
  }
  PendingRedistribute pending_bwd = redistribute_backward_async(
      ctx, opts.variant, model.owners_, d_emb_flat, n_global, e, opts.blocking, "emb_bwd");

  t0 = Clock::now();
  Mlp::Grads bottom_grads = model.bottom_.backward(bottom_caches, d_bottom_out, pool);
  T.bottom_bwd = ms_since(t0);

  t_pack = Clock::now();
  std::vector<float> bottom_flat = pack_grads(bottom_grads);
  CollectiveHandle h_bottom =
      ctx.allreduce(bottom_flat, false, false, "mlp_grads_bottom", ms_since(t_pack));
  bool bottom_waited = false;
  if (opts.blocking) {
    accum(T.allreduce, ctx.wait(h_bottom));
    bottom_waited = true;
  }

  RedistributeResult redist_bwd = pending_bwd.finish();
  accum(T.a2a_bwd, redist_bwd.timings);

  // Sparse path: backward expansion and table update, owner-local.
  double emb_bwd_ms = 0.0, emb_upd_ms = 0.0;
  for (size_t i = 0; i < model.tables_.size(); ++i) {
    t0 = Clock::now();
    DenseTensor dy = DenseTensor::from({n_global, e}, std::move(redist_bwd.tensors[i]));
    SparseGrad sg = embedding_backward(dy, slice.owned_batches[i], &pool);
    emb_bwd_ms += ms_since(t0);
    t0 = Clock::now();
    opt.step_sparse(model.sparse_slots_[i], sg, opts.strategy, pool);
    emb_upd_ms += ms_since(t0);
  }
  T.emb_bwd = emb_bwd_ms;
  T.emb_update = emb_upd_ms;

  if (!top_waited) accum(T.allreduce, ctx.wait(h_top));
  if (!bottom_waited) accum(T.allreduce, ctx.wait(h_bottom));

  // Dense SGD from the allreduced (summed) gradients.
  t0 = Clock::now();
  auto apply = [&](Mlp& mlp, const DlrmModel::MlpSlots& slots, const std::vector<float>& flat) {
    size_t off = 0;
    for (size_t i = 0; i < mlp.layers().size(); ++i) {
      const size_t wn = mlp.layers()[i].weight.data.size();
      opt.step_dense(slots.weight_slots[i], std::span<const float>(flat.data() + off, wn));
      off += wn;
      const size_t bn = static_cast<size_t>(mlp.layers()[i].bias.numel());
      opt.step_dense(slots.bias_slots[i], std::span<const float>(flat.data() + off, bn));
      off += bn;
    }
  };
  apply(model.top_, model.top_slots_, top_flat);
  apply(model.bottom_, model.bottom_slots_, bottom_flat);
  T.sgd_dense = ms_since(t0);

  T.total = ms_since(t_total);
  return static_cast<double>(loss_buf[0]);
}

double train_step_local(DlrmModel& model, const MiniBatch& batch, SgdOptimizer& opt,
                        const TrainOptions& opts, WorkerPool& pool, StepTimings* timings) {
  if (model.tables().size() != static_cast<size_t>(model.config().num_tables)) {
    throw std::invalid_argument("train_step_local: model must own all tables (world of one)");
  }
  if (!model.local_world_) model.local_world_ = std::make_unique<InProcessWorld>(1, 1);
  const RankSlice slice = slice_for_rank(batch, 0, 1);
  return train_step_distributed(model.local_world_->ctx(0), model, slice, opt, opts, pool,
                                timings);
}

}  // namespace dlrmkit
