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
#include "dlrmkit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>

namespace dlrmkit {

namespace {

constexpr uint64_t kDenseStream = 0x1000000ull;
constexpr uint64_t kTableStream = 0x2000000ull;

const ZipfSampler& shared_zipf(int64_t n, double s) {
  static std::mutex m;
  static std::map<std::pair<int64_t, int64_t>, std::unique_ptr<ZipfSampler>> cache;
  std::lock_guard<std::mutex> lk(m);
  const auto key = std::make_pair(n, static_cast<int64_t>(s * 1e6));
  auto& slot = cache[key];
  if (!slot) slot = std::make_unique<ZipfSampler>(n, s);
  return *slot;
}

}  // namespace

ZipfSampler::ZipfSampler(int64_t n, double s) {
  cdf_.resize(static_cast<size_t>(n));
  double acc = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), s);
    cdf_[static_cast<size_t>(r)] = acc;
  }
  for (double& v : cdf_) v /= acc;
}

int64_t ZipfSampler::pick(double u) const {
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<int64_t>(static_cast<int64_t>(it - cdf_.begin()),
                           static_cast<int64_t>(cdf_.size()) - 1);
}

LookupBatch generate_table_batch(const DlrmConfig& cfg, uint64_t seed, int64_t iter, int64_t table,
                                 int64_t first_sample, int64_t count,
                                 const SyntheticOptions& opts) {
  const ZipfSampler* zipf = opts.distribution == IndexDistribution::kClustered
                                ? &shared_zipf(cfg.rows_per_table, opts.zipf_exponent)
                                : nullptr;
  LookupBatch lb;
  lb.bags = count;
  lb.offsets.resize(static_cast<size_t>(count + 1));
  lb.offsets[0] = 0;
  std::uniform_int_distribution<int64_t> bag_size(1, std::max<int64_t>(1, 2 * cfg.avg_lookups - 1));
  std::uniform_int_distribution<int64_t> row(0, cfg.rows_per_table - 1);
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t cell = mix_seed(mix_seed(seed, static_cast<uint64_t>(iter)),
                                   kTableStream + static_cast<uint64_t>(table),
                                   static_cast<uint64_t>(first_sample + i));
    SplitMix64 rng(cell);
    const int64_t n_lookups = cfg.avg_lookups <= 1 ? 1 : bag_size(rng);
    lb.offsets[static_cast<size_t>(i + 1)] = lb.offsets[static_cast<size_t>(i)] + n_lookups;
    for (int64_t s = 0; s < n_lookups; ++s) {
      lb.indices.push_back(zipf != nullptr ? (*zipf)(rng) : row(rng));
    }
  }
  return lb;
}

DenseTensor generate_dense_rows(const DlrmConfig& cfg, uint64_t seed, int64_t iter,
                                int64_t first_sample, int64_t count) {
  DenseTensor out({count, cfg.bottom_mlp_input});
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (int64_t i = 0; i < count; ++i) {
    SplitMix64 rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(iter)),
                            kDenseStream, static_cast<uint64_t>(first_sample + i)));
    float* row = out.row(i).data();
    for (int64_t j = 0; j < cfg.bottom_mlp_input; ++j) row[j] = dist(rng);
  }
  return out;
}

MiniBatch generate_features(const DlrmConfig& cfg, uint64_t seed, int64_t iter, int64_t n,
                            const SyntheticOptions& opts) {
  MiniBatch batch;
  batch.dense = generate_dense_rows(cfg, seed, iter, 0, n);
  batch.labels.assign(static_cast<size_t>(n), 0.0f);
  batch.table_batches.reserve(static_cast<size_t>(cfg.num_tables));
  for (int64_t t = 0; t < cfg.num_tables; ++t) {
    batch.table_batches.push_back(generate_table_batch(cfg, seed, iter, t, 0, n, opts));
  }
  return batch;
}

TeacherLabeler::TeacherLabeler(const DlrmConfig& cfg, uint64_t seed) {
  DlrmConfig tiny = cfg;
  tiny.name = cfg.name + "-teacher";
  tiny.embedding_dim = 8;
  tiny.bottom_mlp = {16, 8};
  tiny.top_mlp = {16, 1};
  DlrmModelOptions opts;
  opts.init_scale = 2.0f;  // spread pre-sigmoid scores around the 0.5 threshold
  teacher_ = std::make_unique<DlrmModel>(tiny, mix_seed(seed, 0x7EAC4E4), 0, 1, opts);
}

TeacherLabeler::~TeacherLabeler() = default;
TeacherLabeler::TeacherLabeler(TeacherLabeler&&) noexcept = default;

void TeacherLabeler::label(MiniBatch& batch, WorkerPool& pool) {
  DlrmModel& m = *teacher_;
  std::vector<DenseTensor> emb_out;
  emb_out.reserve(m.tables().size());
  for (size_t t = 0; t < m.tables().size(); ++t) {
    emb_out.push_back(embedding_forward(m.tables()[t], batch.table_batches[t], &pool));
  }
  DenseTensor bottom = m.bottom().forward(batch.dense, pool);
  DenseTensor inter = interaction(bottom, emb_out);
  DenseTensor pred = m.top().forward(inter, pool);
  for (int64_t i = 0; i < batch.samples(); ++i) {
    batch.labels[static_cast<size_t>(i)] = pred.data()[i] > 0.5f ? 1.0f : 0.0f;
  }
}

RankSlice generate_rank_slice(const DlrmConfig& cfg, uint64_t seed, int64_t iter,
                              int64_t n_global, int rank, int world, const SyntheticOptions& opts,
                              TeacherLabeler& teacher, WorkerPool& pool) {
  if (n_global % world != 0) {
    throw std::invalid_argument("generate_rank_slice: minibatch must divide across ranks");
  }
  const int64_t n_local = n_global / world;
  const int64_t first = static_cast<int64_t>(rank) * n_local;

  // Local view (this rank's samples, every table) exists only to label.
  MiniBatch view;
  view.dense = generate_dense_rows(cfg, seed, iter, first, n_local);
  view.labels.assign(static_cast<size_t>(n_local), 0.0f);
  view.table_batches.reserve(static_cast<size_t>(cfg.num_tables));
  for (int64_t t = 0; t < cfg.num_tables; ++t) {
    view.table_batches.push_back(generate_table_batch(cfg, seed, iter, t, first, n_local, opts));
  }
  teacher.label(view, pool);

  RankSlice slice;
  slice.n_global = n_global;
  slice.dense = std::move(view.dense);
  slice.labels = std::move(view.labels);
  for (int64_t t = 0; t < cfg.num_tables; ++t) {
    if (t % world == rank) {
      slice.owned_batches.push_back(generate_table_batch(cfg, seed, iter, t, 0, n_global, opts));
    }
  }
  return slice;
}

}  // namespace dlrmkit
