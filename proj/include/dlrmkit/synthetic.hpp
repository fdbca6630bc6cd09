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

#include "dlrmkit/model.hpp"
#include "dlrmkit/prng.hpp"

namespace dlrmkit {

enum class IndexDistribution { kUniform, kClustered };

struct SyntheticOptions {
  IndexDistribution distribution = IndexDistribution::kUniform;
  double zipf_exponent = 1.05;  // kClustered skew
};

// Zipf-like sampler over [0, n): row r drawn with probability ~ 1/(r+1)^s.
// Low row ids concentrate the mass, which is what drives update contention.
class ZipfSampler {
 public:
  ZipfSampler(int64_t n, double s);

  template <typename Rng>
  int64_t operator()(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return pick(u(rng));
  }

 private:
  int64_t pick(double u) const;
  std::vector<double> cdf_;
};

// Every (iteration, table, sample) cell and every dense row owns an addressable
// random stream derived from the seed, so a rank can materialize exactly the
// slice it consumes and still agree bit-for-bit with any other world size.
LookupBatch generate_table_batch(const DlrmConfig& cfg, uint64_t seed, int64_t iter, int64_t table,
                                 int64_t first_sample, int64_t count,
                                 const SyntheticOptions& opts = {});
DenseTensor generate_dense_rows(const DlrmConfig& cfg, uint64_t seed, int64_t iter,
                                int64_t first_sample, int64_t count);

// Full global minibatch (labels left at zero until a TeacherLabeler fills them).
MiniBatch generate_features(const DlrmConfig& cfg, uint64_t seed, int64_t iter, int64_t n,
                            const SyntheticOptions& opts = {});

// Labels come from a small hidden DLRM built deterministically from the seed and
// thresholded at 0.5, so the synthetic task is learnable by construction. Labels
// are a per-sample function of the features: slicing commutes with labeling.
class TeacherLabeler {
 public:
  TeacherLabeler(const DlrmConfig& cfg, uint64_t seed);
  ~TeacherLabeler();
  TeacherLabeler(TeacherLabeler&&) noexcept;
  void label(MiniBatch& batch, WorkerPool& pool);

 private:
  std::unique_ptr<DlrmModel> teacher_;
};

// What one rank feeds train_step_distributed for iteration `iter`: only its own
// dense/label rows plus full-minibatch lookup batches for the tables it owns.
RankSlice generate_rank_slice(const DlrmConfig& cfg, uint64_t seed, int64_t iter,
                              int64_t n_global, int rank, int world, const SyntheticOptions& opts,
                              TeacherLabeler& teacher, WorkerPool& pool);

}  // namespace dlrmkit
