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

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "dlrmkit/costmodel.hpp"
#include "dlrmkit/model.hpp"
#include "dlrmkit/synthetic.hpp"

namespace dlrmkit {

// Shipped configurations: small/large/mlperf plus desk-scale mini variants.
std::vector<std::string> preset_names();
DlrmConfig preset_config(const std::string& name);

// Flat key=value text, '#' comments; keys mirror the configuration parameter
// names (minibatch, global_minibatch, local_minibatch, avg_lookups, num_tables,
// embedding_dim, rows_per_table, bottom_mlp_input, bottom_mlp, top_mlp); MLP
// widths are dash-separated.
DlrmConfig parse_config_file(std::istream& in, const std::string& name_hint = "file");
// Preset name or path to a config file.
DlrmConfig resolve_config(const std::string& name_or_path);

struct RunSpec {
  std::string config = "mini-small";
  int ranks = 1;
  ScalingMode scaling = ScalingMode::kStrong;
  enum class Transport { kInProcess, kTcp } transport = Transport::kInProcess;
  CommVariant comm_variant = CommVariant::kAlltoall;
  UpdateStrategy update_strategy = UpdateStrategy::kRaceFreePartitioned;
  DtypeMode dtype = DtypeMode::kFp32;
  bool blocking = false;
  int64_t iters = 10;
  int64_t warmup = 2;
  uint64_t seed = 42;
  int threads = 1;
  int comm_workers = 1;
  IndexDistribution distribution = IndexDistribution::kUniform;
  float lr = 0.1f;
  std::string out_path;
  std::string baseline_path;
  // tcp mode: this process hosts exactly one rank
  int tcp_rank = 0;
  std::string rendezvous = "127.0.0.1:29500";

  int64_t global_minibatch(const DlrmConfig& cfg) const {
    return scaling == ScalingMode::kStrong ? cfg.global_minibatch
                                           : cfg.local_minibatch * ranks;
  }
};

// Estimated allocation footprint; throws std::runtime_error with a diagnostic if
// it exceeds available memory (checked before any allocation).
int64_t estimate_run_bytes(const DlrmConfig& cfg, const RunSpec& spec);
void check_feasibility(const DlrmConfig& cfg, const RunSpec& spec);

// Runs the benchmark and returns the report (also written to spec.out_path when
// set). Warmup iterations are excluded from every timing statistic.
nlohmann::json run_benchmark(const RunSpec& spec);

// speedup = baseline iteration time / candidate iteration time;
// efficiency = speedup / (candidate ranks / baseline ranks).
nlohmann::json compare_reports(const nlohmann::json& baseline, const nlohmann::json& candidate);

// Flag-string parsing and names used by the CLI and the report.
ScalingMode parse_scaling(const std::string& s);
RunSpec::Transport parse_transport(const std::string& s);
CommVariant parse_comm_variant(const std::string& s);
UpdateStrategy parse_update_strategy(const std::string& s);
DtypeMode parse_dtype(const std::string& s);
IndexDistribution parse_distribution(const std::string& s);
const char* scaling_name(ScalingMode m);
const char* transport_name(RunSpec::Transport t);
const char* update_strategy_name(UpdateStrategy s);
const char* dtype_name(DtypeMode m);
const char* distribution_name(IndexDistribution d);

}  // namespace dlrmkit
