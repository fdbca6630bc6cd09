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
#include "dlrmkit/harness.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dlrmkit {

namespace {

std::vector<int64_t> repeated(int64_t width, int count, int64_t last) {
  std::vector<int64_t> v(static_cast<size_t>(count), width);
  v.back() = last;
  return v;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"small", "large", "mlperf", "mini-small", "mini-large", "mini-mlperf"};
}

DlrmConfig preset_config(const std::string& name) {
  DlrmConfig c;
  c.name = name;
  if (name == "small") {
    c.minibatch = 2048;
    c.global_minibatch = 8192;
    c.local_minibatch = 1024;
    c.avg_lookups = 50;
    c.num_tables = 8;
    c.embedding_dim = 64;
    c.rows_per_table = 1000000;
    c.bottom_mlp_input = 512;
    c.bottom_mlp = {512, 64};
    c.top_mlp = {1024, 1024, 1024, 1};
  } else if (name == "large") {
    c.minibatch = 2048;
    c.global_minibatch = 16384;
    c.local_minibatch = 512;
    c.avg_lookups = 100;
    c.num_tables = 64;
    c.embedding_dim = 256;
    c.rows_per_table = 6000000;
    c.bottom_mlp_input = 2048;
    c.bottom_mlp = repeated(2048, 8, 256);
    c.top_mlp = repeated(4096, 16, 1);
  } else if (name == "mlperf") {
    c.minibatch = 2048;
    c.global_minibatch = 16384;
    c.local_minibatch = 2048;
    c.avg_lookups = 1;
    c.num_tables = 26;
    c.embedding_dim = 128;
    c.rows_per_table = 40000000;
    c.bottom_mlp_input = 13;
    c.bottom_mlp = {512, 256, 128};
    c.top_mlp = {512, 512, 256, 1};
  } else if (name == "mini-small") {
    c.minibatch = 128;
    c.global_minibatch = 256;
    c.local_minibatch = 64;
    c.avg_lookups = 10;
    c.num_tables = 8;
    c.embedding_dim = 32;
    c.rows_per_table = 10000;
    c.bottom_mlp_input = 64;
    c.bottom_mlp = {64, 32};
    c.top_mlp = {64, 64, 64, 1};
  } else if (name == "mini-large") {
    c.minibatch = 128;
    c.global_minibatch = 256;
    c.local_minibatch = 64;
    c.avg_lookups = 20;
    c.num_tables = 64;
    c.embedding_dim = 128;
    c.rows_per_table = 4096;
    c.bottom_mlp_input = 128;
    c.bottom_mlp = repeated(128, 8, 128);
    c.top_mlp = repeated(256, 16, 1);
  } else if (name == "mini-mlperf") {
    c.minibatch = 32;
    c.global_minibatch = 512;
    c.local_minibatch = 128;
    c.avg_lookups = 1;
    c.num_tables = 26;
    c.embedding_dim = 64;
    c.rows_per_table = 10000;
    c.bottom_mlp_input = 13;
    c.bottom_mlp = {256, 128, 64};
    c.top_mlp = {256, 256, 128, 1};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

namespace {

std::vector<int64_t> parse_widths(const std::string& text) {
  std::vector<int64_t> widths;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, '-')) {
    if (!token.empty()) widths.push_back(std::stoll(token));
  }
  return widths;
}

}  // namespace

DlrmConfig parse_config_file(std::istream& in, const std::string& name_hint) {
  DlrmConfig c;
  c.name = name_hint;
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) continue;
    if (key == "name") {
      c.name = value;
    } else if (key == "minibatch") {
      c.minibatch = std::stoll(value);
    } else if (key == "global_minibatch") {
      c.global_minibatch = std::stoll(value);
    } else if (key == "local_minibatch") {
      c.local_minibatch = std::stoll(value);
    } else if (key == "avg_lookups") {
      c.avg_lookups = std::stoll(value);
    } else if (key == "num_tables") {
      c.num_tables = std::stoll(value);
    } else if (key == "embedding_dim") {
      c.embedding_dim = std::stoll(value);
    } else if (key == "rows_per_table") {
      c.rows_per_table = std::stoll(value);
    } else if (key == "bottom_mlp_input") {
      c.bottom_mlp_input = std::stoll(value);
    } else if (key == "bottom_mlp") {
      c.bottom_mlp = parse_widths(value);
    } else if (key == "top_mlp") {
      c.top_mlp = parse_widths(value);
    } else {
      throw std::invalid_argument("config file: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

DlrmConfig resolve_config(const std::string& name_or_path) {
  for (const auto& p : preset_names()) {
    if (p == name_or_path) return preset_config(p);
  }
  std::ifstream f(name_or_path);
  if (!f) {
    throw std::invalid_argument("'" + name_or_path +
                                "' is neither a preset name nor a readable config file");
  }
  return parse_config_file(f, name_or_path);
}

int64_t estimate_run_bytes(const DlrmConfig& cfg, const RunSpec& spec) {
  const int64_t tables = table_bytes(cfg);
  const int64_t teacher = cfg.num_tables * cfg.rows_per_table * 8 * 4;
  const int64_t dense = allreduce_size_elems(cfg) * 4;
  // weights + two gradient flats + optimizer masters, per rank
  int64_t est = tables + teacher + static_cast<int64_t>(spec.ranks) * dense * 4;
  if (spec.dtype != DtypeMode::kFp32) est += tables;  // hi/lo planes
  return est;
}

void check_feasibility(const DlrmConfig& cfg, const RunSpec& spec) {
  const int64_t est = estimate_run_bytes(cfg, spec);
  const int64_t pages = sysconf(_SC_AVPHYS_PAGES);
  const int64_t page = sysconf(_SC_PAGESIZE);
  const int64_t available = pages > 0 && page > 0 ? pages * page : 0;
  if (available > 0 && est > available - available / 10) {
    throw std::runtime_error(
        "config '" + cfg.name + "' is infeasible on this host: estimated " +
        std::to_string(est / (1 << 20)) + " MiB (tables " +
        std::to_string(table_bytes(cfg) / (1 << 20)) + " MiB) vs " +
        std::to_string(available / (1 << 20)) + " MiB available; nothing was allocated");
  }
}

namespace {

struct Stats {
  double mean = 0, p50 = 0, p95 = 0;
};

Stats stats_of(std::vector<double> v) {
  Stats s;
  if (v.empty()) return s;
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const size_t i = static_cast<size_t>(p * static_cast<double>(v.size() - 1) + 0.5);
    return v[std::min(i, v.size() - 1)];
  };
  s.p50 = q(0.5);
  s.p95 = q(0.95);
  return s;
}

nlohmann::json stats_json(const Stats& s) {
  return {{"mean", s.mean}, {"p50", s.p50}, {"p95", s.p95}};
}

struct RankResult {
  std::vector<StepTimings> timings;
  std::vector<float> loss;
  std::vector<TraceRecord> trace;
  double gemm_fwd_gflops = 0, gemm_bwd_d_gflops = 0, gemm_bwd_w_gflops = 0;
};

int64_t trace_payload(const std::vector<TraceRecord>& recs, std::string_view label) {
  int64_t n = 0;
  for (const auto& r : recs) {
    if (r.label == label) n += r.payload_bytes;
  }
  return n;
}

int64_t trace_count(const std::vector<TraceRecord>& recs, std::string_view label) {
  int64_t n = 0;
  for (const auto& r : recs) {
    if (r.label == label) ++n;
  }
  return n;
}

std::pair<std::string, int> parse_rendezvous(const std::string& addr) {
  const size_t colon = addr.rfind(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("rendezvous address must be host:port, got '" + addr + "'");
  }
  return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
}

}  // namespace

nlohmann::json run_benchmark(const RunSpec& spec) {
  const DlrmConfig cfg = resolve_config(spec.config);
  check_feasibility(cfg, spec);
  const int ranks = spec.ranks;
  if (ranks < 1) throw std::invalid_argument("run: ranks must be >= 1");
  if (ranks > cfg.num_tables) {
    throw std::runtime_error("config '" + cfg.name + "' scales to at most " +
                             std::to_string(cfg.num_tables) +
                             " ranks (one embedding table per rank minimum)");
  }
  const int64_t n_global = spec.global_minibatch(cfg);
  if (n_global <= 0 || n_global % ranks != 0) {
    throw std::runtime_error("global minibatch " + std::to_string(n_global) +
                             " does not divide across " + std::to_string(ranks) + " ranks");
  }
  if (spec.iters < 1) throw std::invalid_argument("run: need at least one measured iteration");

  const SyntheticOptions sopts{spec.distribution, 1.05};
  const TrainOptions topts{spec.comm_variant, spec.blocking, spec.update_strategy};
  DlrmModelOptions mopts;
  mopts.mlp.bf16_inputs = spec.dtype != DtypeMode::kFp32;
  const int64_t total_iters = spec.warmup + spec.iters;

  std::vector<RankResult> results(static_cast<size_t>(ranks));

  auto rank_main = [&](RankContext& ctx) {
    const int r = ctx.rank();
    WorkerPool pool(spec.threads);
    DlrmModel model(cfg, spec.seed, r, ranks, mopts);
    SgdOptimizer opt(spec.dtype, spec.lr);
    model.register_with(opt);
    TeacherLabeler teacher(cfg, spec.seed);
    RankResult& res = results[static_cast<size_t>(r)];
    for (int64_t it = 0; it < total_iters; ++it) {
      const RankSlice slice =
          generate_rank_slice(cfg, spec.seed, it, n_global, r, ranks, sopts, teacher, pool);
      StepTimings t;
      const double loss = train_step_distributed(ctx, model, slice, opt, topts, pool, &t);
      res.loss.push_back(static_cast<float>(loss));
      if (it == spec.warmup - 1) {
        ctx.barrier();
        ctx.trace().clear();
      }
      if (it >= spec.warmup) res.timings.push_back(t);
    }
    ctx.barrier();
    res.trace = ctx.trace().snapshot();
    const PassStats& f1 = model.bottom().forward_stats();
    const PassStats& f2 = model.top().forward_stats();
    res.gemm_fwd_gflops = PassStats{f1.flops + f2.flops, f1.seconds + f2.seconds}.gflops();
    const PassStats& d1 = model.bottom().backward_data_stats();
    const PassStats& d2 = model.top().backward_data_stats();
    res.gemm_bwd_d_gflops = PassStats{d1.flops + d2.flops, d1.seconds + d2.seconds}.gflops();
    const PassStats& w1 = model.bottom().backward_weights_stats();
    const PassStats& w2 = model.top().backward_weights_stats();
    res.gemm_bwd_w_gflops = PassStats{w1.flops + w2.flops, w1.seconds + w2.seconds}.gflops();
  };

  int report_rank = 0;
  bool world_scope = true;
  if (spec.transport == RunSpec::Transport::kInProcess) {
    InProcessWorld world(ranks, spec.comm_workers);
    run_spmd(world, rank_main);
  } else {
    auto [host, port] = parse_rendezvous(spec.rendezvous);
    TcpOptions topt;
    topt.rank = spec.tcp_rank;
    topt.world = ranks;
    topt.host = host;
    topt.base_port = port;
    auto ctx = make_tcp_context(topt, spec.comm_workers);
    rank_main(*ctx);
    report_rank = spec.tcp_rank;
    world_scope = false;
  }

  const RankResult& prim = results[static_cast<size_t>(report_rank)];

  auto collect = [&](auto field) {
    std::vector<double> v;
    v.reserve(prim.timings.size());
    for (const auto& t : prim.timings) v.push_back(field(t));
    return v;
  };

  nlohmann::json report;
  report["schema"] = "dlrmkit-report-v1";
  report["run"] = {{"config", cfg.name},
                   {"ranks", ranks},
                   {"scaling", scaling_name(spec.scaling)},
                   {"transport", transport_name(spec.transport)},
                   {"comm_variant", comm_variant_name(spec.comm_variant)},
                   {"update_strategy", update_strategy_name(spec.update_strategy)},
                   {"dtype", dtype_name(spec.dtype)},
                   {"blocking", spec.blocking},
                   {"iters", spec.iters},
                   {"warmup", spec.warmup},
                   {"seed", spec.seed},
                   {"threads", spec.threads},
                   {"comm_workers", spec.comm_workers},
                   {"distribution", distribution_name(spec.distribution)},
                   {"lr", spec.lr}};
  report["config"] = {{"name", cfg.name},
                      {"minibatch", cfg.minibatch},
                      {"global_minibatch", cfg.global_minibatch},
                      {"local_minibatch", cfg.local_minibatch},
                      {"avg_lookups", cfg.avg_lookups},
                      {"num_tables", cfg.num_tables},
                      {"embedding_dim", cfg.embedding_dim},
                      {"rows_per_table", cfg.rows_per_table},
                      {"bottom_mlp_input", cfg.bottom_mlp_input},
                      {"bottom_mlp", cfg.bottom_mlp},
                      {"top_mlp", cfg.top_mlp}};
  report["config"]["derived"] = {
      {"interaction_width", interaction_output_width(cfg.num_tables, cfg.embedding_dim)},
      {"n_global", n_global},
      {"n_local", n_global / ranks},
      {"allreduce_elems", allreduce_size_elems(cfg)},
      {"table_bytes", table_bytes(cfg)}};
  report["metadata"] = {
      {"data_generation",
       "per-rank slices generated directly from the seed; each rank materializes its own "
       "dense/label rows plus full-minibatch lookups for owned tables only (no full global "
       "batch read per rank)"},
      {"bytes_scope", world_scope ? "world" : "rank"}};

  report["timings_ms"] = {
      {"embedding_forward", stats_json(stats_of(collect([](const StepTimings& t) { return t.emb_fwd; })))},
      {"bottom_mlp_forward", stats_json(stats_of(collect([](const StepTimings& t) { return t.bottom_fwd; })))},
      {"interaction_forward", stats_json(stats_of(collect([](const StepTimings& t) { return t.interaction_fwd; })))},
      {"top_mlp_forward", stats_json(stats_of(collect([](const StepTimings& t) { return t.top_fwd; })))},
      {"loss", stats_json(stats_of(collect([](const StepTimings& t) { return t.loss; })))},
      {"top_mlp_backward", stats_json(stats_of(collect([](const StepTimings& t) { return t.top_bwd; })))},
      {"interaction_backward", stats_json(stats_of(collect([](const StepTimings& t) { return t.interaction_bwd; })))},
      {"bottom_mlp_backward", stats_json(stats_of(collect([](const StepTimings& t) { return t.bottom_bwd; })))},
      {"embedding_backward", stats_json(stats_of(collect([](const StepTimings& t) { return t.emb_bwd; })))},
      {"embedding_update", stats_json(stats_of(collect([](const StepTimings& t) { return t.emb_update; })))},
      {"sgd_dense", stats_json(stats_of(collect([](const StepTimings& t) { return t.sgd_dense; })))}};
  report["iteration_ms"] =
      stats_json(stats_of(collect([](const StepTimings& t) { return t.total; })));
  report["component_sum_ms"] =
      stats_json(stats_of(collect([](const StepTimings& t) { return t.component_sum(); })));

  auto coll_json = [&](auto pre, auto wait, auto post) {
    return nlohmann::json{{"pre", stats_json(stats_of(collect(pre)))},
                          {"wait", stats_json(stats_of(collect(wait)))},
                          {"post", stats_json(stats_of(collect(post)))}};
  };
  report["comms_ms"] = {
      {"alltoall_fwd", coll_json([](const StepTimings& t) { return t.a2a_fwd.pre_ms; },
                                 [](const StepTimings& t) { return t.a2a_fwd.wait_ms; },
                                 [](const StepTimings& t) { return t.a2a_fwd.post_ms; })},
      {"alltoall_bwd", coll_json([](const StepTimings& t) { return t.a2a_bwd.pre_ms; },
                                 [](const StepTimings& t) { return t.a2a_bwd.wait_ms; },
                                 [](const StepTimings& t) { return t.a2a_bwd.post_ms; })},
      {"allreduce", coll_json([](const StepTimings& t) { return t.allreduce.pre_ms; },
                              [](const StepTimings& t) { return t.allreduce.wait_ms; },
                              [](const StepTimings& t) { return t.allreduce.post_ms; })}};

  // Byte accounting cross-checked against the closed forms.
  int64_t fwd_payload = 0, bwd_payload = 0;
  for (const auto& res : results) {
    fwd_payload += trace_payload(res.trace, "emb_fwd");
    bwd_payload += trace_payload(res.trace, "emb_bwd");
  }
  const int64_t ar_payload_rank = trace_payload(prim.trace, "mlp_grads_top") +
                                  trace_payload(prim.trace, "mlp_grads_bottom");
  report["bytes"] = {
      {"alltoall_fwd_measured_per_iter", fwd_payload / spec.iters},
      {"alltoall_bwd_measured_per_iter", bwd_payload / spec.iters},
      {"alltoall_predicted_per_iter", alltoall_volume_bytes(cfg, n_global)},
      {"allreduce_elems_measured_per_rank_iter", ar_payload_rank / 4 / spec.iters},
      {"allreduce_elems_predicted", allreduce_size_elems(cfg)},
      {"comm_calls_fwd_per_rank_iter", trace_count(prim.trace, "emb_fwd") / spec.iters},
      {"comm_calls_bwd_per_rank_iter", trace_count(prim.trace, "emb_bwd") / spec.iters}};

  report["gemm_gflops"] = {{"forward", prim.gemm_fwd_gflops},
                           {"backward_data", prim.gemm_bwd_d_gflops},
                           {"backward_weights", prim.gemm_bwd_w_gflops}};
  report["loss_trace"] = prim.loss;

  if (!spec.baseline_path.empty()) {
    std::ifstream bf(spec.baseline_path);
    if (!bf) throw std::runtime_error("cannot read baseline report " + spec.baseline_path);
    nlohmann::json baseline = nlohmann::json::parse(bf);
    report["baseline"] = compare_reports(baseline, report);
    report["baseline"]["path"] = spec.baseline_path;
  }

  if (!spec.out_path.empty()) {
    std::ofstream out(spec.out_path);
    if (!out) throw std::runtime_error("cannot write report to " + spec.out_path);
    out << report.dump(2) << "\n";
  }
  return report;
}

nlohmann::json compare_reports(const nlohmann::json& baseline, const nlohmann::json& candidate) {
  const std::string base_cfg = baseline.at("run").at("config").get<std::string>();
  const std::string cand_cfg = candidate.at("run").at("config").get<std::string>();
  const std::string base_scaling = baseline.at("run").at("scaling").get<std::string>();
  const std::string cand_scaling = candidate.at("run").at("scaling").get<std::string>();
  if (base_cfg != cand_cfg || base_scaling != cand_scaling) {
    throw std::invalid_argument("compare_reports: reports come from different config families (" +
                                base_cfg + "/" + base_scaling + " vs " + cand_cfg + "/" +
                                cand_scaling + ")");
  }
  const double base_ms = baseline.at("iteration_ms").at("mean").get<double>();
  const double cand_ms = candidate.at("iteration_ms").at("mean").get<double>();
  const double base_ranks = baseline.at("run").at("ranks").get<double>();
  const double cand_ranks = candidate.at("run").at("ranks").get<double>();
  const double speedup = cand_ms > 0 ? base_ms / cand_ms : 0.0;
  const double rank_ratio = base_ranks > 0 ? cand_ranks / base_ranks : 0.0;
  return {{"config", base_cfg},
          {"baseline_ranks", base_ranks},
          {"candidate_ranks", cand_ranks},
          {"baseline_iteration_ms", base_ms},
          {"candidate_iteration_ms", cand_ms},
          {"speedup", speedup},
          {"efficiency", rank_ratio > 0 ? speedup / rank_ratio : 0.0}};
}

ScalingMode parse_scaling(const std::string& s) {
  if (s == "strong") return ScalingMode::kStrong;
  if (s == "weak") return ScalingMode::kWeak;
  throw std::invalid_argument("scaling must be strong|weak, got '" + s + "'");
}

RunSpec::Transport parse_transport(const std::string& s) {
  if (s == "inproc") return RunSpec::Transport::kInProcess;
  if (s == "tcp") return RunSpec::Transport::kTcp;
  throw std::invalid_argument("transport must be inproc|tcp, got '" + s + "'");
}

CommVariant parse_comm_variant(const std::string& s) {
  if (s == "scatterlist") return CommVariant::kScatterList;
  if (s == "fused") return CommVariant::kFusedScatter;
  if (s == "alltoall") return CommVariant::kAlltoall;
  throw std::invalid_argument("comm-variant must be scatterlist|fused|alltoall, got '" + s + "'");
}

UpdateStrategy parse_update_strategy(const std::string& s) {
  if (s == "atomic") return UpdateStrategy::kAtomicExchange;
  if (s == "locked") return UpdateStrategy::kLockedRowSimd;
  if (s == "racefree") return UpdateStrategy::kRaceFreePartitioned;
  throw std::invalid_argument("update-strategy must be atomic|locked|racefree, got '" + s + "'");
}

DtypeMode parse_dtype(const std::string& s) {
  if (s == "fp32") return DtypeMode::kFp32;
  if (s == "bf16split") return DtypeMode::kSplitBf16;
  if (s == "bf16split-lo8") return DtypeMode::kSplitBf16Lo8;
  throw std::invalid_argument("dtype must be fp32|bf16split|bf16split-lo8, got '" + s + "'");
}

IndexDistribution parse_distribution(const std::string& s) {
  if (s == "uniform") return IndexDistribution::kUniform;
  if (s == "clustered") return IndexDistribution::kClustered;
  throw std::invalid_argument("distribution must be uniform|clustered, got '" + s + "'");
}

const char* scaling_name(ScalingMode m) {
  return m == ScalingMode::kStrong ? "strong" : "weak";
}
const char* transport_name(RunSpec::Transport t) {
  return t == RunSpec::Transport::kInProcess ? "inproc" : "tcp";
}
const char* update_strategy_name(UpdateStrategy s) {
  switch (s) {
    case UpdateStrategy::kAtomicExchange: return "atomic";
    case UpdateStrategy::kLockedRowSimd: return "locked";
    case UpdateStrategy::kRaceFreePartitioned: return "racefree";
  }
  return "?";
}
const char* dtype_name(DtypeMode m) {
  switch (m) {
    case DtypeMode::kFp32: return "fp32";
    case DtypeMode::kSplitBf16: return "bf16split";
    case DtypeMode::kSplitBf16Lo8: return "bf16split-lo8";
  }
  return "?";
}
const char* distribution_name(IndexDistribution d) {
  return d == IndexDistribution::kUniform ? "uniform" : "clustered";
}

}  // namespace dlrmkit
