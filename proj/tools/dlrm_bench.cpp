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
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dlrmkit/harness.hpp"

using namespace dlrmkit;

int main(int argc, char** argv) {
  CLI::App app{"DLRM CPU training benchmark driver"};

  RunSpec spec;
  std::string scaling = "strong", transport = "inproc", variant = "alltoall",
              strategy = "racefree", dtype = "fp32", distribution = "uniform";
  std::vector<std::string> compare_paths;

  app.add_option("--config", spec.config, "preset name or config file path")
      ->capture_default_str();
  app.add_option("--ranks", spec.ranks, "number of ranks")->capture_default_str();
  app.add_option("--scaling", scaling, "strong|weak")->capture_default_str();
  app.add_option("--transport", transport, "inproc|tcp")->capture_default_str();
  app.add_option("--comm-variant", variant, "scatterlist|fused|alltoall")->capture_default_str();
  app.add_option("--update-strategy", strategy, "atomic|locked|racefree")->capture_default_str();
  app.add_option("--dtype", dtype, "fp32|bf16split|bf16split-lo8")->capture_default_str();
  app.add_flag("--blocking", spec.blocking, "blocking collectives (no compute overlap)");
  app.add_option("--iters", spec.iters, "measured iterations")->capture_default_str();
  app.add_option("--warmup", spec.warmup, "warmup iterations (excluded from stats)")
      ->capture_default_str();
  app.add_option("--seed", spec.seed, "RNG seed")->capture_default_str();
  app.add_option("--threads", spec.threads, "compute threads per rank")->capture_default_str();
  app.add_option("--comm-workers", spec.comm_workers, "dedicated comm threads per rank")
      ->capture_default_str();
  app.add_option("--distribution", distribution, "uniform|clustered index draws")
      ->capture_default_str();
  app.add_option("--lr", spec.lr, "learning rate")->capture_default_str();
  app.add_option("--out", spec.out_path, "write the JSON report here");
  app.add_option("--baseline", spec.baseline_path,
                 "baseline report for speedup/efficiency columns");
  app.add_option("--rank", spec.tcp_rank, "this process's rank (tcp transport)");
  int world_flag = -1;
  app.add_option("--world", world_flag, "world size (tcp transport; equals --ranks)");
  app.add_option("--rendezvous", spec.rendezvous, "rank 0 address host:port (tcp transport)")
      ->capture_default_str();
  app.add_option("--compare", compare_paths,
                 "compare two existing reports (baseline candidate) and exit")
      ->expected(2);
  bool list_presets = false;
  app.add_flag("--list-configs", list_presets, "print preset names and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (list_presets) {
      for (const auto& name : preset_names()) std::cout << name << "\n";
      return 0;
    }
    if (!compare_paths.empty()) {
      std::ifstream a(compare_paths[0]), b(compare_paths[1]);
      if (!a || !b) throw std::runtime_error("cannot open report files for --compare");
      const nlohmann::json result =
          compare_reports(nlohmann::json::parse(a), nlohmann::json::parse(b));
      std::cout << result.dump(2) << "\n";
      return 0;
    }
    spec.scaling = parse_scaling(scaling);
    spec.transport = parse_transport(transport);
    spec.comm_variant = parse_comm_variant(variant);
    spec.update_strategy = parse_update_strategy(strategy);
    spec.dtype = parse_dtype(dtype);
    spec.distribution = parse_distribution(distribution);
    if (world_flag > 0) spec.ranks = world_flag;

    const nlohmann::json report = run_benchmark(spec);
    std::cout << "config           " << report["run"]["config"].get<std::string>() << "\n"
              << "ranks            " << report["run"]["ranks"].get<int>() << " ("
              << report["run"]["scaling"].get<std::string>() << " scaling, "
              << report["run"]["transport"].get<std::string>() << ")\n"
              << "variant          " << report["run"]["comm_variant"].get<std::string>() << ", "
              << report["run"]["update_strategy"].get<std::string>() << ", "
              << report["run"]["dtype"].get<std::string>()
              << (report["run"]["blocking"].get<bool>() ? ", blocking" : ", overlapped") << "\n"
              << "iteration (ms)   mean " << report["iteration_ms"]["mean"].get<double>()
              << "  p50 " << report["iteration_ms"]["p50"].get<double>() << "  p95 "
              << report["iteration_ms"]["p95"].get<double>() << "\n"
              << "allreduce wait   " << report["comms_ms"]["allreduce"]["wait"]["mean"].get<double>()
              << " ms/iter (exposed)\n"
              << "alltoall bytes   measured "
              << report["bytes"]["alltoall_fwd_measured_per_iter"].get<int64_t>()
              << " vs predicted " << report["bytes"]["alltoall_predicted_per_iter"].get<int64_t>()
              << " per iter\n"
              << "final loss       " << report["loss_trace"].back().get<double>() << "\n";
    if (report.contains("baseline")) {
      std::cout << "speedup          " << report["baseline"]["speedup"].get<double>()
                << " (efficiency " << report["baseline"]["efficiency"].get<double>() << ")\n";
    }
    if (!spec.out_path.empty()) std::cout << "report written to " << spec.out_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
