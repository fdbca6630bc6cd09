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

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dlrmkit {

// Persistent pool of compute workers. run() executes task(tid) on every worker
// and returns once all are done; with size 1 the task runs inline. Workers block
// on a condition variable between jobs, so an idle pool consumes no CPU.
class WorkerPool {
 public:
  explicit WorkerPool(int nthreads);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  int size() const { return nthreads_; }
  void run(const std::function<void(int)>& task);

 private:
  void worker_loop(int tid);

  int nthreads_ = 1;
  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(int)>* job_ = nullptr;
  uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
  std::exception_ptr first_error_;
};

// Half-open [start, end) share of `rows` for worker `tid` out of `nthreads`,
// using pure integer arithmetic; the ranges tile [0, rows) exactly.
inline std::pair<int64_t, int64_t> partition_rows(int64_t rows, int nthreads, int tid) {
  const int64_t t = tid, n = nthreads;
  return {(rows * t) / n, (rows * (t + 1)) / n};
}

}  // namespace dlrmkit
