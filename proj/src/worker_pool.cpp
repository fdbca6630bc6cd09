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
#include "dlrmkit/worker_pool.hpp"

#include <stdexcept>

namespace dlrmkit {

WorkerPool::WorkerPool(int nthreads) : nthreads_(nthreads) {
  if (nthreads < 1) throw std::invalid_argument("WorkerPool needs at least one thread");
  if (nthreads_ == 1) return;
  threads_.reserve(static_cast<size_t>(nthreads_));
  for (int t = 0; t < nthreads_; ++t) {
    threads_.emplace_back([this, t] { worker_loop(t); });
  }
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard<std::mutex> lk(m_);
    stop_ = true;
  }
  cv_start_.notify_all();
  for (auto& th : threads_) th.join();
}

void WorkerPool::worker_loop(int tid) {
  uint64_t seen = 0;
  for (;;) {
    const std::function<void(int)>* job = nullptr;
    {
      std::unique_lock<std::mutex> lk(m_);
      cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      job = job_;
    }
    try {
      (*job)(tid);
    } catch (...) {
      std::lock_guard<std::mutex> lk(m_);
      if (!first_error_) first_error_ = std::current_exception();
    }
    {
      std::lock_guard<std::mutex> lk(m_);
      if (--pending_ == 0) cv_done_.notify_all();
    }
  }
}

void WorkerPool::run(const std::function<void(int)>& task) {
  if (nthreads_ == 1) {
    task(0);
    return;
  }
  std::exception_ptr err;
  {
    std::unique_lock<std::mutex> lk(m_);
    job_ = &task;
    pending_ = nthreads_;
    ++generation_;
    cv_start_.notify_all();
    cv_done_.wait(lk, [&] { return pending_ == 0; });
    err = first_error_;
    first_error_ = nullptr;
    job_ = nullptr;
  }
  if (err) std::rethrow_exception(err);
}

}  // namespace dlrmkit
