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

#include <chrono>

#include "dlrmkit/comms.hpp"

namespace dlrmkit {

// One in-flight collective. progress() is driven by a comm worker and must never
// block; it polls the engine's message store and pushes sends to the transport.
struct OpState {
  virtual ~OpState() = default;
  virtual bool progress(CommEngine& engine) = 0;
  virtual void post_process(int /*world*/) {}

  CollKind kind = CollKind::kHello;
  uint32_t seq = 0;
  std::string label;
  std::atomic<bool> complete{false};
  std::atomic<bool> failed{false};
  std::string error;

  int64_t payload_bytes = 0;
  int64_t wire_sent = 0;
  int64_t wire_recv = 0;
  double pre_ms = 0.0;
  std::chrono::steady_clock::time_point issued_at;
  std::chrono::steady_clock::time_point completed_at;

  // Waiter bookkeeping, guarded by the engine's completion mutex.
  bool post_done = false;
  bool traced = false;
  double post_ms = 0.0;

  // Buffer extents for the debug in-flight aliasing check.
  const float* range_begin = nullptr;
  const float* range_end = nullptr;
};

// Lock-free multi-producer inbox (Treiber stack, drained and reversed by the
// consuming worker).
class MpscQueue {
 public:
  struct Node {
    Message msg;
    Node* next = nullptr;
  };

  ~MpscQueue();
  void push(Message&& m);
  Node* drain();  // returns the list in push order (oldest first)

 private:
  std::atomic<Node*> head_{nullptr};
};

class CommEngine {
 public:
  CommEngine(int rank, int world, int workers, Transport* transport, CommsTrace* trace);
  ~CommEngine();

  int rank() const { return rank_; }
  int world() const { return world_; }

  void submit(const std::shared_ptr<OpState>& op);
  void deliver(Message&& m);  // transport -> engine, any thread
  void send(int dst, Message&& m);

  // Consumes the matching message if present. Never blocks.
  bool take_message(uint32_t seq, CollKind kind, uint8_t src, uint8_t step, Message& out);
  // Marks seq failed everywhere: local op fails, peers receive an abort frame.
  void trigger_abort(uint32_t seq, const std::string& why, bool notify_peers = true);

  CollTimings wait_op(const std::shared_ptr<OpState>& op, int world_for_post);
  void shutdown();

  // Debug-build misuse check: no two in-flight collectives may overlap buffers.
  void check_buffer_overlap(const float* begin, const float* end) const;

 private:
  static uint64_t key(uint32_t seq, CollKind kind, uint8_t src, uint8_t step) {
    return (static_cast<uint64_t>(seq) << 24) | (static_cast<uint64_t>(kind) << 16) |
           (static_cast<uint64_t>(src) << 8) | step;
  }
  void worker_loop(int wid);
  void finalize_locked(const std::shared_ptr<OpState>& op);

  int rank_;
  int world_;
  Transport* transport_;
  CommsTrace* trace_;

  MpscQueue inbox_;
  std::atomic<uint64_t> events_{0};
  std::atomic<bool> stop_{false};

  mutable std::mutex state_m_;
  std::condition_variable wake_cv_;
  std::vector<std::deque<std::shared_ptr<OpState>>> submissions_;  // per worker
  std::unordered_map<uint32_t, std::shared_ptr<OpState>> active_;
  std::unordered_map<uint64_t, Message> store_;
  std::unordered_map<uint32_t, std::string> aborts_;
  uint64_t submit_counter_ = 0;

  std::mutex done_m_;
  std::condition_variable done_cv_;

  std::vector<std::thread> workers_;
};

}  // namespace dlrmkit
