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
#include "dlrmkit/comms.hpp"

#include <cassert>
#include <cstring>

#include "dlrmkit/detail/comm_engine.hpp"
#include "dlrmkit/worker_pool.hpp"

namespace dlrmkit {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

const char* coll_kind_name(CollKind kind) {
  switch (kind) {
    case CollKind::kHello: return "hello";
    case CollKind::kAllreduce: return "allreduce";
    case CollKind::kAlltoall: return "alltoall";
    case CollKind::kScatter: return "scatter";
    case CollKind::kGather: return "gather";
    case CollKind::kBarrier: return "barrier";
    case CollKind::kAbort: return "abort";
  }
  return "?";
}

const char* comm_variant_name(CommVariant v) {
  switch (v) {
    case CommVariant::kScatterList: return "scatterlist";
    case CommVariant::kFusedScatter: return "fused";
    case CommVariant::kAlltoall: return "alltoall";
  }
  return "?";
}

// ---- CommsTrace ----------------------------------------------------------------

void CommsTrace::add(TraceRecord rec) {
  std::lock_guard<std::mutex> lk(m_);
  records_.push_back(std::move(rec));
}

std::vector<TraceRecord> CommsTrace::snapshot() const {
  std::lock_guard<std::mutex> lk(m_);
  return records_;
}

namespace {
bool trace_match(const TraceRecord& r, std::string_view kind, std::string_view label) {
  if (!kind.empty() && r.kind != kind) return false;
  if (!label.empty() && r.label != label) return false;
  return true;
}
}  // namespace

int64_t CommsTrace::count(std::string_view kind, std::string_view label) const {
  std::lock_guard<std::mutex> lk(m_);
  int64_t n = 0;
  for (const auto& r : records_) n += trace_match(r, kind, label) ? 1 : 0;
  return n;
}

int64_t CommsTrace::payload_bytes(std::string_view kind, std::string_view label) const {
  std::lock_guard<std::mutex> lk(m_);
  int64_t n = 0;
  for (const auto& r : records_) n += trace_match(r, kind, label) ? r.payload_bytes : 0;
  return n;
}

int64_t CommsTrace::wire_bytes_sent(std::string_view kind, std::string_view label) const {
  std::lock_guard<std::mutex> lk(m_);
  int64_t n = 0;
  for (const auto& r : records_) n += trace_match(r, kind, label) ? r.wire_bytes_sent : 0;
  return n;
}

void CommsTrace::clear() {
  std::lock_guard<std::mutex> lk(m_);
  records_.clear();
}

// ---- MpscQueue -----------------------------------------------------------------

MpscQueue::~MpscQueue() {
  Node* n = head_.exchange(nullptr, std::memory_order_acquire);
  while (n != nullptr) {
    Node* next = n->next;
    delete n;
    n = next;
  }
}

void MpscQueue::push(Message&& m) {
  Node* n = new Node{std::move(m), nullptr};
  n->next = head_.load(std::memory_order_relaxed);
  while (!head_.compare_exchange_weak(n->next, n, std::memory_order_release,
                                      std::memory_order_relaxed)) {
  }
}

MpscQueue::Node* MpscQueue::drain() {
  Node* n = head_.exchange(nullptr, std::memory_order_acquire);
  Node* reversed = nullptr;
  while (n != nullptr) {
    Node* next = n->next;
    n->next = reversed;
    reversed = n;
    n = next;
  }
  return reversed;
}

// ---- Collective operations -------------------------------------------------------

namespace {

// Ring allreduce: R-1 reduce-scatter steps followed by R-1 allgather steps.
// Chunk c covers buf[(len*c)/R, (len*(c+1))/R from partition_rows, so wire bytes
// are exactly 2*(R-1)/R*len*4 per rank when R divides len.
struct RingAllreduceOp : OpState {
  std::span<float> buf;
  std::vector<float> own_storage;  // barriers carry their own scratch element
  bool average = false;
  int rank = 0, world = 1;
  int step = 0;
  bool sent_current = false;

  std::pair<int64_t, int64_t> chunk(int c) const {
    return partition_rows(static_cast<int64_t>(buf.size()), world, c);
  }

  bool progress(CommEngine& engine) override {
    const int total_steps = 2 * (world - 1);
    bool progressed = false;
    const int next = (rank + 1) % world;
    const int prev = (rank + world - 1) % world;
    while (step < total_steps) {
      const bool reduce_phase = step < world - 1;
      const int s = reduce_phase ? step : step - (world - 1);
      const int send_chunk =
          reduce_phase ? (rank - s + world) % world : (rank - s + 1 + world) % world;
      const int recv_chunk =
          reduce_phase ? (rank - s - 1 + 2 * world) % world : (rank - s + world) % world;
      if (!sent_current) {
        auto [b, e] = chunk(send_chunk);
        Message m;
        m.seq = seq;
        m.kind = kind;
        m.src = static_cast<uint8_t>(rank);
        m.step = static_cast<uint8_t>(step);
        m.payload.assign(buf.begin() + b, buf.begin() + e);
        wire_sent += static_cast<int64_t>(m.payload.size()) * 4;
        engine.send(next, std::move(m));
        sent_current = true;
        progressed = true;
      }
      Message in;
      if (!engine.take_message(seq, kind, static_cast<uint8_t>(prev),
                               static_cast<uint8_t>(step), in)) {
        break;
      }
      auto [b, e] = chunk(recv_chunk);
      if (static_cast<int64_t>(in.payload.size()) != e - b) {
        engine.trigger_abort(seq, std::string(coll_kind_name(kind)) +
                                      ": buffer length mismatch across ranks (expected chunk of " +
                                      std::to_string(e - b) + " elements, got " +
                                      std::to_string(in.payload.size()) + " from rank " +
                                      std::to_string(prev) + ")");
        return true;
      }
      wire_recv += static_cast<int64_t>(in.payload.size()) * 4;
      if (reduce_phase) {
        for (int64_t i = b; i < e; ++i) buf[static_cast<size_t>(i)] += in.payload[static_cast<size_t>(i - b)];
      } else {
        for (int64_t i = b; i < e; ++i) buf[static_cast<size_t>(i)] = in.payload[static_cast<size_t>(i - b)];
      }
      ++step;
      sent_current = false;
      progressed = true;
    }
    if (step >= total_steps && !complete.load()) {
      completed_at = Clock::now();
      complete.store(true);
      progressed = true;
    }
    return progressed;
  }

  void post_process(int world_size) override {
    if (!average) return;
    const float inv = 1.0f / static_cast<float>(world_size);
    for (float& v : buf) v *= inv;
  }
};

struct AlltoallvOp : OpState {
  std::span<const float> send;
  std::span<float> recv;
  std::vector<int64_t> send_counts;  // my segment size per destination
  std::vector<int64_t> recv_counts;  // expected segment size per source
  int rank = 0, world = 1;
  bool sent = false;
  std::vector<bool> got;
  int received = 0;

  int64_t send_offset(int dst) const {
    int64_t off = 0;
    for (int i = 0; i < dst; ++i) off += send_counts[static_cast<size_t>(i)];
    return off;
  }
  int64_t recv_offset(int src) const {
    int64_t off = 0;
    for (int i = 0; i < src; ++i) off += recv_counts[static_cast<size_t>(i)];
    return off;
  }

  bool progress(CommEngine& engine) override {
    bool progressed = false;
    if (!sent) {
      got.assign(static_cast<size_t>(world), false);
      for (int dst = 0; dst < world; ++dst) {
        const int64_t off = send_offset(dst);
        const int64_t n = send_counts[static_cast<size_t>(dst)];
        if (dst == rank) {
          std::memcpy(recv.data() + recv_offset(rank), send.data() + off,
                      static_cast<size_t>(n) * sizeof(float));
          continue;
        }
        Message m;
        m.seq = seq;
        m.kind = kind;
        m.src = static_cast<uint8_t>(rank);
        m.step = 0;
        m.payload.assign(send.begin() + off, send.begin() + off + n);
        wire_sent += n * 4;
        engine.send(dst, std::move(m));
      }
      sent = true;
      progressed = true;
    }
    for (int src = 0; src < world; ++src) {
      if (src == rank || got[static_cast<size_t>(src)]) continue;
      Message in;
      if (!engine.take_message(seq, kind, static_cast<uint8_t>(src), 0, in)) continue;
      const int64_t expect = recv_counts[static_cast<size_t>(src)];
      if (static_cast<int64_t>(in.payload.size()) != expect) {
        engine.trigger_abort(seq, "alltoall: segment size disagreement (expected " +
                                      std::to_string(expect) + " elements from rank " +
                                      std::to_string(src) + ", got " +
                                      std::to_string(in.payload.size()) + ")");
        return true;
      }
      std::memcpy(recv.data() + recv_offset(src), in.payload.data(),
                  in.payload.size() * sizeof(float));
      wire_recv += expect * 4;
      got[static_cast<size_t>(src)] = true;
      ++received;
      progressed = true;
    }
    if (received == world - 1 && !complete.load()) {
      completed_at = Clock::now();
      complete.store(true);
      progressed = true;
    }
    return progressed;
  }
};

struct ScatterOp : OpState {
  std::span<const float> send;  // root only, world*seg elements
  std::span<float> recv;        // seg elements
  int64_t seg = 0;
  int root = 0, rank = 0, world = 1;
  bool sent = false;
  bool done = false;

  bool progress(CommEngine& engine) override {
    bool progressed = false;
    if (rank == root) {
      if (!sent) {
        for (int dst = 0; dst < world; ++dst) {
          const float* src_ptr = send.data() + static_cast<int64_t>(dst) * seg;
          if (dst == rank) {
            std::memcpy(recv.data(), src_ptr, static_cast<size_t>(seg) * sizeof(float));
            continue;
          }
          Message m;
          m.seq = seq;
          m.kind = kind;
          m.src = static_cast<uint8_t>(rank);
          m.step = 0;
          m.payload.assign(src_ptr, src_ptr + seg);
          wire_sent += seg * 4;
          engine.send(dst, std::move(m));
        }
        sent = true;
        done = true;
        progressed = true;
      }
    } else if (!done) {
      Message in;
      if (engine.take_message(seq, kind, static_cast<uint8_t>(root), 0, in)) {
        if (static_cast<int64_t>(in.payload.size()) != seg) {
          engine.trigger_abort(seq, "scatter: segment size disagreement (expected " +
                                        std::to_string(seg) + " elements, got " +
                                        std::to_string(in.payload.size()) + ")");
          return true;
        }
        std::memcpy(recv.data(), in.payload.data(), in.payload.size() * sizeof(float));
        wire_recv += seg * 4;
        done = true;
        progressed = true;
      }
    }
    if (done && !complete.load()) {
      completed_at = Clock::now();
      complete.store(true);
      progressed = true;
    }
    return progressed;
  }
};

struct GatherOp : OpState {
  std::span<const float> send;  // seg elements
  std::span<float> recv;        // root only, world*seg elements
  int64_t seg = 0;
  int root = 0, rank = 0, world = 1;
  bool sent = false;
  std::vector<bool> got;
  int received = 0;

  bool progress(CommEngine& engine) override {
    bool progressed = false;
    if (!sent) {
      got.assign(static_cast<size_t>(world), false);
      if (rank == root) {
        std::memcpy(recv.data() + static_cast<int64_t>(rank) * seg, send.data(),
                    static_cast<size_t>(seg) * sizeof(float));
      } else {
        Message m;
        m.seq = seq;
        m.kind = kind;
        m.src = static_cast<uint8_t>(rank);
        m.step = 0;
        m.payload.assign(send.begin(), send.end());
        wire_sent += seg * 4;
        engine.send(root, std::move(m));
      }
      sent = true;
      progressed = true;
    }
    if (rank == root) {
      for (int src = 0; src < world; ++src) {
        if (src == rank || got[static_cast<size_t>(src)]) continue;
        Message in;
        if (!engine.take_message(seq, kind, static_cast<uint8_t>(src), 0, in)) continue;
        if (static_cast<int64_t>(in.payload.size()) != seg) {
          engine.trigger_abort(seq, "gather: segment size disagreement (expected " +
                                        std::to_string(seg) + " elements from rank " +
                                        std::to_string(src) + ")");
          return true;
        }
        std::memcpy(recv.data() + static_cast<int64_t>(src) * seg, in.payload.data(),
                    in.payload.size() * sizeof(float));
        wire_recv += seg * 4;
        got[static_cast<size_t>(src)] = true;
        ++received;
        progressed = true;
      }
    }
    const bool finished = rank == root ? received == world - 1 : sent;
    if (finished && !complete.load()) {
      completed_at = Clock::now();
      complete.store(true);
      progressed = true;
    }
    return progressed;
  }
};

}  // namespace

// ---- CommEngine ------------------------------------------------------------------

CommEngine::CommEngine(int rank, int world, int workers, Transport* transport, CommsTrace* trace)
    : rank_(rank), world_(world), transport_(transport), trace_(trace) {
  if (workers < 1) workers = 1;
  submissions_.resize(static_cast<size_t>(workers));
  workers_.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    workers_.emplace_back([this, w] { worker_loop(w); });
  }
}

CommEngine::~CommEngine() { shutdown(); }

void CommEngine::shutdown() {
  if (stop_.exchange(true)) return;
  {
    std::lock_guard<std::mutex> lk(state_m_);
    for (auto& [seq, op] : active_) {
      if (!op->complete.load() && !op->failed.load()) {
        op->error = "communication context shut down";
        op->failed.store(true);
      }
    }
    events_.fetch_add(1);
  }
  wake_cv_.notify_all();
  {
    std::lock_guard<std::mutex> lk(done_m_);
  }
  done_cv_.notify_all();
  for (auto& t : workers_) t.join();
  workers_.clear();
}

void CommEngine::submit(const std::shared_ptr<OpState>& op) {
  op->issued_at = Clock::now();
  {
    std::lock_guard<std::mutex> lk(state_m_);
    if (stop_.load()) throw CollectiveError("communication context shut down");
    auto abort_it = aborts_.find(op->seq);
    if (abort_it != aborts_.end()) {
      op->error = abort_it->second;
      op->failed.store(true);
    }
    active_[op->seq] = op;
    submissions_[static_cast<size_t>(submit_counter_ % submissions_.size())].push_back(op);
    ++submit_counter_;
    events_.fetch_add(1);
  }
  wake_cv_.notify_all();
}

void CommEngine::deliver(Message&& m) {
  inbox_.push(std::move(m));
  events_.fetch_add(1);
  {
    std::lock_guard<std::mutex> lk(state_m_);
  }
  wake_cv_.notify_all();
}

void CommEngine::send(int dst, Message&& m) { transport_->send(dst, std::move(m)); }

bool CommEngine::take_message(uint32_t seq, CollKind kind, uint8_t src, uint8_t step,
                              Message& out) {
  std::lock_guard<std::mutex> lk(state_m_);
  auto it = store_.find(key(seq, kind, src, step));
  if (it == store_.end()) return false;
  out = std::move(it->second);
  store_.erase(it);
  return true;
}

void CommEngine::trigger_abort(uint32_t seq, const std::string& why, bool notify_peers) {
  std::shared_ptr<OpState> op;
  {
    std::lock_guard<std::mutex> lk(state_m_);
    aborts_[seq] = why;
    auto it = active_.find(seq);
    if (it != active_.end()) op = it->second;
  }
  if (notify_peers) {
    for (int dst = 0; dst < world_; ++dst) {
      if (dst == rank_) continue;
      Message m;
      m.seq = seq;
      m.kind = CollKind::kAbort;
      m.src = static_cast<uint8_t>(rank_);
      m.step = 0;
      transport_->send(dst, std::move(m));
    }
  }
  if (op && !op->complete.load() && !op->failed.load()) {
    op->error = why;
    op->failed.store(true);
    {
      std::lock_guard<std::mutex> lk(done_m_);
    }
    done_cv_.notify_all();
  }
}

void CommEngine::finalize_locked(const std::shared_ptr<OpState>& op) {
  active_.erase(op->seq);
}

void CommEngine::worker_loop(int wid) {
  std::vector<std::shared_ptr<OpState>> mine;
  while (true) {
    const uint64_t before = events_.load();
    {
      std::lock_guard<std::mutex> lk(state_m_);
      auto& sub = submissions_[static_cast<size_t>(wid)];
      while (!sub.empty()) {
        mine.push_back(std::move(sub.front()));
        sub.pop_front();
      }
    }
    // Drain the inbox into the keyed store; detect sequence misuse and aborts.
    for (MpscQueue::Node* n = inbox_.drain(); n != nullptr;) {
      MpscQueue::Node* next = n->next;
      Message m = std::move(n->msg);
      delete n;
      if (m.kind == CollKind::kAbort) {
        trigger_abort(m.seq,
                      "collective " + std::to_string(m.seq) + " aborted by rank " +
                          std::to_string(m.src) + " (see that rank's diagnostic)",
                      false);
      } else {
        std::shared_ptr<OpState> mismatched;
        {
          std::lock_guard<std::mutex> lk(state_m_);
          if (aborts_.count(m.seq) != 0) {
            n = next;
            continue;
          }
          auto it = active_.find(m.seq);
          if (it != active_.end() && it->second->kind != m.kind) mismatched = it->second;
          if (mismatched == nullptr) store_[key(m.seq, m.kind, m.src, m.step)] = std::move(m);
        }
        if (mismatched != nullptr) {
          trigger_abort(m.seq, std::string("SPMD sequence mismatch: local collective #") +
                                   std::to_string(m.seq) + " is " +
                                   coll_kind_name(mismatched->kind) + " but rank " +
                                   std::to_string(m.src) + " issued " + coll_kind_name(m.kind));
        }
      }
      n = next;
    }

    bool progressed = false;
    bool any_done = false;
    for (auto& op : mine) {
      if (op->failed.load()) {
        any_done = true;
        continue;
      }
      if (!op->complete.load()) progressed |= op->progress(*this);
      if (op->complete.load() || op->failed.load()) any_done = true;
    }
    if (any_done) {
      {
        std::lock_guard<std::mutex> lk(state_m_);
        for (auto it = mine.begin(); it != mine.end();) {
          if ((*it)->complete.load() || (*it)->failed.load()) {
            finalize_locked(*it);
            it = mine.erase(it);
          } else {
            ++it;
          }
        }
      }
      {
        std::lock_guard<std::mutex> lk(done_m_);
      }
      done_cv_.notify_all();
    }
    if (stop_.load()) {
      for (auto& op : mine) {
        if (!op->complete.load() && !op->failed.load()) {
          op->error = "communication context shut down";
          op->failed.store(true);
        }
      }
      {
        std::lock_guard<std::mutex> lk(done_m_);
      }
      done_cv_.notify_all();
      return;
    }
    if (!progressed) {
      std::unique_lock<std::mutex> lk(state_m_);
      wake_cv_.wait(lk, [&] { return stop_.load() || events_.load() != before; });
    }
  }
}

CollTimings CommEngine::wait_op(const std::shared_ptr<OpState>& op, int world_for_post) {
  const auto t0 = Clock::now();
  {
    std::unique_lock<std::mutex> lk(done_m_);
    done_cv_.wait(lk, [&] { return op->complete.load() || op->failed.load(); });
  }
  CollTimings t;
  t.pre_ms = op->pre_ms;
  t.wait_ms = ms_since(t0);
  if (op->failed.load()) {
    throw CollectiveError("collective #" + std::to_string(op->seq) + " (" +
                          coll_kind_name(op->kind) + ") failed on rank " + std::to_string(rank_) +
                          ": " + op->error);
  }
  {
    std::lock_guard<std::mutex> lk(done_m_);
    if (!op->post_done) {
      const auto p0 = Clock::now();
      op->post_process(world_for_post);
      op->post_ms = ms_since(p0);
      op->post_done = true;
    }
    t.post_ms = op->post_ms;
    if (!op->traced && trace_ != nullptr) {
      op->traced = true;
      TraceRecord rec;
      rec.kind = coll_kind_name(op->kind);
      rec.label = op->label;
      rec.seq = op->seq;
      rec.payload_bytes = op->payload_bytes;
      rec.wire_bytes_sent = op->wire_sent;
      rec.wire_bytes_recv = op->wire_recv;
      rec.pre_ms = op->pre_ms;
      rec.wait_ms = t.wait_ms;
      rec.post_ms = t.post_ms;
      rec.total_ms =
          std::chrono::duration<double, std::milli>(op->completed_at - op->issued_at).count();
      trace_->add(std::move(rec));
    }
  }
  return t;
}

void CommEngine::check_buffer_overlap(const float* begin, const float* end) const {
#ifndef NDEBUG
  if (begin == end) return;
  std::lock_guard<std::mutex> lk(state_m_);
  for (const auto& [seq, op] : active_) {
    if (op->complete.load() || op->failed.load()) continue;
    if (op->range_begin == op->range_end) continue;
    const bool disjoint = end <= op->range_begin || op->range_end <= begin;
    assert(disjoint && "user buffer aliases an in-flight collective");
  }
#else
  (void)begin;
  (void)end;
#endif
}

// ---- RankContext -------------------------------------------------------------------

RankContext::RankContext(int rank, int world, std::unique_ptr<Transport> transport,
                         int comm_workers)
    : rank_(rank), world_(world), comm_workers_(comm_workers < 1 ? 1 : comm_workers),
      transport_(std::move(transport)) {
  if (rank < 0 || rank >= world || world < 1 || world > 128) {
    throw std::invalid_argument("RankContext: invalid rank/world");
  }
  engine_ = std::make_unique<CommEngine>(rank_, world_, comm_workers_, transport_.get(), &trace_);
  transport_->attach(engine_.get());
}

RankContext::~RankContext() {
  if (engine_) engine_->shutdown();
  if (transport_) transport_->shutdown();
}

CollectiveHandle RankContext::issue(std::shared_ptr<OpState> op, bool blocking, const char* label,
                                    double pre_ms) {
  op->seq = next_seq_.fetch_add(1);
  op->label = label;
  op->pre_ms = pre_ms;
  engine_->check_buffer_overlap(op->range_begin, op->range_end);
  engine_->submit(op);
  CollectiveHandle h;
  h.op_ = std::move(op);
  h.engine_ = engine_.get();
  if (blocking) wait(h);
  return h;
}

CollectiveHandle RankContext::allreduce(std::span<float> buf, bool blocking, bool average,
                                        const char* label, double pre_ms) {
  auto op = std::make_shared<RingAllreduceOp>();
  op->kind = CollKind::kAllreduce;
  op->buf = buf;
  op->average = average;
  op->rank = rank_;
  op->world = world_;
  op->payload_bytes = static_cast<int64_t>(buf.size()) * 4;
  op->range_begin = buf.data();
  op->range_end = buf.data() + buf.size();
  return issue(std::move(op), blocking, label, pre_ms);
}

CollectiveHandle RankContext::alltoall(std::span<const float> send, std::span<float> recv,
                                       int64_t seg_elems, bool blocking, const char* label,
                                       double pre_ms) {
  std::vector<int64_t> counts(static_cast<size_t>(world_), seg_elems);
  return alltoallv(send, recv, counts, counts, blocking, label, pre_ms);
}

CollectiveHandle RankContext::alltoallv(std::span<const float> send, std::span<float> recv,
                                        std::span<const int64_t> send_counts,
                                        std::span<const int64_t> recv_counts, bool blocking,
                                        const char* label, double pre_ms) {
  if (static_cast<int>(send_counts.size()) != world_ ||
      static_cast<int>(recv_counts.size()) != world_) {
    throw std::invalid_argument("alltoallv: counts must have one entry per rank");
  }
  int64_t send_total = 0, recv_total = 0;
  for (int64_t c : send_counts) send_total += c;
  for (int64_t c : recv_counts) recv_total += c;
  if (static_cast<int64_t>(send.size()) != send_total ||
      static_cast<int64_t>(recv.size()) != recv_total) {
    throw std::invalid_argument("alltoallv: buffer sizes do not match counts");
  }
  auto op = std::make_shared<AlltoallvOp>();
  op->kind = CollKind::kAlltoall;
  op->send = send;
  op->recv = recv;
  op->send_counts.assign(send_counts.begin(), send_counts.end());
  op->recv_counts.assign(recv_counts.begin(), recv_counts.end());
  op->rank = rank_;
  op->world = world_;
  op->payload_bytes = send_total * 4;
  op->range_begin = recv.data();
  op->range_end = recv.data() + recv.size();
  return issue(std::move(op), blocking, label, pre_ms);
}

CollectiveHandle RankContext::scatter(int root, std::span<const float> send,
                                      std::span<float> recv_seg, int64_t seg_elems, bool blocking,
                                      const char* label, double pre_ms) {
  if (root < 0 || root >= world_) throw std::invalid_argument("scatter: bad root");
  if (rank_ == root && static_cast<int64_t>(send.size()) != seg_elems * world_) {
    throw std::invalid_argument("scatter: send buffer must hold world*seg elements");
  }
  if (static_cast<int64_t>(recv_seg.size()) != seg_elems) {
    throw std::invalid_argument("scatter: recv buffer must hold seg elements");
  }
  auto op = std::make_shared<ScatterOp>();
  op->kind = CollKind::kScatter;
  op->send = send;
  op->recv = recv_seg;
  op->seg = seg_elems;
  op->root = root;
  op->rank = rank_;
  op->world = world_;
  op->payload_bytes = rank_ == root ? seg_elems * world_ * 4 : 0;
  op->range_begin = recv_seg.data();
  op->range_end = recv_seg.data() + recv_seg.size();
  return issue(std::move(op), blocking, label, pre_ms);
}

CollectiveHandle RankContext::gather(int root, std::span<const float> send_seg,
                                     std::span<float> recv, int64_t seg_elems, bool blocking,
                                     const char* label, double pre_ms) {
  if (root < 0 || root >= world_) throw std::invalid_argument("gather: bad root");
  if (static_cast<int64_t>(send_seg.size()) != seg_elems) {
    throw std::invalid_argument("gather: send buffer must hold seg elements");
  }
  if (rank_ == root && static_cast<int64_t>(recv.size()) != seg_elems * world_) {
    throw std::invalid_argument("gather: recv buffer must hold world*seg elements");
  }
  auto op = std::make_shared<GatherOp>();
  op->kind = CollKind::kGather;
  op->send = send_seg;
  op->recv = recv;
  op->seg = seg_elems;
  op->root = root;
  op->rank = rank_;
  op->world = world_;
  op->payload_bytes = seg_elems * 4;  // every rank contributes one segment
  if (rank_ == root) {
    op->range_begin = recv.data();
    op->range_end = recv.data() + recv.size();
  }
  return issue(std::move(op), blocking, label, pre_ms);
}

CollTimings RankContext::wait(CollectiveHandle& handle) {
  if (!handle.valid()) throw CollectiveError("wait on an empty collective handle");
  if (handle.engine_ != engine_.get()) {
    throw CollectiveError("wait on a handle issued by a different rank context");
  }
  return engine_->wait_op(handle.op_, world_);
}

void RankContext::barrier() {
  auto op = std::make_shared<RingAllreduceOp>();
  op->kind = CollKind::kBarrier;
  op->own_storage.assign(1, 0.0f);
  op->buf = op->own_storage;
  op->rank = rank_;
  op->world = world_;
  op->payload_bytes = 0;
  issue(std::move(op), /*blocking=*/true, "barrier", 0.0);
}

// ---- InProcess transport -------------------------------------------------------------

struct InProcessWorld::Shared {
  std::mutex m;
  std::vector<CommEngine*> engines;
};

namespace {

class InProcessTransport : public Transport {
 public:
  InProcessTransport(std::shared_ptr<InProcessWorld::Shared> shared, int rank)
      : shared_(std::move(shared)), rank_(rank) {}

  void send(int dst, Message&& m) override {
    CommEngine* target = nullptr;
    {
      std::lock_guard<std::mutex> lk(shared_->m);
      target = shared_->engines[static_cast<size_t>(dst)];
    }
    if (target != nullptr) target->deliver(std::move(m));
  }

  void shutdown() override {
    std::lock_guard<std::mutex> lk(shared_->m);
    shared_->engines[static_cast<size_t>(rank_)] = nullptr;
  }

 private:
  std::shared_ptr<InProcessWorld::Shared> shared_;
  int rank_;
};

}  // namespace

InProcessWorld::InProcessWorld(int ranks, int comm_workers) {
  if (ranks < 1) throw std::invalid_argument("InProcessWorld: need at least one rank");
  shared_ = std::make_shared<Shared>();
  shared_->engines.assign(static_cast<size_t>(ranks), nullptr);
  ctxs_.reserve(static_cast<size_t>(ranks));
  for (int r = 0; r < ranks; ++r) {
    auto transport = std::make_unique<InProcessTransport>(shared_, r);
    ctxs_.push_back(std::make_unique<RankContext>(r, ranks, std::move(transport), comm_workers));
    std::lock_guard<std::mutex> lk(shared_->m);
    shared_->engines[static_cast<size_t>(r)] = &ctxs_.back()->engine();
  }
}

InProcessWorld::~InProcessWorld() {
  // Stop all engines before any transport goes away.
  for (auto& c : ctxs_) {
    if (c) c->engine().shutdown();
  }
}

void run_spmd(InProcessWorld& world, const std::function<void(RankContext&)>& fn) {
  std::vector<std::thread> threads;
  std::mutex err_m;
  std::exception_ptr first_error;
  threads.reserve(static_cast<size_t>(world.size()));
  for (int r = 0; r < world.size(); ++r) {
    threads.emplace_back([&, r] {
      try {
        fn(world.ctx(r));
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_m);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- Redistribution variants ----------------------------------------------------------

namespace {

std::vector<int> tables_owned_by(std::span<const int> owner, int rank) {
  std::vector<int> mine;
  for (int t = 0; t < static_cast<int>(owner.size()); ++t) {
    if (owner[static_cast<size_t>(t)] == rank) mine.push_back(t);
  }
  return mine;
}

std::vector<int> owning_ranks(std::span<const int> owner, int world) {
  std::vector<bool> seen(static_cast<size_t>(world), false);
  for (int o : owner) {
    if (o < 0 || o >= world) throw std::invalid_argument("redistribute: owner map names a rank outside the world");
    seen[static_cast<size_t>(o)] = true;
  }
  std::vector<int> out;
  for (int r = 0; r < world; ++r) {
    if (seen[static_cast<size_t>(r)]) out.push_back(r);
  }
  return out;
}

}  // namespace

RedistributeResult PendingRedistribute::finish() {
  RedistributeResult result;
  for (auto& h : handles_) {
    const CollTimings t = ctx_->wait(h);
    acc_.wait_ms += t.wait_ms;
    acc_.post_ms += t.post_ms;
  }
  handles_.clear();
  if (unpack_) result.tensors = unpack_(*this);
  result.timings = acc_;
  return result;
}

PendingRedistribute redistribute_forward_async(RankContext& ctx, CommVariant variant,
                                               std::span<const int> owner,
                                               std::span<const std::vector<float>> local_outputs,
                                               int64_t n_global, int64_t width, bool blocking,
                                               const char* label) {
  const int world = ctx.world_size();
  const int rank = ctx.rank();
  const int tables = static_cast<int>(owner.size());
  if (n_global % world != 0) {
    throw std::invalid_argument("redistribute: global minibatch must divide by the world size");
  }
  const int64_t n_local = n_global / world;
  const int64_t slice = n_local * width;
  const std::vector<int> mine = tables_owned_by(owner, rank);
  if (mine.size() != local_outputs.size()) {
    throw std::invalid_argument("redistribute: local output count does not match owned tables");
  }
  for (const auto& out : local_outputs) {
    if (static_cast<int64_t>(out.size()) != n_global * width) {
      throw std::invalid_argument("redistribute: owned table output must cover the global minibatch");
    }
  }

  PendingRedistribute p;
  p.ctx_ = &ctx;
  const auto t0 = Clock::now();

  switch (variant) {
    case CommVariant::kAlltoall: {
      // Segment for destination r: slice r of every owned table, back to back.
      const int64_t my_seg = static_cast<int64_t>(mine.size()) * slice;
      std::vector<float> send(static_cast<size_t>(my_seg * world));
      for (int dst = 0; dst < world; ++dst) {
        float* seg = send.data() + static_cast<int64_t>(dst) * my_seg;
        for (size_t i = 0; i < mine.size(); ++i) {
          std::memcpy(seg + static_cast<int64_t>(i) * slice,
                      local_outputs[i].data() + static_cast<int64_t>(dst) * slice,
                      static_cast<size_t>(slice) * sizeof(float));
        }
      }
      std::vector<int64_t> send_counts(static_cast<size_t>(world), my_seg);
      std::vector<int64_t> recv_counts(static_cast<size_t>(world), 0);
      int64_t recv_total = 0;
      for (int r = 0; r < world; ++r) {
        const int64_t cnt =
            static_cast<int64_t>(tables_owned_by(owner, r).size()) * slice;
        recv_counts[static_cast<size_t>(r)] = cnt;
        recv_total += cnt;
      }
      p.send_bufs_.push_back(std::move(send));
      p.recv_bufs_.emplace_back(static_cast<size_t>(recv_total));
      p.acc_.pre_ms = ms_since(t0);
      p.handles_.push_back(ctx.alltoallv(p.send_bufs_[0], p.recv_bufs_[0], send_counts,
                                         recv_counts, blocking, label, p.acc_.pre_ms));
      auto owners = std::vector<int>(owner.begin(), owner.end());
      p.unpack_ = [owners, world, slice, tables](PendingRedistribute& self) {
        std::vector<std::vector<float>> out(static_cast<size_t>(tables));
        const float* base = self.recv_bufs_[0].data();
        int64_t off = 0;
        for (int src = 0; src < world; ++src) {
          for (int t = 0; t < tables; ++t) {
            if (owners[static_cast<size_t>(t)] != src) continue;
            out[static_cast<size_t>(t)].assign(base + off, base + off + slice);
            off += slice;
          }
        }
        return out;
      };
      break;
    }
    case CommVariant::kScatterList: {
      // One collective per table, in ascending table id order.
      p.recv_bufs_.assign(static_cast<size_t>(tables), std::vector<float>(static_cast<size_t>(slice)));
      p.acc_.pre_ms = ms_since(t0);
      size_t local_idx = 0;
      for (int t = 0; t < tables; ++t) {
        const int root = owner[static_cast<size_t>(t)];
        std::span<const float> send_span;
        if (root == rank) send_span = local_outputs[local_idx++];
        p.handles_.push_back(ctx.scatter(root, send_span, p.recv_bufs_[static_cast<size_t>(t)],
                                         slice, blocking, label, t == 0 ? p.acc_.pre_ms : 0.0));
      }
      p.unpack_ = [](PendingRedistribute& self) { return std::move(self.recv_bufs_); };
      break;
    }
    case CommVariant::kFusedScatter: {
      // One collective per owning rank; each coalesces that rank's local tables.
      const std::vector<int> owners = owning_ranks(owner, world);
      for (int o : owners) {
        const auto o_tables = tables_owned_by(owner, o);
        const int64_t seg = static_cast<int64_t>(o_tables.size()) * slice;
        if (o == rank) {
          std::vector<float> send(static_cast<size_t>(seg * world));
          for (int dst = 0; dst < world; ++dst) {
            float* dst_seg = send.data() + static_cast<int64_t>(dst) * seg;
            for (size_t i = 0; i < o_tables.size(); ++i) {
              std::memcpy(dst_seg + static_cast<int64_t>(i) * slice,
                          local_outputs[i].data() + static_cast<int64_t>(dst) * slice,
                          static_cast<size_t>(slice) * sizeof(float));
            }
          }
          p.send_bufs_.push_back(std::move(send));
        }
        p.recv_bufs_.emplace_back(static_cast<size_t>(seg));
      }
      p.acc_.pre_ms = ms_since(t0);
      size_t send_idx = 0;
      for (size_t i = 0; i < owners.size(); ++i) {
        const int o = owners[i];
        const int64_t seg = static_cast<int64_t>(p.recv_bufs_[i].size());
        std::span<const float> send_span;
        if (o == rank) send_span = p.send_bufs_[send_idx++];
        p.handles_.push_back(ctx.scatter(o, send_span, p.recv_bufs_[i], seg, blocking, label,
                                         i == 0 ? p.acc_.pre_ms : 0.0));
      }
      auto owners_copy = std::vector<int>(owner.begin(), owner.end());
      auto roots = owners;
      p.unpack_ = [owners_copy, roots, slice, tables](PendingRedistribute& self) {
        std::vector<std::vector<float>> out(static_cast<size_t>(tables));
        for (size_t i = 0; i < roots.size(); ++i) {
          const float* base = self.recv_bufs_[i].data();
          int64_t off = 0;
          for (int t = 0; t < tables; ++t) {
            if (owners_copy[static_cast<size_t>(t)] != roots[i]) continue;
            out[static_cast<size_t>(t)].assign(base + off, base + off + slice);
            off += slice;
          }
        }
        return out;
      };
      break;
    }
  }
  return p;
}

PendingRedistribute redistribute_backward_async(RankContext& ctx, CommVariant variant,
                                                std::span<const int> owner,
                                                std::span<const std::vector<float>> grad_slices,
                                                int64_t n_global, int64_t width, bool blocking,
                                                const char* label) {
  const int world = ctx.world_size();
  const int rank = ctx.rank();
  const int tables = static_cast<int>(owner.size());
  if (static_cast<int>(grad_slices.size()) != tables) {
    throw std::invalid_argument("redistribute backward: need one gradient slice per table");
  }
  if (n_global % world != 0) {
    throw std::invalid_argument("redistribute: global minibatch must divide by the world size");
  }
  const int64_t n_local = n_global / world;
  const int64_t slice = n_local * width;
  for (const auto& g : grad_slices) {
    if (static_cast<int64_t>(g.size()) != slice) {
      throw std::invalid_argument("redistribute backward: slice size mismatch");
    }
  }
  const std::vector<int> mine = tables_owned_by(owner, rank);

  PendingRedistribute p;
  p.ctx_ = &ctx;
  const auto t0 = Clock::now();

  switch (variant) {
    case CommVariant::kAlltoall: {
      // Segment for destination r: my slices of r's tables, ascending table id.
      std::vector<int64_t> send_counts(static_cast<size_t>(world), 0);
      int64_t send_total = 0;
      for (int r = 0; r < world; ++r) {
        send_counts[static_cast<size_t>(r)] =
            static_cast<int64_t>(tables_owned_by(owner, r).size()) * slice;
        send_total += send_counts[static_cast<size_t>(r)];
      }
      std::vector<float> send(static_cast<size_t>(send_total));
      int64_t off = 0;
      for (int dst = 0; dst < world; ++dst) {
        for (int t = 0; t < tables; ++t) {
          if (owner[static_cast<size_t>(t)] != dst) continue;
          std::memcpy(send.data() + off, grad_slices[static_cast<size_t>(t)].data(),
                      static_cast<size_t>(slice) * sizeof(float));
          off += slice;
        }
      }
      const int64_t my_seg = static_cast<int64_t>(mine.size()) * slice;
      std::vector<int64_t> recv_counts(static_cast<size_t>(world), my_seg);
      p.send_bufs_.push_back(std::move(send));
      p.recv_bufs_.emplace_back(static_cast<size_t>(my_seg * world));
      p.acc_.pre_ms = ms_since(t0);
      p.handles_.push_back(ctx.alltoallv(p.send_bufs_[0], p.recv_bufs_[0], send_counts,
                                         recv_counts, blocking, label, p.acc_.pre_ms));
      const int64_t ntables_mine = static_cast<int64_t>(mine.size());
      p.unpack_ = [ntables_mine, world, slice](PendingRedistribute& self) {
        std::vector<std::vector<float>> out(static_cast<size_t>(ntables_mine));
        const float* base = self.recv_bufs_[0].data();
        for (int64_t i = 0; i < ntables_mine; ++i) {
          auto& dst = out[static_cast<size_t>(i)];
          dst.resize(static_cast<size_t>(slice * world));
          for (int src = 0; src < world; ++src) {
            std::memcpy(dst.data() + static_cast<int64_t>(src) * slice,
                        base + static_cast<int64_t>(src) * (ntables_mine * slice) + i * slice,
                        static_cast<size_t>(slice) * sizeof(float));
          }
        }
        return out;
      };
      break;
    }
    case CommVariant::kScatterList: {
      // One gather per table at its owner.
      p.recv_bufs_.assign(mine.size(), std::vector<float>());
      size_t local_idx = 0;
      for (int t = 0; t < tables; ++t) {
        if (owner[static_cast<size_t>(t)] == rank) {
          p.recv_bufs_[local_idx++].resize(static_cast<size_t>(slice * world));
        }
      }
      p.acc_.pre_ms = ms_since(t0);
      local_idx = 0;
      for (int t = 0; t < tables; ++t) {
        const int root = owner[static_cast<size_t>(t)];
        std::span<float> recv_span;
        if (root == rank) recv_span = p.recv_bufs_[local_idx++];
        p.handles_.push_back(ctx.gather(root, grad_slices[static_cast<size_t>(t)], recv_span,
                                        slice, blocking, label, t == 0 ? p.acc_.pre_ms : 0.0));
      }
      p.unpack_ = [](PendingRedistribute& self) { return std::move(self.recv_bufs_); };
      break;
    }
    case CommVariant::kFusedScatter: {
      const std::vector<int> owners = owning_ranks(owner, world);
      // Coalesced segment towards owner o: my slices of o's tables.
      for (int o : owners) {
        const auto o_tables = tables_owned_by(owner, o);
        std::vector<float> send(static_cast<size_t>(static_cast<int64_t>(o_tables.size()) * slice));
        for (size_t i = 0; i < o_tables.size(); ++i) {
          std::memcpy(send.data() + static_cast<int64_t>(i) * slice,
                      grad_slices[static_cast<size_t>(o_tables[i])].data(),
                      static_cast<size_t>(slice) * sizeof(float));
        }
        p.send_bufs_.push_back(std::move(send));
        if (o == rank) {
          p.recv_bufs_.emplace_back(
              static_cast<size_t>(static_cast<int64_t>(o_tables.size()) * slice * world));
        }
      }
      p.acc_.pre_ms = ms_since(t0);
      size_t recv_idx = 0;
      for (size_t i = 0; i < owners.size(); ++i) {
        const int o = owners[i];
        const int64_t seg = static_cast<int64_t>(p.send_bufs_[i].size());
        std::span<float> recv_span;
        if (o == rank) recv_span = p.recv_bufs_[recv_idx++];
        p.handles_.push_back(ctx.gather(o, p.send_bufs_[i], recv_span, seg, blocking, label,
                                        i == 0 ? p.acc_.pre_ms : 0.0));
      }
      const int64_t ntables_mine = static_cast<int64_t>(mine.size());
      p.unpack_ = [ntables_mine, world, slice](PendingRedistribute& self) {
        std::vector<std::vector<float>> out(static_cast<size_t>(ntables_mine));
        if (ntables_mine == 0) return out;
        const float* base = self.recv_bufs_[0].data();
        for (int64_t i = 0; i < ntables_mine; ++i) {
          auto& dst = out[static_cast<size_t>(i)];
          dst.resize(static_cast<size_t>(slice * world));
          for (int src = 0; src < world; ++src) {
            std::memcpy(dst.data() + static_cast<int64_t>(src) * slice,
                        base + static_cast<int64_t>(src) * (ntables_mine * slice) + i * slice,
                        static_cast<size_t>(slice) * sizeof(float));
          }
        }
        return out;
      };
      break;
    }
  }
  return p;
}

}  // namespace dlrmkit
