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

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace dlrmkit {

// Rank-based message-passing layer: allreduce as ring reduce-scatter + allgather,
// personalized alltoall, scatter/gather based redistribution variants. All ranks
// call collectives in the same order (SPMD); per-collective sequence numbers in
// the message headers detect misuse. Nonblocking operations progress on dedicated
// comm workers that sleep on a condition variable when idle, never spin.

enum class CollKind : uint8_t {
  kHello = 0,
  kAllreduce = 1,
  kAlltoall = 2,
  kScatter = 3,
  kGather = 4,
  kBarrier = 5,
  kAbort = 6,
};

const char* coll_kind_name(CollKind kind);

struct Message {
  uint32_t seq = 0;
  CollKind kind = CollKind::kHello;
  uint8_t src = 0;
  uint8_t step = 0;  // "flags" byte on the wire
  std::vector<float> payload;
};

struct CollTimings {
  double pre_ms = 0.0;
  double wait_ms = 0.0;
  double post_ms = 0.0;
};

struct TraceRecord {
  std::string kind;
  std::string label;
  uint32_t seq = 0;
  int64_t payload_bytes = 0;  // data this rank feeds into the collective (incl. its own share)
  int64_t wire_bytes_sent = 0;
  int64_t wire_bytes_recv = 0;
  double pre_ms = 0.0;
  double wait_ms = 0.0;
  double post_ms = 0.0;
  double total_ms = 0.0;  // issue -> completion
};

class CommsTrace {
 public:
  void add(TraceRecord rec);
  std::vector<TraceRecord> snapshot() const;
  int64_t count(std::string_view kind, std::string_view label = {}) const;
  int64_t payload_bytes(std::string_view kind, std::string_view label = {}) const;
  int64_t wire_bytes_sent(std::string_view kind, std::string_view label = {}) const;
  void clear();

 private:
  mutable std::mutex m_;
  std::vector<TraceRecord> records_;
};

class CollectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CommEngine;

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(int dst, Message&& m) = 0;
  virtual void shutdown() {}
  void attach(CommEngine* engine) { engine_ = engine; }

 protected:
  CommEngine* engine_ = nullptr;
};

struct OpState;

class CollectiveHandle {
 public:
  CollectiveHandle() = default;
  bool valid() const { return op_ != nullptr; }

 private:
  friend class RankContext;
  std::shared_ptr<OpState> op_;
  CommEngine* engine_ = nullptr;
};

class RankContext {
 public:
  RankContext(int rank, int world, std::unique_ptr<Transport> transport, int comm_workers);
  ~RankContext();
  RankContext(const RankContext&) = delete;
  RankContext& operator=(const RankContext&) = delete;

  int rank() const { return rank_; }
  int world_size() const { return world_; }
  int comm_workers() const { return comm_workers_; }
  CommsTrace& trace() { return trace_; }

  // Elementwise sum of buf across ranks (in place). With average=true the result
  // is divided by the world size during wait post-processing.
  CollectiveHandle allreduce(std::span<float> buf, bool blocking, bool average = false,
                             const char* label = "", double pre_ms = 0.0);
  // Personalized exchange with equal segments: recv segment j comes from rank j.
  CollectiveHandle alltoall(std::span<const float> send, std::span<float> recv, int64_t seg_elems,
                            bool blocking = true, const char* label = "", double pre_ms = 0.0);
  // General form: this rank sends send_counts[rank()] elements to every peer and
  // expects recv_counts[j] elements from rank j. All ranks agree on both vectors.
  CollectiveHandle alltoallv(std::span<const float> send, std::span<float> recv,
                             std::span<const int64_t> send_counts,
                             std::span<const int64_t> recv_counts, bool blocking = true,
                             const char* label = "", double pre_ms = 0.0);
  CollectiveHandle scatter(int root, std::span<const float> send, std::span<float> recv_seg,
                           int64_t seg_elems, bool blocking = true, const char* label = "",
                           double pre_ms = 0.0);
  CollectiveHandle gather(int root, std::span<const float> send_seg, std::span<float> recv,
                          int64_t seg_elems, bool blocking = true, const char* label = "",
                          double pre_ms = 0.0);

  // Idempotent; throws CollectiveError if the operation aborted or the handle
  // was issued by another context. wait_ms covers only this call's blocking time.
  CollTimings wait(CollectiveHandle& handle);
  void barrier();

  CommEngine& engine() { return *engine_; }

 private:
  CollectiveHandle issue(std::shared_ptr<OpState> op, bool blocking, const char* label,
                         double pre_ms);

  int rank_;
  int world_;
  int comm_workers_;
  CommsTrace trace_;
  std::unique_ptr<Transport> transport_;
  std::unique_ptr<CommEngine> engine_;
  std::atomic<uint32_t> next_seq_{0};
};

// All ranks hosted in one process; rank-to-rank messages travel over lock-free
// queues drained by each rank's comm workers.
class InProcessWorld {
 public:
  explicit InProcessWorld(int ranks, int comm_workers = 1);
  ~InProcessWorld();

  int size() const { return static_cast<int>(ctxs_.size()); }
  RankContext& ctx(int rank) { return *ctxs_[static_cast<size_t>(rank)]; }

  struct Shared;  // transport wiring, exposed for the in-process transport only

 private:
  std::shared_ptr<Shared> shared_;
  std::vector<std::unique_ptr<RankContext>> ctxs_;
};

// Spawns one thread per rank running fn, joins them, rethrows the first failure.
void run_spmd(InProcessWorld& world, const std::function<void(RankContext&)>& fn);

// TCP transport: length-prefixed frames over stream sockets. The rendezvous
// address names rank 0; rank r listens on port(base)+r. Header layout (16 bytes,
// little-endian): u32 seq, u8 kind, u8 src_rank, u8 dst_rank, u8 flags, u64
// payload_len, followed by raw FP32 payload.
struct TcpOptions {
  int rank = 0;
  int world = 1;
  std::string host = "127.0.0.1";
  int base_port = 29500;
  int connect_timeout_ms = 10000;
};

std::unique_ptr<RankContext> make_tcp_context(const TcpOptions& opts, int comm_workers = 1);

// Wire helpers, exposed for tests of the frame format.
constexpr size_t kFrameHeaderBytes = 16;
void encode_frame_header(const Message& m, uint8_t dst, uint8_t* out16);
// Returns payload byte count; fills all header fields of m except the payload.
uint64_t decode_frame_header(const uint8_t* in16, Message& m, uint8_t* dst);

// ---- Embedding-output redistribution (table-major -> sample-major) ------------

enum class CommVariant { kScatterList, kFusedScatter, kAlltoall };

const char* comm_variant_name(CommVariant v);

struct RedistributeResult {
  std::vector<std::vector<float>> tensors;
  CollTimings timings;
};

// In-flight redistribution; finish() waits for the remaining collectives and
// unpacks. Move-only, owns the staging buffers until completion.
class PendingRedistribute {
 public:
  PendingRedistribute() = default;
  PendingRedistribute(PendingRedistribute&&) = default;
  PendingRedistribute& operator=(PendingRedistribute&&) = default;
  RedistributeResult finish();

 private:
  friend PendingRedistribute redistribute_forward_async(RankContext&, CommVariant,
                                                        std::span<const int>,
                                                        std::span<const std::vector<float>>,
                                                        int64_t, int64_t, bool, const char*);
  friend PendingRedistribute redistribute_backward_async(RankContext&, CommVariant,
                                                         std::span<const int>,
                                                         std::span<const std::vector<float>>,
                                                         int64_t, int64_t, bool, const char*);
  RankContext* ctx_ = nullptr;
  std::vector<CollectiveHandle> handles_;
  std::vector<std::vector<float>> send_bufs_;
  std::vector<std::vector<float>> recv_bufs_;
  std::function<std::vector<std::vector<float>>(PendingRedistribute&)> unpack_;
  CollTimings acc_;
};

// Forward: every rank owns some tables (owner[t] == rank) and holds, per owned
// table, its output for the full global minibatch [n_global x width]. The result
// gives every rank, for all tables in ascending id order, its own
// [n_global/world x width] sample slice. The three variants move identical data
// and differ only in collective call granularity (one per table / one per owning
// rank / one alltoall).
PendingRedistribute redistribute_forward_async(RankContext& ctx, CommVariant variant,
                                               std::span<const int> owner,
                                               std::span<const std::vector<float>> local_outputs,
                                               int64_t n_global, int64_t width, bool blocking,
                                               const char* label = "emb_fwd");

// Backward: grad_slices holds this rank's [n_local x width] gradient for every
// table; owners receive the stitched [n_global x width] gradient per owned table.
PendingRedistribute redistribute_backward_async(RankContext& ctx, CommVariant variant,
                                                std::span<const int> owner,
                                                std::span<const std::vector<float>> grad_slices,
                                                int64_t n_global, int64_t width, bool blocking,
                                                const char* label = "emb_bwd");

}  // namespace dlrmkit
