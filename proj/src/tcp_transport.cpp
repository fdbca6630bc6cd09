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
#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "dlrmkit/comms.hpp"
#include "dlrmkit/detail/comm_engine.hpp"

namespace dlrmkit {

// Header: u32 seq | u8 kind | u8 src | u8 dst | u8 flags | u64 payload_len, little-endian.
void encode_frame_header(const Message& m, uint8_t dst, uint8_t* out16) {
  const uint32_t seq = m.seq;
  out16[0] = static_cast<uint8_t>(seq & 0xFF);
  out16[1] = static_cast<uint8_t>((seq >> 8) & 0xFF);
  out16[2] = static_cast<uint8_t>((seq >> 16) & 0xFF);
  out16[3] = static_cast<uint8_t>((seq >> 24) & 0xFF);
  out16[4] = static_cast<uint8_t>(m.kind);
  out16[5] = m.src;
  out16[6] = dst;
  out16[7] = m.step;
  const uint64_t len = static_cast<uint64_t>(m.payload.size()) * sizeof(float);
  for (int i = 0; i < 8; ++i) out16[8 + i] = static_cast<uint8_t>((len >> (8 * i)) & 0xFF);
}

uint64_t decode_frame_header(const uint8_t* in16, Message& m, uint8_t* dst) {
  m.seq = static_cast<uint32_t>(in16[0]) | (static_cast<uint32_t>(in16[1]) << 8) |
          (static_cast<uint32_t>(in16[2]) << 16) | (static_cast<uint32_t>(in16[3]) << 24);
  m.kind = static_cast<CollKind>(in16[4]);
  m.src = in16[5];
  if (dst != nullptr) *dst = in16[6];
  m.step = in16[7];
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(in16[8 + i]) << (8 * i);
  return len;
}

namespace {

void write_exact(int fd, const void* buf, size_t n) {
  const char* p = static_cast<const char*>(buf);
  while (n > 0) {
    const ssize_t w = ::write(fd, p, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw CollectiveError(std::string("tcp write failed: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<size_t>(w);
  }
}

bool read_exact(int fd, void* buf, size_t n) {
  char* p = static_cast<char*>(buf);
  while (n > 0) {
    const ssize_t r = ::read(fd, p, n);
    if (r == 0) return false;  // peer closed
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += r;
    n -= static_cast<size_t>(r);
  }
  return true;
}

class TcpTransport : public Transport {
 public:
  explicit TcpTransport(const TcpOptions& opts) : opts_(opts) {
    fds_.assign(static_cast<size_t>(opts.world), -1);
    fd_mutexes_ = std::vector<std::mutex>(static_cast<size_t>(opts.world));
    if (opts.world > 1) establish();
  }

  ~TcpTransport() override { shutdown(); }

  void attach_and_start(CommEngine* engine) {
    attach(engine);
    for (int peer = 0; peer < opts_.world; ++peer) {
      if (peer == opts_.rank) continue;
      const int fd = fds_[static_cast<size_t>(peer)];
      readers_.emplace_back([this, fd] { reader_loop(fd); });
    }
  }

  void send(int dst, Message&& m) override {
    const int fd = fds_[static_cast<size_t>(dst)];
    if (fd < 0) return;
    uint8_t header[kFrameHeaderBytes];
    encode_frame_header(m, static_cast<uint8_t>(dst), header);
    std::lock_guard<std::mutex> lk(fd_mutexes_[static_cast<size_t>(dst)]);
    write_exact(fd, header, sizeof(header));
    if (!m.payload.empty()) {
      write_exact(fd, m.payload.data(), m.payload.size() * sizeof(float));
    }
  }

  void shutdown() override {
    bool expected = false;
    if (!closed_.compare_exchange_strong(expected, true)) return;
    for (int& fd : fds_) {
      if (fd >= 0) {
        ::shutdown(fd, SHUT_RDWR);
        ::close(fd);
        fd = -1;
      }
    }
    if (listen_fd_ >= 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    for (auto& t : readers_) {
      if (t.joinable()) t.join();
    }
    readers_.clear();
  }

 private:
  void establish() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw CollectiveError("tcp: socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(opts_.base_port + opts_.rank));
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw CollectiveError("tcp: bind to port " +
                            std::to_string(opts_.base_port + opts_.rank) + " failed: " +
                            std::strerror(errno));
    }
    if (::listen(listen_fd_, opts_.world) != 0) throw CollectiveError("tcp: listen failed");

    // Connect to lower ranks, accept from higher ones; a hello frame labels each link.
    for (int peer = 0; peer < opts_.rank; ++peer) {
      fds_[static_cast<size_t>(peer)] = connect_to(peer);
      Message hello;
      hello.kind = CollKind::kHello;
      hello.src = static_cast<uint8_t>(opts_.rank);
      uint8_t header[kFrameHeaderBytes];
      encode_frame_header(hello, static_cast<uint8_t>(peer), header);
      write_exact(fds_[static_cast<size_t>(peer)], header, sizeof(header));
    }
    for (int n = opts_.rank + 1; n < opts_.world; ++n) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) throw CollectiveError("tcp: accept failed");
      uint8_t header[kFrameHeaderBytes];
      if (!read_exact(fd, header, sizeof(header))) {
        throw CollectiveError("tcp: peer closed before hello");
      }
      Message hello;
      decode_frame_header(header, hello, nullptr);
      if (hello.kind != CollKind::kHello) throw CollectiveError("tcp: expected hello frame");
      fds_[hello.src] = fd;
    }
  }

  int connect_to(int peer) {
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::milliseconds(opts_.connect_timeout_ms);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(opts_.base_port + peer));
    if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) {
      throw CollectiveError("tcp: bad rendezvous host " + opts_.host);
    }
    for (;;) {
      const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw CollectiveError("tcp: socket() failed");
      if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        return fd;
      }
      ::close(fd);
      if (std::chrono::steady_clock::now() > deadline) {
        throw CollectiveError("tcp: could not reach rank " + std::to_string(peer) + " at " +
                              opts_.host + ":" + std::to_string(opts_.base_port + peer));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  void reader_loop(int fd) {
    for (;;) {
      uint8_t header[kFrameHeaderBytes];
      if (!read_exact(fd, header, sizeof(header))) return;
      Message m;
      const uint64_t len = decode_frame_header(header, m, nullptr);
      if (len % sizeof(float) != 0) return;
      m.payload.resize(len / sizeof(float));
      if (len > 0 && !read_exact(fd, m.payload.data(), len)) return;
      if (engine_ != nullptr) engine_->deliver(std::move(m));
    }
  }

  TcpOptions opts_;
  int listen_fd_ = -1;
  std::vector<int> fds_;
  std::vector<std::mutex> fd_mutexes_;
  std::vector<std::thread> readers_;
  std::atomic<bool> closed_{false};
};

}  // namespace

std::unique_ptr<RankContext> make_tcp_context(const TcpOptions& opts, int comm_workers) {
  auto transport = std::make_unique<TcpTransport>(opts);
  TcpTransport* raw = transport.get();
  auto ctx = std::make_unique<RankContext>(opts.rank, opts.world, std::move(transport),
                                           comm_workers);
  raw->attach_and_start(&ctx->engine());
  return ctx;
}

}  // namespace dlrmkit
