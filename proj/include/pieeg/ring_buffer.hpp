#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace pieeg::acq {

enum class OverflowPolicy {
  overwrite_oldest,  // real-time: freshest data wins, lagging readers count drops
  block_writer,      // offline: producer waits for the slowest reader
};

// Bounded single-producer / multi-reader buffer. Every reader owns a read
// cursor; when the writer laps a reader the oldest unread items are lost and
// counted against that reader.
template <class T>
class RingBuffer {
 public:
  using ReaderId = std::uint64_t;

  struct ReadResult {
    std::vector<T> items;
    std::uint64_t first_seq{0};  // buffer sequence of items.front()
    std::uint64_t dropped{0};    // items lost since the previous read
    bool timed_out{false};
    bool closed{false};  // writer finished and this reader is drained
  };

  struct ReaderStats {
    std::uint64_t read_seq{0};
    std::uint64_t dropped{0};      // reconciled on the reader side
    std::uint64_t overwritten{0};  // counted by the writer as it laps the reader
  };

  explicit RingBuffer(std::size_t capacity, OverflowPolicy policy = OverflowPolicy::overwrite_oldest)
      : slots_(capacity), policy_(policy) {
    if (capacity == 0) throw std::invalid_argument("ring buffer capacity must be positive");
  }

  RingBuffer(const RingBuffer&) = delete;
  RingBuffer& operator=(const RingBuffer&) = delete;

  std::size_t capacity() const { return slots_.size(); }
  OverflowPolicy policy() const { return policy_; }

  ReaderId add_reader() {
    std::lock_guard lk(mu_);
    ReaderId id = next_reader_++;
    readers_[id] = Reader{write_seq_, 0, 0};
    return id;
  }

  void remove_reader(ReaderId id) {
    {
      std::lock_guard lk(mu_);
      readers_.erase(id);
    }
    cv_.notify_all();
  }

  // Returns false when cancelled while waiting for room (block_writer only).
  bool push(T item, const std::atomic<bool>* cancel = nullptr) {
    std::unique_lock lk(mu_);
    if (policy_ == OverflowPolicy::block_writer) {
      cv_.wait(lk, [&] {
        return (cancel && cancel->load()) || write_seq_ - min_read_seq() < slots_.size();
      });
      if (cancel && cancel->load()) return false;
    }
    for (auto& [id, r] : readers_)
      if (write_seq_ - r.read_seq >= slots_.size()) ++r.overwritten;
    slots_[write_seq_ % slots_.size()] = std::move(item);
    ++write_seq_;
    lk.unlock();
    cv_.notify_all();
    return true;
  }

  // Up to `max_items` in order. Waits until that many are available, the
  // buffer closes, or the timeout expires.
  template <class Rep, class Period>
  ReadResult read(ReaderId id, std::size_t max_items, std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lk(mu_);
    auto deadline = std::chrono::steady_clock::now() + timeout;
    ReadResult res;
    auto ready = [&] {
      auto it = readers_.find(id);
      if (it == readers_.end()) return true;
      // A blocked writer never fills more than the ring, so never wait for more.
      return closed_ || write_seq_ - it->second.read_seq >= std::min(max_items, slots_.size());
    };
    bool ok = cv_.wait_until(lk, deadline, ready);
    auto it = readers_.find(id);
    if (it == readers_.end()) throw std::out_of_range("unknown ring buffer reader");
    Reader& r = it->second;
    res.dropped = reconcile(r);
    res.first_seq = r.read_seq;
    std::size_t n = std::min<std::uint64_t>(max_items, write_seq_ - r.read_seq);
    res.items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) res.items.push_back(slots_[(r.read_seq + i) % slots_.size()]);
    r.read_seq += n;
    res.timed_out = !ok && res.items.size() < max_items;
    res.closed = closed_ && r.read_seq == write_seq_;
    lk.unlock();
    if (policy_ == OverflowPolicy::block_writer) cv_.notify_all();
    return res;
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  // Wakes a writer blocked in push() so it can observe cancellation.
  void notify() { cv_.notify_all(); }

  bool closed() const {
    std::lock_guard lk(mu_);
    return closed_;
  }

  std::uint64_t write_seq() const {
    std::lock_guard lk(mu_);
    return write_seq_;
  }

  ReaderStats stats(ReaderId id) const {
    std::lock_guard lk(mu_);
    const Reader& r = readers_.at(id);
    return {r.read_seq, r.dropped, r.overwritten};
  }

 private:
  struct Reader {
    std::uint64_t read_seq;
    std::uint64_t dropped;
    std::uint64_t overwritten;
  };

  std::uint64_t reconcile(Reader& r) {
    if (write_seq_ - r.read_seq <= slots_.size()) return 0;
    std::uint64_t lost = write_seq_ - slots_.size() - r.read_seq;
    r.read_seq += lost;
    r.dropped += lost;
    return lost;
  }

  std::uint64_t min_read_seq() const {
    std::uint64_t m = write_seq_;
    for (const auto& [id, r] : readers_) m = std::min(m, r.read_seq);
    return m;
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<T> slots_;
  OverflowPolicy policy_;
  std::map<ReaderId, Reader> readers_;
  ReaderId next_reader_{0};
  std::uint64_t write_seq_{0};
  bool closed_{false};
};

}  // namespace pieeg::acq
