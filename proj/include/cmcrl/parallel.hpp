#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cmcrl {

// Process-wide worker pool. Work items always receive disjoint index ranges
// and every reduction inside a range runs in a fixed order, so results are
// bit-identical for any thread count.
class ThreadPool {
 public:
  static ThreadPool& instance();

  // Resizes the pool; n == 0 selects hardware concurrency.
  void set_threads(int n);
  int threads() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs fn(begin, end) over a partition of [0, n) across the pool, blocking
  // until all chunks finish. fn must only write to state owned by its range.
  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

  ~ThreadPool();

 private:
  ThreadPool();
  void stop_workers();
  void worker_loop(int worker_id);

  struct Job {
    const std::function<void(int64_t, int64_t)>* fn = nullptr;
    std::vector<std::pair<int64_t, int64_t>> chunks;
    size_t next_chunk = 0;
    size_t remaining = 0;
    uint64_t generation = 0;
  };

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  Job job_;
  uint64_t generation_ = 0;
  bool stopping_ = false;
};

inline void parallel_for(int64_t n,
                         const std::function<void(int64_t, int64_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace cmcrl
