#include "cmcrl/parallel.hpp"

#include <algorithm>

namespace cmcrl {

namespace {
// Set while a thread is executing a chunk. Nested parallel_for calls run
// inline instead of waiting on the pool they are already inside of.
thread_local bool t_in_parallel_region = false;
}  // namespace

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

ThreadPool::ThreadPool() = default;

ThreadPool::~ThreadPool() { stop_workers(); }

void ThreadPool::stop_workers() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stopping_ = true;
  }
  cv_work_.notify_all();
  for (auto& w : workers_) w.join();
  workers_.clear();
  stopping_ = false;
}

void ThreadPool::set_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (n == threads()) return;
  stop_workers();
  for (int i = 0; i < n - 1; ++i) {
    workers_.emplace_back([this, i] { worker_loop(i); });
  }
}

void ThreadPool::worker_loop(int) {
  uint64_t seen = 0;
  for (;;) {
    std::unique_lock<std::mutex> lock(mu_);
    cv_work_.wait(lock, [&] { return stopping_ || generation_ > seen; });
    if (stopping_) return;
    seen = generation_;
    while (job_.next_chunk < job_.chunks.size()) {
      auto [b, e] = job_.chunks[job_.next_chunk++];
      lock.unlock();
      t_in_parallel_region = true;
      (*job_.fn)(b, e);
      t_in_parallel_region = false;
      lock.lock();
      if (--job_.remaining == 0) cv_done_.notify_all();
    }
  }
}

void ThreadPool::parallel_for(int64_t n,
                              const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int nt = threads();
  if (nt == 1 || n == 1 || t_in_parallel_region) {
    fn(0, n);
    return;
  }
  // Chunks sized so each worker gets a few, which evens out ragged loads.
  int64_t chunk = std::max<int64_t>(1, n / (4 * nt));
  std::vector<std::pair<int64_t, int64_t>> chunks;
  for (int64_t b = 0; b < n; b += chunk) {
    chunks.emplace_back(b, std::min(n, b + chunk));
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    job_.fn = &fn;
    job_.chunks = std::move(chunks);
    job_.next_chunk = 0;
    job_.remaining = job_.chunks.size();
    ++generation_;
  }
  cv_work_.notify_all();
  // The calling thread drains chunks too.
  for (;;) {
    std::unique_lock<std::mutex> lock(mu_);
    if (job_.next_chunk < job_.chunks.size()) {
      auto [b, e] = job_.chunks[job_.next_chunk++];
      lock.unlock();
      t_in_parallel_region = true;
      fn(b, e);
      t_in_parallel_region = false;
      lock.lock();
      if (--job_.remaining == 0) cv_done_.notify_all();
    } else {
      cv_done_.wait(lock, [&] { return job_.remaining == 0; });
      return;
    }
  }
}

}  // namespace cmcrl
