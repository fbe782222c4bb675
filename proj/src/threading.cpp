#include "netdeconv/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace netdeconv {

int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("NETDECONV_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return n;
}

namespace {

thread_local bool inside_task = false;

// Tiny shared pool. Tasks are claimed off an atomic counter, so which thread
// runs which chunk varies but the chunk boundaries themselves are a pure
// function of (n, chunk). The calling thread works too; nested calls from
// inside a task degrade to serial execution instead of deadlocking.
class pool {
public:
    static pool& instance() {
        static pool p;
        return p;
    }

    void run(long tasks, const std::function<void(long)>& task) {
        if (tasks <= 0) return;
        if (workers_.empty() || tasks == 1 || inside_task) {
            run_serial(tasks, task);
            return;
        }
        {
            std::lock_guard lock(mu_);
            task_ = &task;
            next_.store(0, std::memory_order_relaxed);
            total_ = tasks;
            pending_.store(tasks, std::memory_order_relaxed);
            ++generation_;
        }
        wake_.notify_all();
        drain(task);
        std::unique_lock lock(mu_);
        done_.wait(lock, [&] { return pending_.load() == 0; });
        task_ = nullptr;
    }

private:
    pool() {
        int n = thread_count() - 1;
        for (int i = 0; i < n; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ~pool() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        wake_.notify_all();
        for (auto& w : workers_) w.join();
    }

    static void run_serial(long tasks, const std::function<void(long)>& task) {
        bool saved = inside_task;
        inside_task = true;
        for (long i = 0; i < tasks; ++i) task(i);
        inside_task = saved;
    }

    void drain(const std::function<void(long)>& task) {
        inside_task = true;
        while (true) {
            long i = next_.fetch_add(1);
            if (i >= total_) break;
            task(i);
            if (pending_.fetch_sub(1) == 1) {
                std::lock_guard lock(mu_);
                done_.notify_all();
            }
        }
        inside_task = false;
    }

    void worker_loop() {
        unsigned long long seen = 0;
        while (true) {
            const std::function<void(long)>* task;
            {
                std::unique_lock lock(mu_);
                wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                task = task_;
            }
            if (!task) continue;
            inside_task = true;
            while (true) {
                long i = next_.fetch_add(1);
                if (i >= total_) break;
                (*task)(i);
                if (pending_.fetch_sub(1) == 1) {
                    std::lock_guard lock(mu_);
                    done_.notify_all();
                }
            }
            inside_task = false;
        }
    }

    std::mutex mu_;
    std::condition_variable wake_, done_;
    std::vector<std::thread> workers_;
    const std::function<void(long)>* task_ = nullptr;
    std::atomic<long> next_{0};
    long total_ = 0;
    std::atomic<long> pending_{0};
    unsigned long long generation_ = 0;
    bool stop_ = false;
};

} // namespace

void parallel_for(long n, const std::function<void(long)>& fn) {
    pool::instance().run(n, fn);
}

void parallel_ranges(long n, long chunk, const std::function<void(long, long)>& fn) {
    if (n <= 0) return;
    if (chunk < 1) chunk = 1;
    long tasks = (n + chunk - 1) / chunk;
    pool::instance().run(tasks, [&](long t) {
        long begin = t * chunk;
        long end = begin + chunk < n ? begin + chunk : n;
        fn(begin, end);
    });
}

} // namespace netdeconv
