#pragma once

#include <chrono>
#include <memory>
#include <mutex>
#include <thread>

namespace probeql {

// Injectable time source. All throttling, retry backoff and timeout logic in
// the gateway goes through a Clock so tests can run on a FakeClock without
// real waiting.
class Clock {
public:
    using duration = std::chrono::milliseconds;

    virtual ~Clock() = default;
    virtual duration now() = 0;
    virtual void sleep_for(duration d) = 0;
};

class SystemClock final : public Clock {
public:
    duration now() override {
        return std::chrono::duration_cast<duration>(
            std::chrono::steady_clock::now().time_since_epoch());
    }
    void sleep_for(duration d) override {
        if (d.count() > 0) std::this_thread::sleep_for(d);
    }
};

// Virtual clock: sleep_for advances time instantly. Thread-safe so concurrent
// workers sharing one FakeClock see a monotone timeline.
class FakeClock final : public Clock {
public:
    duration now() override {
        std::lock_guard<std::mutex> lock(mu_);
        return now_;
    }
    void sleep_for(duration d) override {
        if (d.count() <= 0) return;
        std::lock_guard<std::mutex> lock(mu_);
        now_ += d;
    }
    void advance(duration d) { sleep_for(d); }

private:
    std::mutex mu_;
    duration now_{0};
};

inline std::shared_ptr<Clock> system_clock() {
    static auto clk = std::make_shared<SystemClock>();
    return clk;
}

}  // namespace probeql
