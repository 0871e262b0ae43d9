#pragma once

#include <algorithm>
#include <cstdint>

namespace tsor {

// Byte token bucket with integer refill and carried remainder, so a run of
// exactly one second refills exactly `rate` tokens regardless of how the
// grant calls are spaced. Caller supplies the clock (nanoseconds).
class TokenBucket {
public:
    TokenBucket() = default;  // unconfigured: unlimited
    TokenBucket(uint64_t rate_bytes_per_sec, uint64_t burst_bytes, uint64_t now_ns = 0)
        : limited_(true), rate_(rate_bytes_per_sec), burst_(burst_bytes), tokens_(burst_bytes),
          last_ns_(now_ns) {}

    bool limited() const { return limited_; }

    uint64_t grant(uint64_t want, uint64_t now_ns) {
        if (!limited_) return want;
        refill(now_ns);
        const uint64_t n = std::min(want, tokens_);
        tokens_ -= n;
        return n;
    }

    uint64_t tokens(uint64_t now_ns) {
        if (!limited_) return ~uint64_t{0};
        refill(now_ns);
        return tokens_;
    }

private:
    void refill(uint64_t now_ns) {
        if (now_ns <= last_ns_) return;
        const uint64_t dt = now_ns - last_ns_;
        const unsigned __int128 accrued = static_cast<unsigned __int128>(dt) * rate_ + carry_ns_rate_;
        tokens_ = std::min<uint64_t>(burst_, tokens_ + static_cast<uint64_t>(accrued / 1'000'000'000ull));
        carry_ns_rate_ = static_cast<uint64_t>(accrued % 1'000'000'000ull);
        last_ns_ = now_ns;
    }

    bool limited_ = false;
    uint64_t rate_ = 0;
    uint64_t burst_ = 0;
    uint64_t tokens_ = 0;
    uint64_t last_ns_ = 0;
    uint64_t carry_ns_rate_ = 0;  // fractional tokens, in units of 1e-9 token
};

}  // namespace tsor
