#pragma once

#include "types.hpp"

#include <cstdint>

namespace gpsstw
{
    // SplitMix64 finalizer.
    inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept
    {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    // Counter-based stream: the n-th draw is a pure function of (seed, partition,
    // block, n), so a restored draw counter replays the exact same values.
    class RngStream
    {
    public:
        constexpr RngStream() noexcept = default;

        constexpr RngStream(std::uint64_t seed, PartitionIndex partition, BlockIndex block, std::uint64_t draws = 0) noexcept
            : m_base(derive(seed, partition, block)), m_draws(draws)
        {
        }

        static constexpr std::uint64_t derive(std::uint64_t seed, PartitionIndex partition, BlockIndex block) noexcept
        {
            std::uint64_t h = mix64(seed + kGolden);
            h = mix64(h ^ (static_cast<std::uint64_t>(partition) + 1) * kGolden);
            h = mix64(h ^ (static_cast<std::uint64_t>(block) + 1) * 0xD6E8FEB86659FD93ull);
            return h;
        }

        constexpr std::uint64_t next_u64() noexcept
        {
            ++m_draws;
            return mix64(m_base + m_draws * kGolden);
        }

        // Uniform integer in [lo, hi].
        constexpr std::uint64_t uniform(std::uint64_t lo, std::uint64_t hi) noexcept
        {
            const std::uint64_t x = next_u64();
            const std::uint64_t span = hi - lo;
            if (span == ~std::uint64_t{0})
            {
                return x;
            }
            const unsigned __int128 m = static_cast<unsigned __int128>(x) * (span + 1);
            return lo + static_cast<std::uint64_t>(m >> 64);
        }

        // Uniform double in [0, 1).
        constexpr double unit() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

        constexpr std::uint64_t draws() const noexcept { return m_draws; }

        friend constexpr bool operator==(const RngStream &, const RngStream &) noexcept = default;

    private:
        std::uint64_t m_base = 0;
        std::uint64_t m_draws = 0;
    };

    // Uniform integer interval in [mean - half_range, mean + half_range]; always
    // consumes exactly one draw.
    inline constexpr SimTime sample_interval(RngStream &stream, SimTime mean, SimTime half_range) noexcept
    {
        return static_cast<SimTime>(stream.uniform(mean - half_range, mean + half_range));
    }
}
