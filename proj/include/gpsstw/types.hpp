#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

namespace gpsstw
{
    // Simulation clock in integer ticks.
    using SimTime = std::uint64_t;

    inline constexpr SimTime kInfiniteTime = std::numeric_limits<SimTime>::max();

    using PartitionIndex = std::uint32_t;
    using BlockIndex = std::uint32_t;
    using LpId = std::uint16_t;

    inline constexpr LpId kControllerId = 0xFFFF;

    // Total order over transaction moves.
    //
    // time ascending, priority descending, origin partition ascending, creation
    // sequence ascending, hop ascending. (origin, sequence) names a transaction;
    // `time` is the simulation time of the move and `hop` counts partition
    // crossings, so a transaction that leaves and comes back at the same time
    // still orders after the move that sent it away. `lineage` hashes the
    // crossing history; it only separates speculative copies of one transaction
    // that took different routes and would otherwise collide.
    struct OrderKey
    {
        SimTime time = 0;
        std::int32_t priority = 0;
        PartitionIndex origin = 0;
        std::uint64_t sequence = 0;
        std::uint32_t hop = 0;
        std::uint64_t lineage = 0;

        static constexpr OrderKey min() noexcept
        {
            return OrderKey{0, std::numeric_limits<std::int32_t>::max(), 0, 0, 0, 0};
        }

        static constexpr OrderKey max() noexcept
        {
            return OrderKey{kInfiniteTime, std::numeric_limits<std::int32_t>::min(),
                            std::numeric_limits<PartitionIndex>::max(),
                            std::numeric_limits<std::uint64_t>::max(),
                            std::numeric_limits<std::uint32_t>::max(),
                            std::numeric_limits<std::uint64_t>::max()};
        }

        // Smallest key strictly greater than this one.
        constexpr OrderKey successor() const noexcept
        {
            OrderKey k = *this;
            if (k.lineage != std::numeric_limits<std::uint64_t>::max())
            {
                ++k.lineage;
            }
            else
            {
                k.lineage = 0;
                ++k.hop;
            }
            return k;
        }

        // Smallest key at a given simulation time.
        static constexpr OrderKey time_floor(SimTime t) noexcept
        {
            OrderKey k = min();
            k.time = t;
            return k;
        }

        constexpr bool is_infinite() const noexcept { return time == kInfiniteTime; }

        // Same transaction (ignores when and where it is).
        constexpr bool same_transaction(const OrderKey &o) const noexcept
        {
            return origin == o.origin && sequence == o.sequence;
        }

        friend constexpr std::strong_ordering operator<=>(const OrderKey &a, const OrderKey &b) noexcept
        {
            if (auto c = a.time <=> b.time; c != 0)
            {
                return c;
            }
            if (auto c = b.priority <=> a.priority; c != 0)
            {
                return c;
            }
            if (auto c = a.origin <=> b.origin; c != 0)
            {
                return c;
            }
            if (auto c = a.sequence <=> b.sequence; c != 0)
            {
                return c;
            }
            if (auto c = a.hop <=> b.hop; c != 0)
            {
                return c;
            }
            return a.lineage <=> b.lineage;
        }

        friend constexpr bool operator==(const OrderKey &, const OrderKey &) noexcept = default;
    };

    inline std::string to_string(const OrderKey &k)
    {
        if (k.is_infinite())
        {
            return "(inf)";
        }
        return "(" + std::to_string(k.time) + "," + std::to_string(k.priority) + "," + std::to_string(k.origin) + "," +
               std::to_string(k.sequence) + "," + std::to_string(k.hop) + ")";
    }

    inline std::ostream &operator<<(std::ostream &os, const OrderKey &k) { return os << to_string(k); }

    struct Location
    {
        PartitionIndex partition = 0;
        BlockIndex block = 0;

        friend constexpr bool operator==(const Location &, const Location &) noexcept = default;
    };

    // Errors that indicate a broken simulation invariant or protocol violation.
    class SimulationError : public std::runtime_error
    {
    public:
        using std::runtime_error::runtime_error;
    };

    class ProtocolError : public SimulationError
    {
    public:
        using SimulationError::SimulationError;
    };
}
