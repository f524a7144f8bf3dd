#pragma once

#include "types.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace gpsstw
{
    // Per-LP processing statistics and protocol counters.
    struct LpStatistics
    {
        LpId lp = 0;
        std::vector<PartitionIndex> partitions;
        std::uint64_t total_moves = 0;       // every move performed, including re-executions
        std::uint64_t rolled_back_moves = 0; // undone by stragglers, anti-transactions or cancelbacks
        std::uint64_t discarded_moves = 0;   // optimistic moves past the confirmed end, undone at finalize
        std::uint64_t committed_moves = 0;
        std::uint64_t rollback_count = 0;
        std::uint64_t cancelbacks_issued = 0;
        std::uint64_t cancelbacks_received = 0;
        std::uint64_t transactions_sent = 0;
        std::uint64_t antis_sent = 0;
        std::uint64_t lazy_hits = 0; // regenerated sends suppressed by lazy cancellation
        std::uint64_t messages_sent = 0;
        std::uint64_t messages_received = 0;
        std::uint64_t checkpoints_taken = 0;
        std::uint64_t coast_forward_moves = 0;

        friend bool operator==(const LpStatistics &, const LpStatistics &) = default;
    };

    struct PartitionReport
    {
        PartitionIndex partition = 0;
        std::string name;
        std::int64_t termination_counter = 0;
        std::vector<std::uint64_t> block_entries;
        std::uint64_t committed_moves = 0;

        friend bool operator==(const PartitionReport &, const PartitionReport &) = default;
    };

    // Result of one LP's finalize.
    struct LpReport
    {
        LpStatistics stats;
        std::vector<PartitionReport> partitions;
        SimTime clock = 0; // time of the LP's last committed move
    };

    // Schema shared by the sequential and the parallel runner.
    struct FinalReport
    {
        std::vector<PartitionReport> partitions;
        std::uint64_t total_moves = 0; // committed transaction moves
        SimTime final_clock = 0;
        std::optional<OrderKey> end_key;
        bool completed = true; // false when a move budget stopped the run

        // Parallel-run extras; not part of the model outcome.
        std::vector<LpStatistics> lp_stats;
        SimTime final_gvt = 0;
        double wall_seconds = 0.0;
        std::uint64_t gvt_rounds = 0;

        // Model outcome equality: counters, entry counts, move count, clock, end key.
        bool same_outcome(const FinalReport &o) const
        {
            return partitions == o.partitions && total_moves == o.total_moves && final_clock == o.final_clock &&
                   end_key == o.end_key && completed == o.completed;
        }

        // Average simulation performance in simulated time units per wall second.
        double time_units_per_second() const
        {
            return wall_seconds > 0.0 ? static_cast<double>(final_clock) / wall_seconds : 0.0;
        }
    };

    inline nlohmann::json key_to_json(const OrderKey &k)
    {
        return nlohmann::json{{"time", k.time}, {"priority", k.priority}, {"origin", k.origin}, {"sequence", k.sequence},
                              {"hop", k.hop}, {"lineage", k.lineage}};
    }

    inline nlohmann::json stats_to_json(const LpStatistics &s)
    {
        return nlohmann::json{
            {"lp", s.lp},
            {"partitions", s.partitions},
            {"Total transaction moves rolled back", s.rolled_back_moves},
            {"Total simulated transaction moves", s.total_moves},
            {"committed_moves", s.committed_moves},
            {"discarded_moves", s.discarded_moves},
            {"rollback_count", s.rollback_count},
            {"cancelbacks_issued", s.cancelbacks_issued},
            {"cancelbacks_received", s.cancelbacks_received},
            {"transactions_sent", s.transactions_sent},
            {"antis_sent", s.antis_sent},
            {"lazy_hits", s.lazy_hits},
            {"messages_sent", s.messages_sent},
            {"messages_received", s.messages_received},
            {"checkpoints_taken", s.checkpoints_taken},
            {"coast_forward_moves", s.coast_forward_moves},
        };
    }

    inline nlohmann::json report_to_json(const FinalReport &r)
    {
        nlohmann::json j;
        j["completed"] = r.completed;
        j["total_moves"] = r.total_moves;
        j["final_clock"] = r.final_clock;
        j["end_key"] = r.end_key ? key_to_json(*r.end_key) : nlohmann::json(nullptr);
        auto &parts = j["partitions"] = nlohmann::json::array();
        for (const auto &p : r.partitions)
        {
            parts.push_back({{"index", p.partition},
                             {"name", p.name},
                             {"termination_counter", p.termination_counter},
                             {"committed_moves", p.committed_moves},
                             {"block_entries", p.block_entries}});
        }
        auto &lps = j["lps"] = nlohmann::json::array();
        for (const auto &s : r.lp_stats)
        {
            lps.push_back(stats_to_json(s));
        }
        j["final_gvt"] = r.final_gvt;
        j["gvt_rounds"] = r.gvt_rounds;
        j["wall_seconds"] = r.wall_seconds;
        j["time_units_per_second"] = r.time_units_per_second();
        return j;
    }

    inline std::string render_report(const FinalReport &r)
    {
        std::ostringstream os;
        os << "status            " << (r.completed ? "completed" : "stopped before a termination counter reached zero") << '\n';
        os << "final clock       " << r.final_clock << '\n';
        os << "committed moves   " << r.total_moves << '\n';
        if (r.end_key)
        {
            os << "terminating move  " << to_string(*r.end_key) << '\n';
        }
        for (const auto &p : r.partitions)
        {
            os << "partition " << p.partition << " " << p.name << ": termination counter " << p.termination_counter
               << ", committed moves " << p.committed_moves << '\n';
            for (std::size_t b = 0; b < p.block_entries.size(); ++b)
            {
                os << "  block " << b << " entries " << p.block_entries[b] << '\n';
            }
        }
        for (const auto &s : r.lp_stats)
        {
            os << "LP " << s.lp << '\n';
            os << "  Total transaction moves rolled back  " << s.rolled_back_moves << '\n';
            os << "  Total simulated transaction moves    " << s.total_moves << '\n';
            os << "  committed " << s.committed_moves << ", discarded at end " << s.discarded_moves << ", rollbacks "
               << s.rollback_count << ", cancelbacks " << s.cancelbacks_issued << ", antis " << s.antis_sent
               << ", lazy hits " << s.lazy_hits << '\n';
        }
        if (!r.lp_stats.empty())
        {
            os << "GVT rounds " << r.gvt_rounds << ", wall " << r.wall_seconds << " s, "
               << r.time_units_per_second() << " time units/s\n";
        }
        return os.str();
    }
}
