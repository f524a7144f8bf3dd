#pragma once

#include "report.hpp"
#include "types.hpp"
#include "wire.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <vector>

namespace gpsstw
{
    struct GvtRound
    {
        std::uint32_t round = 0;
        std::vector<GvtLocalReport> reports; // indexed by LP id
        OrderKey gvt = OrderKey::max();
        std::vector<std::pair<LpId, OrderKey>> provisional_ends;
    };

    struct EndDecision
    {
        OrderKey end_key;
        LpId lp = 0;
        friend bool operator==(const EndDecision &, const EndDecision &) = default;
    };

    // Fills gvt and provisional_ends from the collected reports. GVT is the
    // smallest key at the earliest time anything can still change.
    inline void compute_gvt(GvtRound &round)
    {
        round.gvt = OrderKey::max();
        round.provisional_ends.clear();
        for (std::size_t lp = 0; lp < round.reports.size(); ++lp)
        {
            const auto &r = round.reports[lp];
            round.gvt = std::min(round.gvt, r.lower_bound);
            if (r.provisional_end)
            {
                round.provisional_ends.emplace_back(static_cast<LpId>(lp), *r.provisional_end);
            }
        }
        // Stragglers roll back to the start of their time, so only whole earlier
        // times are safe to commit.
        if (!round.gvt.is_infinite())
        {
            round.gvt = OrderKey::time_floor(round.gvt.time);
        }
    }

    // The earliest provisional end, once nothing left in the system can precede it.
    inline std::optional<EndDecision> confirm_end(const GvtRound &round)
    {
        std::optional<EndDecision> best;
        for (const auto &[lp, key] : round.provisional_ends)
        {
            if (!best || key < best->end_key)
            {
                best = EndDecision{key, lp};
            }
        }
        if (best && best->end_key < round.gvt)
        {
            return best;
        }
        return std::nullopt;
    }

    // Key to broadcast: never past a pending provisional end, so that moves an
    // end might still discard are not committed early.
    inline OrderKey commit_horizon(const GvtRound &round)
    {
        auto k = round.gvt;
        for (const auto &[lp, key] : round.provisional_ends)
        {
            k = std::min(k, key);
        }
        return k;
    }

    inline FinalReport merge_reports(const std::vector<LpReport> &reports, std::size_t partition_count,
                                     const std::optional<OrderKey> &end_key)
    {
        FinalReport out;
        std::vector<std::optional<PartitionReport>> parts(partition_count);
        for (const auto &lp : reports)
        {
            for (const auto &p : lp.partitions)
            {
                if (p.partition >= partition_count || parts[p.partition])
                {
                    throw SimulationError("merge: unexpected report for partition " + std::to_string(p.partition));
                }
                parts[p.partition] = p;
            }
            out.final_clock = std::max(out.final_clock, lp.clock);
            out.lp_stats.push_back(lp.stats);
        }
        for (std::size_t p = 0; p < partition_count; ++p)
        {
            if (!parts[p])
            {
                throw SimulationError("merge: missing report for partition " + std::to_string(p));
            }
            out.total_moves += parts[p]->committed_moves;
            out.partitions.push_back(std::move(*parts[p]));
        }
        std::sort(out.lp_stats.begin(), out.lp_stats.end(),
                  [](const LpStatistics &a, const LpStatistics &b) { return a.lp < b.lp; });
        out.end_key = end_key;
        out.completed = end_key.has_value();
        return out;
    }

    // Message-driven controller state machine. The host delivers messages and
    // ships the outbox; it decides when to open a round.
    class Controller
    {
    public:
        enum class Phase
        {
            Running,
            Finalizing,
            Done,
        };

        Controller(std::size_t lp_count, std::size_t partition_count)
            : m_lp_count(lp_count), m_partition_count(partition_count)
        {
        }

        Phase phase() const noexcept { return m_phase; }
        bool done() const noexcept { return m_phase == Phase::Done; }
        bool round_open() const noexcept { return m_open.has_value(); }
        const std::vector<GvtRound> &history() const noexcept { return m_history; }
        const std::optional<EndDecision> &decision() const noexcept { return m_decision; }
        const OrderKey &last_gvt() const noexcept { return m_last_gvt; }

        // Set when an LP announced a provisional end since the last round opened.
        bool round_wanted() const noexcept { return m_wanted; }

        std::function<void(const GvtRound &)> on_round;

        std::vector<EnvelopeMessage> take_outbox()
        {
            std::vector<EnvelopeMessage> out;
            out.swap(m_outbox);
            return out;
        }

        void start_round()
        {
            if (m_open || m_phase != Phase::Running)
            {
                return;
            }
            m_wanted = false;
            GvtRound r;
            r.round = ++m_round;
            r.reports.resize(m_lp_count);
            m_open = std::move(r);
            m_received.assign(m_lp_count, false);
            m_pending = m_lp_count;
            broadcast(GvtReqMsg{m_round});
        }

        // Ends the run without a confirmed end (quiescence).
        void request_final(const std::optional<OrderKey> &end_key)
        {
            if (m_phase != Phase::Running)
            {
                return;
            }
            m_phase = Phase::Finalizing;
            m_open.reset();
            m_end_key = end_key;
            broadcast(EndBcastMsg{end_key});
            broadcast(ReportReqMsg{});
            m_reports.assign(m_lp_count, std::nullopt);
            m_pending = m_lp_count;
        }

        void handle(const EnvelopeMessage &msg)
        {
            if (msg.sender >= m_lp_count)
            {
                throw ProtocolError("controller: message from unknown LP " + std::to_string(msg.sender));
            }
            if (const auto *rep = std::get_if<GvtRepMsg>(&msg.payload))
            {
                if (rep->round == 0)
                {
                    m_wanted = true; // provisional end announcement
                    return;
                }
                if (m_phase != Phase::Running || !m_open || rep->round != m_open->round || m_received[msg.sender])
                {
                    return; // stale round
                }
                m_received[msg.sender] = true;
                m_open->reports[msg.sender] = rep->report;
                if (--m_pending == 0)
                {
                    complete_round();
                }
            }
            else if (const auto *rr = std::get_if<ReportRepMsg>(&msg.payload))
            {
                if (m_phase != Phase::Finalizing || m_reports[msg.sender])
                {
                    throw ProtocolError("controller: unexpected REPORT_REP");
                }
                m_reports[msg.sender] = LpReport{rr->stats, rr->partitions, rr->clock};
                if (--m_pending == 0)
                {
                    std::vector<LpReport> all;
                    for (auto &r : m_reports)
                    {
                        all.push_back(std::move(*r));
                    }
                    m_result = merge_reports(all, m_partition_count, m_end_key);
                    m_result.final_gvt = m_last_gvt.is_infinite() ? m_result.final_clock : m_last_gvt.time;
                    m_result.gvt_rounds = m_history.size();
                    m_phase = Phase::Done;
                }
            }
            else
            {
                throw ProtocolError(std::string("controller: unexpected ") + kind_name(msg.kind()));
            }
        }

        const FinalReport &result() const { return m_result; }

    private:
        template <class P>
        void broadcast(const P &payload)
        {
            for (std::size_t lp = 0; lp < m_lp_count; ++lp)
            {
                EnvelopeMessage m;
                m.sender = kControllerId;
                m.receiver = static_cast<LpId>(lp);
                m.payload = payload;
                m_outbox.push_back(std::move(m));
            }
        }

        void complete_round()
        {
            auto round = std::move(*m_open);
            m_open.reset();
            compute_gvt(round);
            if (!m_history.empty() && round.gvt < m_history.back().gvt)
            {
                throw SimulationError("GVT decreased from " + to_string(m_history.back().gvt) + " to " +
                                      to_string(round.gvt));
            }
            const auto horizon = commit_horizon(round);
            if (m_last_gvt < horizon)
            {
                m_last_gvt = horizon;
            }
            broadcast(GvtBcastMsg{round.round, horizon});
            m_decision = confirm_end(round);
            m_history.push_back(round);
            if (on_round)
            {
                on_round(m_history.back());
            }
            if (m_decision)
            {
                request_final(m_decision->end_key);
            }
            else if (round.gvt.is_infinite())
            {
                request_final(std::nullopt);
            }
        }

        std::size_t m_lp_count;
        std::size_t m_partition_count;
        Phase m_phase = Phase::Running;
        std::uint32_t m_round = 0;
        std::optional<GvtRound> m_open;
        std::vector<bool> m_received;
        std::size_t m_pending = 0;
        bool m_wanted = false;
        std::vector<GvtRound> m_history;
        std::optional<EndDecision> m_decision;
        std::optional<OrderKey> m_end_key;
        OrderKey m_last_gvt = OrderKey::min();
        std::vector<std::optional<LpReport>> m_reports;
        FinalReport m_result;
        std::vector<EnvelopeMessage> m_outbox;
    };
}
