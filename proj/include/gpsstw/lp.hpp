#pragma once

#include "kernel.hpp"
#include "lpcc.hpp"
#include "report.hpp"
#include "types.hpp"
#include "wire.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

namespace gpsstw
{
    enum class LpMode : std::uint8_t
    {
        Running = 0,
        Cancelback = 1,
        ProvisionalEnd = 2,
        Final = 3,
    };

    inline const char *mode_name(LpMode m)
    {
        switch (m)
        {
        case LpMode::Running: return "running";
        case LpMode::Cancelback: return "cancelback";
        case LpMode::ProvisionalEnd: return "provisional_end";
        case LpMode::Final: return "final";
        }
        return "?";
    }

    struct LpConfig
    {
        std::size_t checkpoint_interval = 1;
        // Test-only: cancel every undone send at rollback time instead of lazily.
        bool aggressive_cancellation = false;
        // Cancelback ends once uncommitted moves drop to this fraction of the limit.
        double cancelback_exit_factor = 0.9;
        bool lpcc_enabled = false;
        LpccConfig lpcc;
        // Keep the key and partition of every committed move (tests, debugging).
        bool trace_commits = false;
    };

    struct Checkpoint
    {
        std::optional<OrderKey> at_key; // none: before the first move
        KernelState state;
        std::uint64_t moves_done = 0; // net moves in history when taken
    };

    struct MoveRecord
    {
        OrderKey key;
        PartitionIndex partition = 0;
    };

    // Route identity of a sent copy: which transaction, after which crossings, to whom.
    struct LineageTag
    {
        PartitionIndex origin = 0;
        std::uint64_t sequence = 0;
        std::uint32_t hop = 0;
        std::uint64_t lineage = 0;
        LpId destination = 0;
        friend auto operator<=>(const LineageTag &, const LineageTag &) = default;
    };

    struct SentRecord
    {
        Transaction txn;
        LpId destination = 0;
        OrderKey send_key; // key of the move that produced the departure
        bool pending_lazy = false;
        std::uint64_t msg_id = 0; // TXN message that carried this copy
    };

    struct RollbackStats
    {
        bool performed = false;
        std::uint64_t undone = 0;
        std::uint64_t coasted = 0;
    };

    struct ReceiveOutcome
    {
        bool rolled_back = false;
        bool annihilated = false;
        bool stashed = false;
        bool left_provisional_end = false;
        RollbackStats rollback;
    };

    struct FreedStats
    {
        std::size_t checkpoints = 0;
        std::size_t moves_committed = 0;
        std::size_t sent_records = 0;
        std::size_t received_records = 0;
    };

    enum class SendAction
    {
        Suppressed,
        Transmitted,
        Local,
    };

    enum class StepKind
    {
        Idle,
        Moved,
        Paused,
        Ended,
    };

    struct StepResult
    {
        StepKind kind = StepKind::Idle;
        std::optional<MoveOutcome> move;
        std::size_t cancelled_back = 0;
    };

    // One logical process: a partial model plus Time Warp state. Single-threaded;
    // all interaction goes through handle() and the outbox.
    class LogicalProcess
    {
    public:
        LogicalProcess(LpId id, std::shared_ptr<const ModelProgram> program, std::uint64_t seed,
                       std::vector<LpId> partition_to_lp, LpConfig cfg = {})
            : m_id(id), m_cfg(cfg), m_partition_to_lp(std::move(partition_to_lp)), m_lpcc(cfg.lpcc)
        {
            if (m_partition_to_lp.size() != program->partitions.size())
            {
                throw SimulationError("partition map does not match program");
            }
            if (m_cfg.checkpoint_interval == 0)
            {
                throw SimulationError("checkpoint interval must be >= 1");
            }
            std::vector<bool> owned(program->partitions.size(), false);
            for (PartitionIndex p = 0; p < owned.size(); ++p)
            {
                owned[p] = m_partition_to_lp[p] == id;
                if (owned[p])
                {
                    m_stats.partitions.push_back(p);
                }
            }
            m_stats.lp = id;
            m_committed_by_partition.assign(program->partitions.size(), 0);
            m_state = KernelState(std::move(program), seed, std::move(owned));
            m_checkpoints.push_back(Checkpoint{std::nullopt, m_state.without_arrivals(), 0});
        }

        // --- inspection -----------------------------------------------------

        LpId id() const noexcept { return m_id; }
        LpMode mode() const noexcept { return m_mode; }
        const KernelState &state() const noexcept { return m_state; }
        const LpStatistics &stats() const noexcept { return m_stats; }
        const std::optional<OrderKey> &provisional_end() const noexcept { return m_end_key; }
        const std::optional<OrderKey> &last_move_key() const noexcept { return m_last_key; }
        OrderKey gvt() const noexcept { return m_gvt; }
        const std::deque<Checkpoint> &checkpoints() const noexcept { return m_checkpoints; }
        const std::deque<MoveRecord> &move_records() const noexcept { return m_moves; }
        const std::map<std::pair<OrderKey, LpId>, SentRecord> &sent() const noexcept { return m_sent; }
        const std::map<std::pair<OrderKey, LpId>, Transaction> &received() const noexcept { return m_received; }
        std::size_t stashed_antis() const noexcept { return m_stashed.size(); }
        std::uint64_t orphan_waits() const noexcept { return m_orphan_waits; }
        const std::vector<std::pair<OrderKey, PartitionIndex>> &commit_trace() const noexcept { return m_commit_trace; }
        std::size_t unacked() const noexcept { return m_unacked.size(); }
        const std::deque<EnvelopeMessage> &input_queue() const noexcept { return m_input; }
        const Actuator &actuator() const noexcept { return m_actuator; }
        const Lpcc &lpcc() const noexcept { return m_lpcc; }
        const LpConfig &config() const noexcept { return m_cfg; }

        std::vector<EnvelopeMessage> take_outbox()
        {
            std::vector<EnvelopeMessage> out;
            out.swap(m_outbox);
            return out;
        }

        bool has_outbox() const noexcept { return !m_outbox.empty(); }

        // Performed-but-uncommitted moves plus scheduled ones (chain and input).
        std::uint64_t uncommitted_moves() const
        {
            std::uint64_t input_txns = 0;
            for (const auto &m : m_input)
            {
                input_txns += m.kind() == MessageKind::Txn ? 1 : 0;
            }
            return m_moves.size() + m_state.chain().size() + input_txns;
        }

        // Next unprocessed simulation time (infinite when nothing is scheduled).
        SimTime lvt() const
        {
            SimTime t = m_state.chain().empty() ? kInfiniteTime : m_state.chain().begin()->key.time;
            for (const auto &m : m_input)
            {
                if (const auto *txn = std::get_if<TxnMsg>(&m.payload))
                {
                    t = std::min(t, txn->txn.key.time);
                }
            }
            return t;
        }

        void set_actuator(Actuator a) { m_actuator = a; }

        // --- messages -------------------------------------------------------

        void handle(const EnvelopeMessage &msg)
        {
            std::visit(
                [&](const auto &m)
                {
                    using T = std::decay_t<decltype(m)>;
                    if constexpr (std::is_same_v<T, TxnMsg>)
                    {
                        acknowledge(msg.sender, m.id, m.txn.key);
                        m_input.push_back(msg);
                    }
                    else if constexpr (std::is_same_v<T, AntiMsg>)
                    {
                        acknowledge(msg.sender, m.id, m.key);
                        m_input.push_back(msg);
                    }
                    else if constexpr (std::is_same_v<T, CancelbackMsg>)
                    {
                        // Acknowledged once applied, so any anti-transaction this LP
                        // sends for the returned copy reaches the peer first.
                        m_input.push_back(msg);
                    }
                    else if constexpr (std::is_same_v<T, AckMsg>)
                    {
                        // A cancelback ACK must not overtake anti-transactions still queued.
                        const auto u = m_unacked.find(m.id);
                        if (u != m_unacked.end() && u->second.cancelback && !m_input.empty())
                        {
                            m_input.push_back(msg);
                        }
                        else
                        {
                            on_ack(m);
                        }
                    }
                    else if constexpr (std::is_same_v<T, GvtReqMsg>)
                    {
                        send(kControllerId, GvtRepMsg{m.round, local_gvt_report()});
                        m_in_round = true;
                    }
                    else if constexpr (std::is_same_v<T, GvtBcastMsg>)
                    {
                        m_in_round = false;
                        fossil_collect(m.gvt);
                    }
                    else if constexpr (std::is_same_v<T, EndBcastMsg>)
                    {
                        finalize(m.end_key);
                    }
                    else if constexpr (std::is_same_v<T, ReportReqMsg>)
                    {
                        auto rep = report();
                        send(kControllerId, ReportRepMsg{rep.stats, rep.partitions, rep.clock});
                    }
                    // INIT/START and controller-bound replies are host concerns.
                },
                msg.payload);
        }

        // Applies queued TXN/ANTI/CANCELBACK (and held-back cancelback ACK) messages in arrival order.
        void drain_input()
        {
            while (!m_input.empty())
            {
                auto msg = std::move(m_input.front());
                m_input.pop_front();
                if (m_mode == LpMode::Final &&
                    (std::holds_alternative<TxnMsg>(msg.payload) || std::holds_alternative<AntiMsg>(msg.payload)))
                {
                    continue;
                }
                if (const auto *t = std::get_if<TxnMsg>(&msg.payload))
                {
                    auto txn = t->txn;
                    txn.arrival = msg.sender;
                    receive_transaction(msg.sender, txn, t->id);
                }
                else if (const auto *a = std::get_if<AntiMsg>(&msg.payload))
                {
                    receive_anti_transaction(msg.sender, a->key);
                }
                else if (const auto *c = std::get_if<CancelbackMsg>(&msg.payload))
                {
                    if (m_mode != LpMode::Final)
                    {
                        receive_cancelback(msg.sender, c->key, c->txn_id);
                    }
                    acknowledge(msg.sender, c->id, c->key);
                }
                else if (const auto *k = std::get_if<AckMsg>(&msg.payload))
                {
                    on_ack(*k);
                }
            }
        }

        // --- main loop ------------------------------------------------------

        StepResult step()
        {
            drain_input();
            StepResult res;
            if (m_mode == LpMode::ProvisionalEnd)
            {
                // Nothing past the end is re-executed, so unregenerated sends are
                // cancelled now; a receiver may be holding their copies as orphans.
                flush_pending_before(std::nullopt);
            }
            if (m_mode == LpMode::Final || m_mode == LpMode::ProvisionalEnd)
            {
                res.kind = m_mode == LpMode::Final ? StepKind::Ended : StepKind::Idle;
                return res;
            }

            const auto next = next_movable(m_state);

            if (m_actuator.limit)
            {
                const auto limit = *m_actuator.limit;
                const auto uncommitted = uncommitted_moves();
                if (m_mode == LpMode::Running && uncommitted >= limit)
                {
                    m_mode = LpMode::Cancelback;
                }
                if (m_mode == LpMode::Cancelback)
                {
                    const auto exit_level = static_cast<std::uint64_t>(std::floor(m_cfg.cancelback_exit_factor * static_cast<double>(limit)));
                    if (uncommitted <= exit_level)
                    {
                        m_mode = LpMode::Running;
                    }
                    else
                    {
                        auto victims = cancelback_select(limit);
                        res.cancelled_back = victims.size();
                        if (uncommitted_moves() <= exit_level)
                        {
                            m_mode = LpMode::Running;
                        }
                        // An LP holding the GVT frontier keeps moving so the run cannot stall.
                        const bool at_frontier = next && next->key.time <= m_gvt.time &&
                                                 !m_state.chain().empty() && m_state.chain().begin()->key == next->key;
                        if (m_mode == LpMode::Cancelback && !at_frontier)
                        {
                            res.kind = StepKind::Paused;
                            return res;
                        }
                    }
                }
            }
            else if (m_mode == LpMode::Cancelback)
            {
                m_mode = LpMode::Running;
            }

            const auto txn = next_movable(m_state);
            if (!txn)
            {
                flush_pending_before(std::nullopt);
                res.kind = StepKind::Idle;
                return res;
            }

            flush_pending_before(txn->key);
            if (is_orphan(*txn))
            {
                // Its anti-transaction is on the way; moving it would only feed a zombie chain.
                ++m_orphan_waits;
                res.kind = StepKind::Idle;
                return res;
            }
            const auto partition = txn->location.partition;
            auto out = move_transaction(m_state, *txn);
            ++m_stats.total_moves;
            ++m_net_moves;
            m_moves.push_back(MoveRecord{out.key, partition});
            m_last_key = out.key;

            if (out.departure)
            {
                lazy_compare_on_send(*out.departure, out.key);
            }
            flush_pending_through(out.key);

            if (++m_since_checkpoint >= m_cfg.checkpoint_interval)
            {
                take_checkpoint();
            }

            if (out.termination_hit)
            {
                m_mode = LpMode::ProvisionalEnd;
                m_end_key = out.key;
                m_announce_end = true;
            }

            res.kind = StepKind::Moved;
            res.move = std::move(out);
            return res;
        }

        // True once after entering provisional end; hosts use it to trigger a GVT round.
        bool take_end_announcement()
        {
            const bool b = m_announce_end;
            m_announce_end = false;
            return b;
        }

        // --- Time Warp operations ---------------------------------------------

        ReceiveOutcome receive_transaction(LpId from, Transaction txn, std::uint64_t msg_id = 0)
        {
            ReceiveOutcome out;
            const auto rk = std::make_pair(txn.key, from);
            txn.arrival = from;
            if (auto it = m_stashed.find(rk); it != m_stashed.end())
            {
                m_stashed.erase(it);
                out.annihilated = true;
                return out;
            }
            if (m_received.count(rk))
            {
                throw ProtocolError("duplicate transaction " + to_string(txn.key) + " from LP " + std::to_string(from));
            }
            m_received.emplace(rk, txn);
            m_received_ids[rk] = msg_id;

            if (m_mode == LpMode::ProvisionalEnd && m_end_key && txn.key < *m_end_key)
            {
                m_mode = LpMode::Running;
                m_end_key.reset();
                out.left_provisional_end = true;
            }

            if (m_mode != LpMode::ProvisionalEnd && m_last_key && txn.key < *m_last_key)
            {
                // Straggler: back to the start of its simulation time (never below GVT).
                const auto target = std::max(OrderKey::time_floor(txn.key.time), m_gvt);
                out.rollback = rollback(target);
                out.rolled_back = out.rollback.performed;
            }
            else
            {
                m_state.enqueue(txn);
            }
            return out;
        }

        ReceiveOutcome receive_anti_transaction(LpId from, const OrderKey &key)
        {
            ReceiveOutcome out;
            const auto rk = std::make_pair(key, from);
            if (auto it = m_cancelled_back.find(rk); it != m_cancelled_back.end())
            {
                // Positive already returned to its sender.
                m_cancelled_back.erase(it);
                out.annihilated = true;
                return out;
            }
            auto it = m_received.find(rk);
            if (it == m_received.end())
            {
                m_stashed.insert(rk);
                out.stashed = true;
                return out;
            }
            const bool processed = m_last_key && key <= *m_last_key;
            if (processed)
            {
                if (m_mode == LpMode::ProvisionalEnd && m_end_key && key <= *m_end_key)
                {
                    m_mode = LpMode::Running;
                    m_end_key.reset();
                    out.left_provisional_end = true;
                }
                out.rollback = rollback(key);
                out.rolled_back = out.rollback.performed;
            }
            auto arrival = it->second;
            m_received.erase(it);
            m_received_ids.erase(rk);
            m_state.chain().erase(arrival);
            out.annihilated = true;
            return out;
        }

        // The receiver returned a transaction this LP sent: undo the sending move.
        // `txn_id` names the returned copy; 0 matches any.
        void receive_cancelback(LpId from, const OrderKey &key, std::uint64_t txn_id = 0)
        {
            ++m_stats.cancelbacks_received;
            auto it = m_sent.find({key, from});
            if (it == m_sent.end() || (txn_id != 0 && it->second.msg_id != txn_id))
            {
                return; // that copy was already cancelled by an anti-transaction
            }
            const auto send_key = it->second.send_key;
            erase_sent(it);
            if (m_mode == LpMode::ProvisionalEnd && m_end_key && send_key <= *m_end_key)
            {
                m_mode = LpMode::Running;
                m_end_key.reset();
            }
            rollback(send_key);
        }

        // Undo every move with key >= target and re-create the state just before it.
        RollbackStats rollback(const OrderKey &target) { return rollback_impl(target, false); }

        SendAction lazy_compare_on_send(const Departure &dep, const OrderKey &send_key)
        {
            const LpId dest = m_partition_to_lp.at(dep.destination);
            if (dest == m_id)
            {
                throw SimulationError("departure to a locally owned partition");
            }
            const auto rk = std::make_pair(dep.txn.key, dest);
            auto it = m_sent.find(rk);
            if (it != m_sent.end())
            {
                if (!it->second.pending_lazy)
                {
                    throw SimulationError("second live send of " + to_string(dep.txn.key));
                }
                if (it->second.send_key == send_key && it->second.txn == dep.txn)
                {
                    m_pending.erase({it->second.send_key, rk.first, rk.second});
                    it->second.pending_lazy = false;
                    ++m_stats.lazy_hits;
                    return SendAction::Suppressed;
                }
                emit_anti(it);
            }
            m_cancelled_sends.erase(lineage_tag(rk.first, dest));
            SentRecord rec{dep.txn, dest, send_key, false};
            rec.txn.arrival = kLocalOrigin;
            const auto id = next_id();
            rec.msg_id = id;
            m_unacked.emplace(id, Unacked{dep.txn.key, std::nullopt});
            send(dest, TxnMsg{id, rec.txn});
            m_sent.emplace(rk, std::move(rec));
            ++m_stats.transactions_sent;
            return SendAction::Transmitted;
        }

        FreedStats fossil_collect(const OrderKey &gvt)
        {
            FreedStats freed;
            if (gvt > m_gvt)
            {
                m_gvt = gvt;
            }
            // Latest checkpoint strictly before GVT stays; older ones go.
            std::size_t keep = 0;
            for (std::size_t i = 0; i < m_checkpoints.size(); ++i)
            {
                const auto &cp = m_checkpoints[i];
                if (!cp.at_key || *cp.at_key < m_gvt)
                {
                    keep = i;
                }
                else
                {
                    break;
                }
            }
            for (std::size_t i = 0; i < keep; ++i)
            {
                m_checkpoints.pop_front();
                ++freed.checkpoints;
            }
            while (!m_moves.empty() && m_moves.front().key < m_gvt)
            {
                commit_front();
                ++freed.moves_committed;
            }
            for (auto it = m_sent.begin(); it != m_sent.end();)
            {
                if (!it->second.pending_lazy && it->second.send_key < m_gvt)
                {
                    it = m_sent.erase(it);
                    ++freed.sent_records;
                }
                else
                {
                    ++it;
                }
            }
            std::erase_if(m_cancelled_sends, [this](const auto &e) { return e.second < m_gvt; });
            const auto &base = m_checkpoints.front().at_key;
            if (base)
            {
                for (auto it = m_received.begin(); it != m_received.end() && !(*base < it->first.first);)
                {
                    m_received_ids.erase(it->first);
                    it = m_received.erase(it);
                    ++freed.received_records;
                }
            }
            return freed;
        }

        GvtLocalReport local_gvt_report()
        {
            GvtLocalReport r;
            OrderKey lb = OrderKey::max();
            auto consider = [&](const OrderKey &k)
            {
                if (k < lb)
                {
                    lb = k;
                }
            };
            const bool provisional = m_mode == LpMode::ProvisionalEnd && m_end_key;
            for (const auto &t : m_state.chain())
            {
                if (!provisional || t.key < *m_end_key)
                {
                    consider(t.key);
                }
                break; // chain is ordered; the first element is its minimum
            }
            for (const auto &[send_key, dep_key, dest] : m_pending)
            {
                if (!provisional || send_key < *m_end_key)
                {
                    consider(send_key);
                }
                break;
            }
            for (const auto &m : m_input)
            {
                if (const auto *t = std::get_if<TxnMsg>(&m.payload))
                {
                    consider(t->txn.key);
                }
                else if (const auto *a = std::get_if<AntiMsg>(&m.payload))
                {
                    consider(a->key);
                }
                else if (const auto *c = std::get_if<CancelbackMsg>(&m.payload))
                {
                    consider(OrderKey::time_floor(c->key.time));
                }
            }
            for (const auto &[id, u] : m_unacked)
            {
                consider(u.key);
            }
            consider(m_marked_min);
            m_marked_min = OrderKey::max();

            r.lower_bound = lb;
            if (provisional)
            {
                r.provisional_end = m_end_key;
            }
            r.mode = static_cast<std::uint8_t>(m_mode);
            r.lvt = provisional ? kInfiniteTime : lvt();
            r.committed_moves = m_stats.committed_moves;
            r.rolled_back_moves = m_stats.rolled_back_moves;
            r.rollback_count = m_stats.rollback_count;
            r.cancelbacks_issued = m_stats.cancelbacks_issued;
            r.uncommitted_moves = uncommitted_moves();
            if (const auto &v = m_lpcc.last_indicators())
            {
                r.committed_rate = v->committed_rate;
                r.avg_uncommitted = v->avg_uncommitted;
            }
            r.actuator = m_actuator.limit;
            r.lpcc_ticks = m_lpcc.ticks();
            return r;
        }

        // Rolls back everything after the confirmed end and commits the rest.
        LpReport finalize(const std::optional<OrderKey> &end_key)
        {
            if (m_mode != LpMode::Final)
            {
                drain_input();
                if (end_key && m_last_key && *end_key < *m_last_key)
                {
                    rollback_impl(end_key->successor(), true);
                }
                while (!m_moves.empty())
                {
                    commit_front();
                }
                m_mode = LpMode::Final;
                m_end_key = end_key;
            }
            return report();
        }

        LpReport report() const
        {
            LpReport r;
            r.stats = m_stats;
            r.clock = m_state.clock();
            for (auto p : m_stats.partitions)
            {
                r.partitions.push_back(partition_report(m_state, p, m_committed_by_partition[p]));
            }
            return r;
        }

        // Picks received, unprocessed transactions (latest first) to return to
        // their senders until uncommitted moves are back under the exit level.
        std::vector<Transaction> cancelback_select(std::uint64_t limit)
        {
            std::vector<Transaction> victims;
            const auto exit_level = static_cast<std::uint64_t>(std::floor(m_cfg.cancelback_exit_factor * static_cast<double>(limit)));
            auto projected = uncommitted_moves();
            auto &chain = m_state.chain();
            for (auto it = chain.rbegin(); it != chain.rend() && projected > exit_level;)
            {
                const auto &t = *it;
                // Same-time sends may already be committed at the sender.
                if (t.arrival == kLocalOrigin || t.key.time <= m_gvt.time)
                {
                    ++it;
                    continue;
                }
                victims.push_back(t);
                --projected;
                ++it;
            }
            for (const auto &v : victims)
            {
                const auto from = static_cast<LpId>(v.arrival);
                const auto rk = std::make_pair(v.key, from);
                chain.erase(v);
                const auto txn_id = m_received_ids[rk];
                m_received.erase(rk);
                m_received_ids.erase(rk);
                const auto id = next_id();
                m_cancelled_back.insert_or_assign(rk, id);
                m_unacked.emplace(id, Unacked{OrderKey::time_floor(v.key.time), rk});
                send(from, CancelbackMsg{id, v.key, txn_id});
                ++m_stats.cancelbacks_issued;
            }
            return victims;
        }

        // --- LPCC hooks (driven by the host's clock) ----------------------------

        SensorSnapshot sensors(double wall_ms) const
        {
            SensorSnapshot s;
            s.wall_clock_ms = wall_ms;
            s.committed_moves_cum = m_stats.committed_moves;
            s.rolled_back_moves_cum = m_stats.rolled_back_moves;
            s.rollback_count_cum = m_stats.rollback_count;
            s.uncommitted_moves_now = uncommitted_moves();
            s.messages_sent_cum = m_stats.messages_sent;
            s.messages_received_cum = m_stats.messages_received;
            return s;
        }

        void lpcc_sample() { m_lpcc.sample(uncommitted_moves()); }

        void lpcc_tick(double wall_ms)
        {
            if (!m_cfg.lpcc_enabled)
            {
                return;
            }
            m_actuator = m_lpcc.tick(sensors(wall_ms));
        }

    private:
        struct Unacked
        {
            OrderKey key;
            std::optional<std::pair<OrderKey, LpId>> cancelback;
        };

        std::uint64_t next_id() { return ++m_last_id; }

        template <class P>
        void send(LpId to, P payload)
        {
            EnvelopeMessage m;
            m.sender = m_id;
            m.receiver = to;
            m.payload = std::move(payload);
            m_outbox.push_back(std::move(m));
            ++m_stats.messages_sent;
        }

        void acknowledge(LpId to, std::uint64_t id, const OrderKey &key)
        {
            ++m_stats.messages_received;
            send(to, AckMsg{id, m_in_round, key});
            // ACKs are bookkeeping, not simulation traffic.
            --m_stats.messages_sent;
        }

        void on_ack(const AckMsg &ack)
        {
            auto it = m_unacked.find(ack.id);
            if (it == m_unacked.end())
            {
                throw ProtocolError("ACK for unknown message " + std::to_string(ack.id));
            }
            if (ack.marked && it->second.key < m_marked_min)
            {
                m_marked_min = it->second.key;
            }
            if (it->second.cancelback)
            {
                // Any racing anti-transaction was ahead of this ACK on the channel.
                // A newer cancelback of the same key keeps its own entry.
                auto cb = m_cancelled_back.find(*it->second.cancelback);
                if (cb != m_cancelled_back.end() && cb->second == ack.id)
                {
                    m_cancelled_back.erase(cb);
                }
            }
            m_unacked.erase(it);
        }

        static LineageTag lineage_tag(const OrderKey &k, LpId dest)
        {
            return LineageTag{k.origin, k.sequence, k.hop, k.lineage, dest};
        }

        // A received copy whose predecessor this LP sent to the same LP and has
        // since cancelled.
        bool is_orphan(const Transaction &t) const
        {
            if (t.arrival == kLocalOrigin || t.key.hop == 0)
            {
                return false;
            }
            return m_cancelled_sends.count(LineageTag{t.key.origin, t.key.sequence, t.key.hop - 1, t.parent_lineage,
                                                      static_cast<LpId>(t.arrival)}) != 0;
        }

        void commit_front()
        {
            const auto &rec = m_moves.front();
            ++m_stats.committed_moves;
            ++m_committed_by_partition[rec.partition];
            if (m_cfg.trace_commits)
            {
                m_commit_trace.emplace_back(rec.key, rec.partition);
            }
            m_last_committed_key = rec.key;
            m_moves.pop_front();
        }

        void take_checkpoint()
        {
            m_checkpoints.push_back(Checkpoint{m_last_key, m_state.without_arrivals(), m_net_moves});
            m_since_checkpoint = 0;
            ++m_stats.checkpoints_taken;
        }

        void erase_sent(std::map<std::pair<OrderKey, LpId>, SentRecord>::iterator it)
        {
            if (it->second.pending_lazy)
            {
                m_pending.erase({it->second.send_key, it->first.first, it->first.second});
            }
            m_sent.erase(it);
        }

        void emit_anti(std::map<std::pair<OrderKey, LpId>, SentRecord>::iterator it)
        {
            const auto id = next_id();
            m_unacked.emplace(id, Unacked{it->first.first, std::nullopt});
            send(it->second.destination, AntiMsg{id, it->first.first});
            ++m_stats.antis_sent;
            m_cancelled_sends.insert_or_assign(lineage_tag(it->first.first, it->first.second), it->first.first);
            erase_sent(it);
        }

        // Pending-lazy sends whose sending move lies before `key` were not
        // regenerated: cancel them. nullopt cancels all.
        void flush_pending_before(const std::optional<OrderKey> &key)
        {
            while (!m_pending.empty())
            {
                const auto [send_key, dep_key, dest] = *m_pending.begin();
                if (key && !(send_key < *key))
                {
                    break;
                }
                emit_anti(m_sent.find({dep_key, dest}));
            }
        }

        void flush_pending_through(const OrderKey &key)
        {
            while (!m_pending.empty())
            {
                const auto [send_key, dep_key, dest] = *m_pending.begin();
                if (key < send_key)
                {
                    break;
                }
                emit_anti(m_sent.find({dep_key, dest}));
            }
        }

        RollbackStats rollback_impl(const OrderKey &target, bool discard)
        {
            RollbackStats rs;
            if (!m_last_key || *m_last_key < target)
            {
                return rs;
            }
            if (target < m_gvt && !discard)
            {
                throw SimulationError("rollback below GVT: target " + to_string(target) + " gvt " + to_string(m_gvt));
            }

            while (!m_moves.empty() && !(m_moves.back().key < target))
            {
                m_moves.pop_back();
                --m_net_moves;
                ++rs.undone;
            }
            if (m_last_committed_key && !(*m_last_committed_key < target))
            {
                throw SimulationError("rollback would undo committed moves");
            }

            while (!m_checkpoints.empty() && m_checkpoints.back().at_key && !(*m_checkpoints.back().at_key < target))
            {
                m_checkpoints.pop_back();
            }
            if (m_checkpoints.empty())
            {
                throw SimulationError("no checkpoint early enough for rollback to " + to_string(target));
            }
            const auto &cp = m_checkpoints.back();
            m_state = cp.state;

            // Received transactions after the checkpoint go back into the chain.
            auto from = cp.at_key ? m_received.upper_bound({*cp.at_key, std::numeric_limits<LpId>::max()})
                                  : m_received.begin();
            for (auto it = from; it != m_received.end(); ++it)
            {
                if (cp.at_key && !(*cp.at_key < it->first.first))
                {
                    continue;
                }
                m_state.enqueue(it->second);
            }

            // Coast forward to the target with external effects suppressed.
            std::optional<OrderKey> last = cp.at_key;
            while (auto nx = next_movable(m_state, target))
            {
                move_transaction(m_state, *nx);
                last = nx->key;
                ++rs.coasted;
            }
            if (rs.coasted != m_net_moves - cp.moves_done)
            {
                throw SimulationError("coast-forward replayed " + std::to_string(rs.coasted) + " moves, expected " +
                                      std::to_string(m_net_moves - cp.moves_done));
            }
            m_stats.coast_forward_moves += rs.coasted;
            m_since_checkpoint = static_cast<std::size_t>(rs.coasted);
            if (m_since_checkpoint >= m_cfg.checkpoint_interval)
            {
                m_checkpoints.push_back(Checkpoint{last, m_state.without_arrivals(), m_net_moves});
                m_since_checkpoint = 0;
            }
            m_last_key = m_moves.empty() ? m_last_committed_key : std::optional<OrderKey>(m_moves.back().key);

            if (discard)
            {
                m_stats.discarded_moves += rs.undone;
            }
            else
            {
                m_stats.rolled_back_moves += rs.undone;
                ++m_stats.rollback_count;
                for (auto it = m_sent.begin(); it != m_sent.end();)
                {
                    auto cur = it++;
                    auto &rec = cur->second;
                    if (rec.pending_lazy || rec.send_key < target)
                    {
                        continue;
                    }
                    if (m_cfg.aggressive_cancellation)
                    {
                        emit_anti(cur);
                    }
                    else
                    {
                        rec.pending_lazy = true;
                        m_pending.insert({rec.send_key, cur->first.first, cur->first.second});
                    }
                }
            }
            rs.performed = true;
            return rs;
        }

        LpId m_id;
        LpConfig m_cfg;
        std::vector<LpId> m_partition_to_lp;
        KernelState m_state;
        LpMode m_mode = LpMode::Running;
        std::optional<OrderKey> m_end_key;
        bool m_announce_end = false;

        std::deque<Checkpoint> m_checkpoints;
        std::deque<MoveRecord> m_moves; // uncommitted performed moves, ascending
        std::optional<OrderKey> m_last_key;
        std::optional<OrderKey> m_last_committed_key;
        std::uint64_t m_net_moves = 0;
        std::size_t m_since_checkpoint = 0;
        std::vector<std::uint64_t> m_committed_by_partition;

        std::map<std::pair<OrderKey, LpId>, SentRecord> m_sent;
        std::set<std::tuple<OrderKey, OrderKey, LpId>> m_pending; // (send key, departure key, destination)
        std::map<std::pair<OrderKey, LpId>, Transaction> m_received;
        std::map<std::pair<OrderKey, LpId>, std::uint64_t> m_received_ids;
        std::vector<std::pair<OrderKey, PartitionIndex>> m_commit_trace;
        std::set<std::pair<OrderKey, LpId>> m_stashed;
        // Cancelled sends by route, independent of the time the copy was sent at.
        std::map<LineageTag, OrderKey> m_cancelled_sends;
        std::uint64_t m_orphan_waits = 0;
        std::map<std::pair<OrderKey, LpId>, std::uint64_t> m_cancelled_back;
        std::map<std::uint64_t, Unacked> m_unacked;
        std::deque<EnvelopeMessage> m_input;

        OrderKey m_gvt = OrderKey::min();
        bool m_in_round = false;
        OrderKey m_marked_min = OrderKey::max();

        Actuator m_actuator;
        Lpcc m_lpcc;
        LpStatistics m_stats;
        std::uint64_t m_last_id = 0;
        std::vector<EnvelopeMessage> m_outbox;
    };
}
