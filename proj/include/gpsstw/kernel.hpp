#pragma once

#include "model.hpp"
#include "report.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <memory>
#include <optional>
#include <set>
#include <vector>

namespace gpsstw
{
    inline constexpr std::size_t kMaxBlocksPerMove = 10000;

    // Sentinel for Transaction::arrival when the transaction is locally produced.
    inline constexpr std::int32_t kLocalOrigin = -1;

    struct Transaction
    {
        OrderKey key; // key.time is the transaction's current time
        SimTime created = 0;
        Location location;
        // Sender LP while the transaction sits in a chain as a just-received message.
        std::int32_t arrival = kLocalOrigin;
        std::uint64_t parent_lineage = 0; // key.lineage before the last crossing

        SimTime current_time() const noexcept { return key.time; }

        friend bool operator==(const Transaction &, const Transaction &) = default;
    };

    struct ChainOrder
    {
        bool operator()(const Transaction &a, const Transaction &b) const noexcept
        {
            if (a.key != b.key)
            {
                return a.key < b.key;
            }
            return a.arrival < b.arrival;
        }
    };

    using FutureChain = std::set<Transaction, ChainOrder>;

    struct Departure
    {
        Transaction txn;
        PartitionIndex destination = 0;
    };

    struct MoveOutcome
    {
        OrderKey key;
        std::vector<Location> blocks_entered;
        std::size_t rng_draws = 0;
        std::vector<std::pair<PartitionIndex, std::int64_t>> counter_deltas;
        std::optional<Departure> departure; // to a partition this state does not own
        bool destroyed = false;
        bool rescheduled = false;
        std::optional<PartitionIndex> termination_hit; // counter driven from > 0 to <= 0
    };

    // Partial (or whole) model state: the clock, the transaction chain, block
    // counters and RNG streams of the owned partitions. Deep-copyable; copies share
    // the immutable program.
    class KernelState
    {
    public:
        KernelState() = default;

        KernelState(std::shared_ptr<const ModelProgram> program, std::uint64_t seed, std::vector<bool> owned = {})
            : m_program(std::move(program)), m_seed(seed)
        {
            const auto &prog = *m_program;
            const auto n = prog.partitions.size();
            m_owned = owned.empty() ? std::vector<bool>(n, true) : std::move(owned);
            if (m_owned.size() != n)
            {
                throw SimulationError("ownership mask does not match partition count");
            }
            m_counters.resize(n);
            m_entries.resize(n);
            m_rng.resize(n);
            m_generated.resize(n);
            m_created.assign(n, 0);
            for (PartitionIndex p = 0; p < n; ++p)
            {
                const auto &part = prog.partitions[p];
                m_counters[p] = part.termination_start;
                m_entries[p].assign(part.blocks.size(), 0);
                m_generated[p].assign(part.blocks.size(), 0);
                m_rng[p].reserve(part.blocks.size());
                for (BlockIndex b = 0; b < part.blocks.size(); ++b)
                {
                    m_rng[p].emplace_back(seed, p, b);
                }
            }
            for (PartitionIndex p = 0; p < n; ++p)
            {
                if (!m_owned[p])
                {
                    continue;
                }
                const auto &part = prog.partitions[p];
                for (BlockIndex b = 0; b < part.blocks.size(); ++b)
                {
                    if (const auto *g = std::get_if<Generate>(&part.blocks[b].op))
                    {
                        const SimTime first = g->offset ? *g->offset : sample_interval(m_rng[p][b], g->mean, g->half_range);
                        schedule_creation(Location{p, b}, *g, first);
                    }
                }
            }
        }

        const ModelProgram &program() const { return *m_program; }
        const std::shared_ptr<const ModelProgram> &program_ptr() const { return m_program; }
        std::uint64_t seed() const noexcept { return m_seed; }
        bool owns(PartitionIndex p) const { return p < m_owned.size() && m_owned[p]; }
        const std::vector<bool> &owned() const noexcept { return m_owned; }

        SimTime clock() const noexcept { return m_clock; }
        const FutureChain &chain() const noexcept { return m_chain; }
        FutureChain &chain() noexcept { return m_chain; }
        std::int64_t counter(PartitionIndex p) const { return m_counters.at(p); }
        const std::vector<std::int64_t> &counters() const noexcept { return m_counters; }
        const std::vector<std::vector<std::uint64_t>> &block_entries() const noexcept { return m_entries; }
        const RngStream &rng(Location loc) const { return m_rng.at(loc.partition).at(loc.block); }
        std::uint64_t created(PartitionIndex p) const { return m_created.at(p); }

        std::uint64_t total_entries() const
        {
            std::uint64_t n = 0;
            for (const auto &v : m_entries)
            {
                for (auto e : v)
                {
                    n += e;
                }
            }
            return n;
        }

        void enqueue(Transaction txn)
        {
            if (!owns(txn.location.partition))
            {
                throw SimulationError("enqueue: transaction for a partition this state does not own");
            }
            if (!m_chain.insert(std::move(txn)).second)
            {
                throw SimulationError("enqueue: duplicate transaction in chain");
            }
        }

        // Copy without the just-received transactions (they are restored from the
        // received list on rollback).
        KernelState without_arrivals() const
        {
            KernelState copy;
            copy.m_program = m_program;
            copy.m_seed = m_seed;
            copy.m_owned = m_owned;
            copy.m_clock = m_clock;
            for (const auto &t : m_chain)
            {
                if (t.arrival == kLocalOrigin)
                {
                    copy.m_chain.insert(copy.m_chain.end(), t);
                }
            }
            copy.m_counters = m_counters;
            copy.m_entries = m_entries;
            copy.m_rng = m_rng;
            copy.m_generated = m_generated;
            copy.m_created = m_created;
            return copy;
        }

        // Model-state equality (chain contents, counters, entries, streams, clock).
        bool same_state(const KernelState &o) const
        {
            return m_clock == o.m_clock && m_chain == o.m_chain && m_counters == o.m_counters && m_entries == o.m_entries &&
                   m_rng == o.m_rng && m_generated == o.m_generated && m_created == o.m_created;
        }

        MoveOutcome move(Transaction txn)
        {
            MoveOutcome out;
            out.key = txn.key;
            m_clock = txn.key.time;
            txn.arrival = kLocalOrigin;
            const auto &prog = *m_program;

            for (std::size_t entered = 0;; ++entered)
            {
                if (entered >= kMaxBlocksPerMove)
                {
                    throw SimulationError("move aborted after entering " + std::to_string(kMaxBlocksPerMove) +
                                          " blocks at key " + to_string(txn.key));
                }
                const auto loc = txn.location;
                if (loc.partition >= prog.partitions.size() || loc.block >= prog.partitions[loc.partition].blocks.size() ||
                    !owns(loc.partition))
                {
                    throw SimulationError("move: invalid transaction location " + std::to_string(loc.partition) + ":" +
                                          std::to_string(loc.block));
                }
                const auto &blk = prog.partitions[loc.partition].blocks[loc.block];
                auto &stream = m_rng[loc.partition][loc.block];
                ++m_entries[loc.partition][loc.block];
                out.blocks_entered.push_back(loc);

                if (const auto *g = std::get_if<Generate>(&blk.op))
                {
                    if (entered != 0)
                    {
                        throw SimulationError("move: transaction entered a GENERATE block");
                    }
                    const SimTime gap = sample_interval(stream, g->mean, g->half_range);
                    ++out.rng_draws;
                    schedule_creation(loc, *g, txn.key.time + gap);
                    txn.location.block = loc.block + 1;
                }
                else if (const auto *a = std::get_if<Advance>(&blk.op))
                {
                    const SimTime delay = sample_interval(stream, a->mean, a->half_range);
                    ++out.rng_draws;
                    txn.location.block = loc.block + 1;
                    if (delay > 0)
                    {
                        txn.key.time += delay;
                        out.rescheduled = true;
                        enqueue(std::move(txn));
                        return out;
                    }
                }
                else if (const auto *t = std::get_if<Transfer>(&blk.op))
                {
                    const double u = stream.unit();
                    ++out.rng_draws;
                    const Location next = u < t->probability ? prog.resolve(t->target) : Location{loc.partition, loc.block + 1};
                    txn.location = next;
                    if (next.partition != loc.partition)
                    {
                        // Crossing partitions ends the move; the transaction keeps its time.
                        ++txn.key.hop;
                        txn.parent_lineage = txn.key.lineage;
                        txn.key.lineage = mix64(txn.key.lineage ^ mix64(txn.key.time * 0x9E3779B97F4A7C15ull +
                                                                         loc.partition * 0x100000001B3ull + next.partition));
                        if (owns(next.partition))
                        {
                            out.rescheduled = true;
                            enqueue(std::move(txn));
                        }
                        else
                        {
                            out.departure = Departure{std::move(txn), next.partition};
                        }
                        return out;
                    }
                }
                else
                {
                    const auto &term = std::get<Terminate>(blk.op);
                    auto &counter = m_counters[loc.partition];
                    const auto before = counter;
                    counter -= static_cast<std::int64_t>(term.decrement);
                    if (term.decrement != 0)
                    {
                        out.counter_deltas.emplace_back(loc.partition, -static_cast<std::int64_t>(term.decrement));
                    }
                    if (before > 0 && counter <= 0)
                    {
                        out.termination_hit = loc.partition;
                    }
                    out.destroyed = true;
                    return out;
                }
            }
        }

    private:
        void schedule_creation(Location loc, const Generate &g, SimTime at)
        {
            auto &made = m_generated[loc.partition][loc.block];
            if (g.limit && made >= *g.limit)
            {
                return;
            }
            ++made;
            Transaction t;
            t.key = OrderKey{at, g.priority, loc.partition, m_created[loc.partition]++, 0};
            t.created = at;
            t.location = loc;
            enqueue(std::move(t));
        }

        std::shared_ptr<const ModelProgram> m_program;
        std::uint64_t m_seed = 0;
        std::vector<bool> m_owned;
        SimTime m_clock = 0;
        FutureChain m_chain;
        std::vector<std::int64_t> m_counters;
        std::vector<std::vector<std::uint64_t>> m_entries;
        std::vector<std::vector<RngStream>> m_rng;
        std::vector<std::vector<std::uint64_t>> m_generated;
        std::vector<std::uint64_t> m_created;
    };

    // Lowest-ordered transaction, if any, optionally only when strictly below `horizon`.
    inline std::optional<Transaction> next_movable(const KernelState &state, std::optional<OrderKey> horizon = std::nullopt)
    {
        const auto &chain = state.chain();
        if (chain.empty())
        {
            return std::nullopt;
        }
        const auto &t = *chain.begin();
        if (horizon && !(t.key < *horizon))
        {
            return std::nullopt;
        }
        return t;
    }

    // Removes `txn` from the chain and performs one transaction move.
    inline MoveOutcome move_transaction(KernelState &state, const Transaction &txn)
    {
        auto node = state.chain().extract(txn);
        if (node.empty())
        {
            throw SimulationError("move_transaction: transaction not in chain");
        }
        return state.move(std::move(node.value()));
    }

    inline PartitionReport partition_report(const KernelState &state, PartitionIndex p, std::uint64_t committed_moves)
    {
        PartitionReport r;
        r.partition = p;
        r.name = state.program().partitions.at(p).name;
        r.termination_counter = state.counter(p);
        r.block_entries = state.block_entries().at(p);
        r.committed_moves = committed_moves;
        return r;
    }

    struct SequentialOptions
    {
        std::optional<std::uint64_t> move_budget;
        // When set, receives the key and partition of every move in order.
        std::vector<std::pair<OrderKey, PartitionIndex>> *trace = nullptr;
    };

    // Single-threaded reference run over the whole program in global key order.
    // Stops right after the move that first drives any termination counter <= 0.
    inline FinalReport run_sequential(std::shared_ptr<const ModelProgram> program, std::uint64_t seed,
                                      SequentialOptions opts = {})
    {
        KernelState state(program, seed);
        const auto n = program->partitions.size();
        std::vector<std::uint64_t> per_partition(n, 0);
        FinalReport report;
        report.completed = false;

        while (true)
        {
            if (opts.move_budget && report.total_moves >= *opts.move_budget)
            {
                break;
            }
            auto next = next_movable(state);
            if (!next)
            {
                break;
            }
            const auto partition = next->location.partition;
            auto out = move_transaction(state, *next);
            if (opts.trace)
            {
                opts.trace->emplace_back(out.key, partition);
            }
            ++report.total_moves;
            ++per_partition[partition];
            if (out.termination_hit)
            {
                report.end_key = out.key;
                report.completed = true;
                break;
            }
        }

        report.final_clock = state.clock();
        for (PartitionIndex p = 0; p < n; ++p)
        {
            report.partitions.push_back(partition_report(state, p, per_partition[p]));
        }
        return report;
    }

    inline FinalReport run_sequential(const ModelProgram &program, std::uint64_t seed, SequentialOptions opts = {})
    {
        return run_sequential(std::make_shared<const ModelProgram>(program), seed, opts);
    }
}
