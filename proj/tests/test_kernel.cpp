#include "gpsstw/kernel.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace gpsstw;

TEST(OrderKey, OrdersByTimeThenPriorityDescending)
{
    const OrderKey a{5, 0, 1, 9, 0};
    const OrderKey b{5, 3, 1, 9, 0};
    const OrderKey c{6, 100, 0, 0, 0};
    EXPECT_LT(b, a); // higher priority first at equal time
    EXPECT_LT(a, c);
    EXPECT_LT((OrderKey{5, 0, 0, 9, 0}), (OrderKey{5, 0, 1, 0, 0}));
    EXPECT_LT((OrderKey{5, 0, 1, 2, 0}), (OrderKey{5, 0, 1, 2, 1}));
    EXPECT_LT((OrderKey{5, 0, 1, 2, 1, 7}), (OrderKey{5, 0, 1, 2, 1, 8}));
}

TEST(OrderKey, FloorAndSuccessorAreTight)
{
    const OrderKey k{7, -4, 2, 11, 3, 99};
    EXPECT_LT(OrderKey::time_floor(7), k);
    EXPECT_LT((OrderKey{6, std::numeric_limits<std::int32_t>::min(), 99, 99, 99}), OrderKey::time_floor(7));
    EXPECT_LT(k, k.successor());
    OrderKey m = k;
    m.lineage = std::numeric_limits<std::uint64_t>::max();
    EXPECT_LT(m, m.successor());
    EXPECT_EQ(m.successor().hop, 4u);
    EXPECT_TRUE(OrderKey::max().is_infinite());
}

TEST(Rng, StreamIsAPureFunctionOfItsDrawCount)
{
    RngStream a(42, 1, 3);
    std::vector<std::uint64_t> first;
    for (int i = 0; i < 10; ++i)
    {
        first.push_back(a.next_u64());
    }
    RngStream b(42, 1, 3, 4);
    for (int i = 4; i < 10; ++i)
    {
        EXPECT_EQ(b.next_u64(), first[static_cast<std::size_t>(i)]);
    }
    EXPECT_NE(RngStream(42, 1, 3).next_u64(), RngStream(42, 1, 4).next_u64());
    EXPECT_NE(RngStream(42, 1, 3).next_u64(), RngStream(43, 1, 3).next_u64());
}

TEST(Rng, IntervalStaysInRangeAndUsesOneDraw)
{
    RngStream s(7, 0, 0);
    for (int i = 0; i < 2000; ++i)
    {
        const auto before = s.draws();
        const auto v = sample_interval(s, 10, 3);
        EXPECT_EQ(s.draws(), before + 1);
        EXPECT_GE(v, 7u);
        EXPECT_LE(v, 13u);
    }
    EXPECT_EQ(sample_interval(s, 4, 0), 4u);
}

TEST(Sequential, CountsTerminationsOnASimpleSource)
{
    const auto r = run_sequential(test::program_from("PARTITION A,10\nGENERATE 1,0\nTERMINATE 1\n"), 1);
    EXPECT_TRUE(r.completed);
    EXPECT_EQ(r.final_clock, 10u);
    EXPECT_EQ(r.total_moves, 10u);
    ASSERT_EQ(r.partitions.size(), 1u);
    EXPECT_EQ(r.partitions[0].termination_counter, 0);
    EXPECT_EQ(r.partitions[0].block_entries, (std::vector<std::uint64_t>{10, 10}));
    ASSERT_TRUE(r.end_key);
    EXPECT_EQ(r.end_key->time, 10u);
}

TEST(Sequential, BudgetStopsWithPartialStatistics)
{
    SequentialOptions opts;
    opts.move_budget = 25;
    const auto r = run_sequential(test::load_model("sparse_transfer_scaled"), 1, opts);
    EXPECT_FALSE(r.completed);
    EXPECT_FALSE(r.end_key);
    EXPECT_EQ(r.total_moves, 25u);
}

TEST(Sequential, MatchesCommittedGoldenReports)
{
    for (const char *name : {"sparse_transfer_scaled", "dense_transfer_scaled", "zero_delay_loop", "four_stage", "single",
                             "bidirectional", "sparse_transfer_rollback"})
    {
        const auto program = test::load_model(name);
        for (std::uint64_t seed = 1; seed <= 3; ++seed)
        {
            EXPECT_EQ(test::outcome_json(run_sequential(program, seed)), test::outcome_json(test::golden(name, seed)))
                << name << " seed " << seed;
        }
    }
}

TEST(Sequential, ReplayIsDeterministic)
{
    const auto program = test::load_model("four_stage");
    std::vector<std::pair<OrderKey, PartitionIndex>> a, b;
    SequentialOptions oa, ob;
    oa.trace = &a;
    ob.trace = &b;
    run_sequential(program, 9, oa);
    run_sequential(program, 9, ob);
    EXPECT_EQ(a, b);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end(), [](const auto &x, const auto &y) { return x.first < y.first; }));
}

TEST(Kernel, CopiedStateReplaysIdentically)
{
    KernelState s(test::load_model("bidirectional"), 3);
    for (int i = 0; i < 200; ++i)
    {
        move_transaction(s, *next_movable(s));
    }
    KernelState copy = s;
    std::vector<OrderKey> left, right;
    for (int i = 0; i < 300; ++i)
    {
        left.push_back(move_transaction(s, *next_movable(s)).key);
        right.push_back(move_transaction(copy, *next_movable(copy)).key);
    }
    EXPECT_EQ(left, right);
    EXPECT_TRUE(s.same_state(copy));
}

TEST(Kernel, ZeroDelayAdvanceContinuesTheMove)
{
    KernelState s(test::program_from("PARTITION A,5\nGENERATE 4,0\nADVANCE 0,0\nADVANCE 2,0\nTERMINATE 1\n"), 1);
    const auto first = move_transaction(s, *next_movable(s));
    EXPECT_EQ(first.blocks_entered.size(), 3u); // GENERATE, ADVANCE 0, ADVANCE 2
    EXPECT_TRUE(first.rescheduled);
    EXPECT_EQ(first.rng_draws, 3u);
    // The generator's next creation at 8 and the mover at 6.
    ASSERT_EQ(s.chain().size(), 2u);
    EXPECT_EQ(s.chain().begin()->key.time, 6u);
    const auto second = move_transaction(s, *next_movable(s));
    EXPECT_TRUE(second.destroyed);
    EXPECT_FALSE(second.termination_hit);
}

TEST(Kernel, CrossingEndsTheMoveAndBumpsHop)
{
    auto program = test::program_from("PARTITION A,5\nGENERATE 2,0\nTRANSFER 1.0,In\nPARTITION B,5\nGENERATE 100,0\nIn TERMINATE 1\n");
    KernelState s(program, 1, {true, false});
    const auto out = move_transaction(s, *next_movable(s));
    ASSERT_TRUE(out.departure);
    EXPECT_EQ(out.departure->destination, 1u);
    EXPECT_EQ(out.departure->txn.key.hop, 1u);
    EXPECT_EQ(out.departure->txn.key.time, 2u);
    EXPECT_EQ(out.departure->txn.parent_lineage, 0u);
    EXPECT_NE(out.departure->txn.key.lineage, 0u);
    EXPECT_THROW(s.enqueue(out.departure->txn), SimulationError);
}

TEST(Kernel, GenerateLimitAndPriority)
{
    auto program = test::program_from("PARTITION A,100\nGENERATE 1,0,,3\nTERMINATE 1\nGENERATE 1,0,,2,5\nTERMINATE 1\n");
    std::vector<std::pair<OrderKey, PartitionIndex>> trace;
    SequentialOptions opts;
    opts.trace = &trace;
    const auto r = run_sequential(program, 1, opts);
    EXPECT_FALSE(r.completed); // chain drained before the counter reached zero
    EXPECT_EQ(r.total_moves, 5u);
    ASSERT_GE(trace.size(), 2u);
    EXPECT_EQ(trace[0].first.priority, 5); // same time, higher priority first
    EXPECT_EQ(r.partitions[0].block_entries, (std::vector<std::uint64_t>{3, 3, 2, 2}));
}

TEST(Kernel, EndsAtTheFirstCounterToReachZero)
{
    const auto r = run_sequential(test::load_model("dense_transfer_scaled"), 1);
    ASSERT_TRUE(r.completed);
    int at_zero = 0;
    for (const auto &p : r.partitions)
    {
        at_zero += p.termination_counter <= 0 ? 1 : 0;
    }
    EXPECT_EQ(at_zero, 1);
    EXPECT_EQ(r.end_key->time, r.final_clock);
}
