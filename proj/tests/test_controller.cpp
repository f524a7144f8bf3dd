#include "gpsstw/controller.hpp"

#include <gtest/gtest.h>

using namespace gpsstw;

namespace
{
    GvtLocalReport lb(OrderKey k, std::optional<OrderKey> end = std::nullopt)
    {
        GvtLocalReport r;
        r.lower_bound = k;
        r.provisional_end = end;
        return r;
    }

    EnvelopeMessage from_lp(LpId lp, Payload p)
    {
        EnvelopeMessage m;
        m.sender = lp;
        m.receiver = kControllerId;
        m.payload = std::move(p);
        return m;
    }

    std::size_t count_kind(const std::vector<EnvelopeMessage> &out, MessageKind k)
    {
        return static_cast<std::size_t>(std::count_if(out.begin(), out.end(), [k](const auto &m) { return m.kind() == k; }));
    }

    ReportRepMsg report_for(LpId lp, PartitionIndex p, std::uint64_t moves, SimTime clock)
    {
        ReportRepMsg r;
        r.stats.lp = lp;
        r.clock = clock;
        PartitionReport pr;
        pr.partition = p;
        pr.name = "P" + std::to_string(p);
        pr.committed_moves = moves;
        pr.block_entries = {moves};
        r.partitions.push_back(pr);
        return r;
    }
}

TEST(Gvt, IsTheFlooredMinimumLowerBound)
{
    GvtRound r;
    r.reports = {lb(OrderKey{40, 0, 0, 1, 0}), lb(OrderKey{25, 3, 1, 9, 2}), lb(OrderKey::max())};
    compute_gvt(r);
    EXPECT_EQ(r.gvt, OrderKey::time_floor(25));
    EXPECT_TRUE(r.provisional_ends.empty());

    GvtRound idle;
    idle.reports = {lb(OrderKey::max()), lb(OrderKey::max())};
    compute_gvt(idle);
    EXPECT_TRUE(idle.gvt.is_infinite());
}

TEST(Gvt, EndIsConfirmedOnlyStrictlyBelowGvt)
{
    const OrderKey end{30, 0, 1, 4, 0};
    GvtRound r;
    r.reports = {lb(OrderKey{30, 0, 0, 9, 0}), lb(OrderKey::max(), end)};
    compute_gvt(r);
    EXPECT_FALSE(confirm_end(r)); // something at the same time may still precede it
    EXPECT_EQ(commit_horizon(r), OrderKey::time_floor(30));

    r.reports[0] = lb(OrderKey{31, 0, 0, 9, 0});
    compute_gvt(r);
    const auto d = confirm_end(r);
    ASSERT_TRUE(d);
    EXPECT_EQ(d->end_key, end);
    EXPECT_EQ(d->lp, 1u);
    EXPECT_LE(d->end_key.time, r.gvt.time);
    EXPECT_EQ(commit_horizon(r), end); // never commit past a pending end
}

TEST(Gvt, EarliestOfSeveralEndsWins)
{
    GvtRound r;
    r.reports = {lb(OrderKey::max(), OrderKey{50, 0, 0, 1, 0}), lb(OrderKey::max(), OrderKey{44, 0, 1, 1, 0})};
    compute_gvt(r);
    const auto d = confirm_end(r);
    ASSERT_TRUE(d);
    EXPECT_EQ(d->lp, 1u);
    EXPECT_EQ(commit_horizon(r).time, 44u);
}

TEST(MergeReports, AssemblesPartitionsAndChecksCoverage)
{
    LpReport a{LpStatistics{}, {PartitionReport{1, "B", 0, {5}, 5}}, 90};
    a.stats.lp = 1;
    LpReport b{LpStatistics{}, {PartitionReport{0, "A", 3, {7}, 7}}, 80};
    const auto r = merge_reports({a, b}, 2, OrderKey{90, 0, 1, 0, 0});
    EXPECT_EQ(r.total_moves, 12u);
    EXPECT_EQ(r.final_clock, 90u);
    EXPECT_EQ(r.partitions[0].name, "A");
    EXPECT_EQ(r.lp_stats[0].lp, 0u);
    EXPECT_TRUE(r.completed);

    EXPECT_THROW(merge_reports({a}, 2, std::nullopt), SimulationError);
    EXPECT_THROW(merge_reports({a, a, b}, 2, std::nullopt), SimulationError);
    EXPECT_FALSE(merge_reports({a, b}, 2, std::nullopt).completed);
}

TEST(ControllerMachine, RoundEndAndReport)
{
    Controller c(2, 2);
    std::vector<OrderKey> seen;
    c.on_round = [&](const GvtRound &r) { seen.push_back(r.gvt); };

    c.start_round();
    auto out = c.take_outbox();
    EXPECT_EQ(count_kind(out, MessageKind::GvtReq), 2u);
    EXPECT_TRUE(c.round_open());
    c.start_round(); // no second round while one is open
    EXPECT_TRUE(c.take_outbox().empty());

    c.handle(from_lp(0, GvtRepMsg{1, lb(OrderKey{10, 0, 0, 0, 0})}));
    c.handle(from_lp(0, GvtRepMsg{1, lb(OrderKey{1, 0, 0, 0, 0})})); // duplicate, ignored
    EXPECT_TRUE(c.round_open());
    c.handle(from_lp(1, GvtRepMsg{1, lb(OrderKey{12, 0, 1, 0, 0})}));
    EXPECT_FALSE(c.round_open());
    out = c.take_outbox();
    ASSERT_EQ(count_kind(out, MessageKind::GvtBcast), 2u);
    EXPECT_EQ(std::get<GvtBcastMsg>(out[0].payload).gvt, OrderKey::time_floor(10));
    EXPECT_EQ(c.phase(), Controller::Phase::Running);

    c.handle(from_lp(1, GvtRepMsg{0, {}})); // provisional end announcement
    EXPECT_TRUE(c.round_wanted());
    c.start_round();
    EXPECT_FALSE(c.round_wanted());
    c.take_outbox();
    c.handle(from_lp(1, GvtRepMsg{1, lb(OrderKey{3, 0, 0, 0, 0})})); // stale round number
    c.handle(from_lp(0, GvtRepMsg{2, lb(OrderKey{21, 0, 0, 0, 0})}));
    c.handle(from_lp(1, GvtRepMsg{2, lb(OrderKey::max(), OrderKey{20, 0, 1, 7, 0})}));
    EXPECT_EQ(c.phase(), Controller::Phase::Finalizing);
    ASSERT_TRUE(c.decision());
    EXPECT_EQ(c.decision()->end_key.time, 20u);
    out = c.take_outbox();
    EXPECT_EQ(count_kind(out, MessageKind::EndBcast), 2u);
    EXPECT_EQ(count_kind(out, MessageKind::ReportReq), 2u);

    c.handle(from_lp(1, report_for(1, 1, 9, 20)));
    EXPECT_FALSE(c.done());
    EXPECT_THROW(c.handle(from_lp(1, report_for(1, 1, 9, 20))), ProtocolError);
    c.handle(from_lp(0, report_for(0, 0, 11, 19)));
    ASSERT_TRUE(c.done());
    EXPECT_EQ(c.result().total_moves, 20u);
    EXPECT_EQ(c.result().final_clock, 20u);
    EXPECT_EQ(c.result().gvt_rounds, 2u);
    EXPECT_TRUE(c.result().completed);
    EXPECT_EQ(seen.size(), 2u);
    EXPECT_LE(seen[0], seen[1]);
}

TEST(ControllerMachine, QuiescenceEndsWithoutAnEnd)
{
    Controller c(1, 1);
    c.start_round();
    c.take_outbox();
    c.handle(from_lp(0, GvtRepMsg{1, lb(OrderKey::max())}));
    EXPECT_EQ(c.phase(), Controller::Phase::Finalizing);
    EXPECT_FALSE(c.decision());
    c.handle(from_lp(0, report_for(0, 0, 4, 8)));
    EXPECT_TRUE(c.done());
    EXPECT_FALSE(c.result().completed);
}

TEST(ControllerMachine, RejectsDecreasingGvtAndStrangers)
{
    Controller c(1, 1);
    c.start_round();
    c.handle(from_lp(0, GvtRepMsg{1, lb(OrderKey{50, 0, 0, 0, 0})}));
    c.start_round();
    EXPECT_THROW(c.handle(from_lp(0, GvtRepMsg{2, lb(OrderKey{49, 0, 0, 0, 0})})), SimulationError);
    EXPECT_THROW(c.handle(from_lp(7, GvtRepMsg{2, {}})), ProtocolError);
    EXPECT_THROW(c.handle(from_lp(0, AntiMsg{1, OrderKey{}})), ProtocolError);
}
