#include "gpsstw/transport.hpp"

#include <gtest/gtest.h>

#include <memory>

using namespace gpsstw;

namespace
{
    EnvelopeMessage anti(LpId from, LpId to, std::uint64_t id)
    {
        EnvelopeMessage m;
        m.sender = from;
        m.receiver = to;
        m.payload = AntiMsg{id, OrderKey{id, 0, 0, id, 0}};
        return m;
    }

    std::uint64_t id_of(const EnvelopeMessage &m) { return std::get<AntiMsg>(m.payload).id; }
}

TEST(InProc, PerChannelFifoUnderChaos)
{
    auto now = std::make_shared<std::int64_t>(0);
    InProcConfig cfg;
    cfg.capacity = 0;
    cfg.chaos = ChaosConfig{true, 0, 5000, 3};
    InProcTransport t({0, 1, 2}, cfg, [now] { return *now; });
    for (std::uint64_t i = 0; i < 200; ++i)
    {
        ASSERT_TRUE(t.try_send(anti(static_cast<LpId>(i % 2), 2, i)));
    }
    EXPECT_EQ(t.in_flight().size(), 200u);

    std::map<LpId, std::uint64_t> last_seq;
    std::map<LpId, std::int64_t> last_id;
    std::size_t got = 0;
    bool interleaved = false;
    LpId prev_sender = 0xFFFF;
    for (*now = 0; *now <= 6000; *now += 50)
    {
        while (auto m = t.poll(2))
        {
            const auto id = static_cast<std::int64_t>(id_of(*m));
            if (last_id.count(m->sender))
            {
                EXPECT_GT(id, last_id[m->sender]);
                EXPECT_EQ(m->seq, last_seq[m->sender] + 1);
            }
            if (prev_sender != 0xFFFF && prev_sender != m->sender)
            {
                interleaved = true;
            }
            prev_sender = m->sender;
            last_id[m->sender] = id;
            last_seq[m->sender] = m->seq;
            ++got;
        }
    }
    EXPECT_EQ(got, 200u);
    EXPECT_TRUE(interleaved);
}

TEST(InProc, MessagesWaitForTheirDeliveryTime)
{
    auto now = std::make_shared<std::int64_t>(0);
    InProcConfig cfg;
    cfg.channel_delay_us[{0, 1}] = 1000;
    InProcTransport t({0, 1}, cfg, [now] { return *now; });
    ASSERT_TRUE(t.try_send(anti(0, 1, 1)));
    ASSERT_TRUE(t.try_send(anti(1, 0, 2)));
    EXPECT_FALSE(t.poll(1));
    EXPECT_TRUE(t.poll(0)); // reverse direction has no extra delay
    *now = 999;
    EXPECT_FALSE(t.poll(1));
    *now = 1000;
    auto m = t.poll(1);
    ASSERT_TRUE(m);
    EXPECT_EQ(id_of(*m), 1u);
}

TEST(InProc, BackpressureSparesControlTraffic)
{
    InProcConfig cfg;
    cfg.capacity = 2;
    InProcTransport t({0, 1}, cfg);
    EXPECT_TRUE(t.try_send(anti(0, 1, 1)));
    EXPECT_TRUE(t.try_send(anti(0, 1, 2)));
    EXPECT_FALSE(t.try_send(anti(0, 1, 3)));
    EnvelopeMessage ack;
    ack.sender = 0;
    ack.receiver = 1;
    ack.payload = AckMsg{1, false, OrderKey{}};
    EXPECT_TRUE(t.try_send(ack)); // accepted past capacity, but it occupies a slot
    ASSERT_TRUE(t.poll(1));
    EXPECT_FALSE(t.try_send(anti(0, 1, 3)));
    ASSERT_TRUE(t.poll(1));
    EXPECT_TRUE(t.try_send(anti(0, 1, 3)));
    // Refused sends do not consume sequence numbers.
    std::vector<std::uint32_t> seqs;
    while (auto m = t.poll(1))
    {
        seqs.push_back(m->seq);
    }
    EXPECT_EQ(seqs, (std::vector<std::uint32_t>{2, 3}));
}

TEST(InProc, UnknownEndpointAndClosedTransportThrow)
{
    InProcTransport t({0, 1});
    EXPECT_THROW(t.try_send(anti(0, 5, 1)), TransportError);
    t.close();
    EXPECT_THROW(t.try_send(anti(0, 1, 1)), TransportError);
}

TEST(Tcp, LoopbackDeliversInOrder)
{
    std::map<LpId, TcpAddress> addrs{{0, {"127.0.0.1", 0}}, {1, {"127.0.0.1", 0}}};
    TcpTransport t(addrs, {0, 1});
    constexpr std::uint64_t n = 500;
    for (std::uint64_t i = 0; i < n; ++i)
    {
        while (!t.try_send(anti(0, 1, i)))
        {
        }
    }
    EnvelopeMessage big;
    big.sender = 1;
    big.receiver = 0;
    big.payload = InitMsg{std::string(200000, 'x'), 1, {0, 1}, "{}"};
    ASSERT_TRUE(t.try_send(big));

    std::uint64_t expect = 0;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
    while (expect < n && std::chrono::steady_clock::now() < deadline)
    {
        if (auto m = t.poll(1))
        {
            EXPECT_EQ(id_of(*m), expect);
            ++expect;
        }
        else
        {
            t.wait(1, std::chrono::milliseconds(10));
        }
    }
    EXPECT_EQ(expect, n);

    std::optional<EnvelopeMessage> got;
    while (!got && std::chrono::steady_clock::now() < deadline)
    {
        got = t.poll(0);
        if (!got)
        {
            t.wait(0, std::chrono::milliseconds(10));
        }
    }
    ASSERT_TRUE(got);
    EXPECT_EQ(std::get<InitMsg>(got->payload).model_source.size(), 200000u);
    t.close();
}
