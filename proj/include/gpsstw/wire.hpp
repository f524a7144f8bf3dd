#pragma once

#include "kernel.hpp"
#include "report.hpp"
#include "types.hpp"

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace gpsstw
{
    inline constexpr std::uint8_t kWireVersion = 1;

    enum class MessageKind : std::uint8_t
    {
        Txn = 1,
        Anti = 2,
        Ack = 3,
        Cancelback = 4,
        GvtReq = 5,
        GvtRep = 6,
        GvtBcast = 7,
        EndBcast = 8,
        ReportReq = 9,
        ReportRep = 10,
        Init = 11,
        Start = 12,
    };

    inline const char *kind_name(MessageKind k)
    {
        switch (k)
        {
        case MessageKind::Txn: return "TXN";
        case MessageKind::Anti: return "ANTI";
        case MessageKind::Ack: return "ACK";
        case MessageKind::Cancelback: return "CANCELBACK";
        case MessageKind::GvtReq: return "GVT_REQ";
        case MessageKind::GvtRep: return "GVT_REP";
        case MessageKind::GvtBcast: return "GVT_BCAST";
        case MessageKind::EndBcast: return "END_BCAST";
        case MessageKind::ReportReq: return "REPORT_REQ";
        case MessageKind::ReportRep: return "REPORT_REP";
        case MessageKind::Init: return "INIT";
        case MessageKind::Start: return "START";
        }
        return "?";
    }

    // --- payloads ---------------------------------------------------------

    struct TxnMsg
    {
        std::uint64_t id = 0; // sender-local message id, echoed by ACK
        Transaction txn;      // arrival is meaningless on the wire
        friend bool operator==(const TxnMsg &, const TxnMsg &) = default;
    };

    struct AntiMsg
    {
        std::uint64_t id = 0;
        OrderKey key;
        friend bool operator==(const AntiMsg &, const AntiMsg &) = default;
    };

    struct AckMsg
    {
        std::uint64_t id = 0;
        // Set when the receiver had already reported for the GVT round in progress;
        // the sender must then fold `key` into its own report.
        bool marked = false;
        OrderKey key;
        friend bool operator==(const AckMsg &, const AckMsg &) = default;
    };

    struct CancelbackMsg
    {
        std::uint64_t id = 0;
        OrderKey key; // key of the transaction being returned
        std::uint64_t txn_id = 0; // id of the TXN message that delivered it
        friend bool operator==(const CancelbackMsg &, const CancelbackMsg &) = default;
    };

    struct GvtReqMsg
    {
        std::uint32_t round = 0;
        friend bool operator==(const GvtReqMsg &, const GvtReqMsg &) = default;
    };

    // Per-LP lower bound plus monitoring data carried on each GVT round.
    struct GvtLocalReport
    {
        OrderKey lower_bound = OrderKey::max();
        std::optional<OrderKey> provisional_end;
        std::uint8_t mode = 0;
        SimTime lvt = kInfiniteTime;
        std::uint64_t committed_moves = 0;
        std::uint64_t rolled_back_moves = 0;
        std::uint64_t rollback_count = 0;
        std::uint64_t cancelbacks_issued = 0;
        std::uint64_t uncommitted_moves = 0;
        double committed_rate = 0.0;
        double avg_uncommitted = 0.0;
        std::optional<std::uint64_t> actuator;
        std::uint64_t lpcc_ticks = 0;
        friend bool operator==(const GvtLocalReport &, const GvtLocalReport &) = default;
    };

    struct GvtRepMsg
    {
        std::uint32_t round = 0;
        GvtLocalReport report;
        friend bool operator==(const GvtRepMsg &, const GvtRepMsg &) = default;
    };

    struct GvtBcastMsg
    {
        std::uint32_t round = 0;
        OrderKey gvt;
        friend bool operator==(const GvtBcastMsg &, const GvtBcastMsg &) = default;
    };

    struct EndBcastMsg
    {
        std::optional<OrderKey> end_key; // none: the run ended without any counter reaching zero
        friend bool operator==(const EndBcastMsg &, const EndBcastMsg &) = default;
    };

    struct ReportReqMsg
    {
        friend bool operator==(const ReportReqMsg &, const ReportReqMsg &) = default;
    };

    struct ReportRepMsg
    {
        LpStatistics stats;
        std::vector<PartitionReport> partitions;
        SimTime clock = 0;
        friend bool operator==(const ReportRepMsg &, const ReportRepMsg &) = default;
    };

    // Everything a remote LP needs to build itself.
    struct InitMsg
    {
        std::string model_source;
        std::uint64_t seed = 0;
        std::vector<LpId> partition_to_lp;
        std::string config_json;
        friend bool operator==(const InitMsg &, const InitMsg &) = default;
    };

    struct StartMsg
    {
        friend bool operator==(const StartMsg &, const StartMsg &) = default;
    };

    using Payload = std::variant<TxnMsg, AntiMsg, AckMsg, CancelbackMsg, GvtReqMsg, GvtRepMsg, GvtBcastMsg, EndBcastMsg,
                                 ReportReqMsg, ReportRepMsg, InitMsg, StartMsg>;

    struct EnvelopeMessage
    {
        LpId sender = 0;
        LpId receiver = 0;
        std::uint32_t seq = 0; // per (sender, receiver) channel, assigned by the transport
        Payload payload;

        MessageKind kind() const { return static_cast<MessageKind>(payload.index() + 1); }

        friend bool operator==(const EnvelopeMessage &, const EnvelopeMessage &) = default;
    };

    class DecodeError : public std::runtime_error
    {
    public:
        DecodeError(std::size_t offset, const std::string &what)
            : std::runtime_error("decode error at offset " + std::to_string(offset) + ": " + what), m_offset(offset)
        {
        }
        std::size_t offset() const noexcept { return m_offset; }

    private:
        std::size_t m_offset;
    };

    // --- encoding -----------------------------------------------------------
    //
    // Frame: u32 length of the rest | u8 version | u8 kind | u16 sender |
    //        u16 receiver | u32 seq | payload. All integers little-endian.

    inline constexpr std::size_t kFrameHeaderSize = 14;

    class WireWriter
    {
    public:
        void u8(std::uint8_t v) { m_buf.push_back(static_cast<std::byte>(v)); }
        void u16(std::uint16_t v) { put(v, 2); }
        void u32(std::uint32_t v) { put(v, 4); }
        void u64(std::uint64_t v) { put(v, 8); }
        void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
        void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
        void f64(double v)
        {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            u64(bits);
        }
        void boolean(bool b) { u8(b ? 1 : 0); }
        void str(const std::string &s)
        {
            u32(static_cast<std::uint32_t>(s.size()));
            for (char c : s)
            {
                u8(static_cast<std::uint8_t>(c));
            }
        }
        void key(const OrderKey &k)
        {
            u64(k.time);
            i32(k.priority);
            u32(k.origin);
            u64(k.sequence);
            u32(k.hop);
            u64(k.lineage);
        }
        void opt_key(const std::optional<OrderKey> &k)
        {
            boolean(k.has_value());
            if (k)
            {
                key(*k);
            }
        }
        template <class T, class F>
        void vec(const std::vector<T> &v, F &&f)
        {
            u32(static_cast<std::uint32_t>(v.size()));
            for (const auto &x : v)
            {
                f(x);
            }
        }

        std::vector<std::byte> &bytes() { return m_buf; }

        void patch_u32(std::size_t at, std::uint32_t v)
        {
            for (int i = 0; i < 4; ++i)
            {
                m_buf[at + i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
            }
        }

    private:
        void put(std::uint64_t v, int n)
        {
            for (int i = 0; i < n; ++i)
            {
                m_buf.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
            }
        }

        std::vector<std::byte> m_buf;
    };

    class WireReader
    {
    public:
        explicit WireReader(std::span<const std::byte> data) : m_data(data) {}

        std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
        std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
        std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
        std::uint64_t u64() { return get(8); }
        std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
        std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
        double f64()
        {
            const auto bits = u64();
            double v;
            std::memcpy(&v, &bits, sizeof v);
            return v;
        }
        bool boolean()
        {
            const auto at = m_pos;
            const auto v = u8();
            if (v > 1)
            {
                throw DecodeError(at, "bad boolean");
            }
            return v == 1;
        }
        std::string str()
        {
            const auto n = u32();
            need(n);
            std::string s(reinterpret_cast<const char *>(m_data.data() + m_pos), n);
            m_pos += n;
            return s;
        }
        OrderKey key()
        {
            OrderKey k;
            k.time = u64();
            k.priority = i32();
            k.origin = u32();
            k.sequence = u64();
            k.hop = u32();
            k.lineage = u64();
            return k;
        }
        std::optional<OrderKey> opt_key()
        {
            if (boolean())
            {
                return key();
            }
            return std::nullopt;
        }
        template <class T, class F>
        std::vector<T> vec(F &&f)
        {
            const auto n = u32();
            // Every element takes at least one byte; rejects absurd counts early.
            need(n == 0 ? 0 : 1);
            if (n > remaining())
            {
                throw DecodeError(m_pos, "vector length exceeds frame");
            }
            std::vector<T> out;
            out.reserve(n);
            for (std::uint32_t i = 0; i < n; ++i)
            {
                out.push_back(f());
            }
            return out;
        }

        std::size_t pos() const noexcept { return m_pos; }
        std::size_t remaining() const noexcept { return m_data.size() - m_pos; }

    private:
        void need(std::size_t n) const
        {
            if (m_data.size() - m_pos < n)
            {
                throw DecodeError(m_pos, "truncated frame");
            }
        }

        std::uint64_t get(int n)
        {
            need(static_cast<std::size_t>(n));
            std::uint64_t v = 0;
            for (int i = 0; i < n; ++i)
            {
                v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(m_data[m_pos + i])) << (8 * i);
            }
            m_pos += static_cast<std::size_t>(n);
            return v;
        }

        std::span<const std::byte> m_data;
        std::size_t m_pos = 0;
    };

    namespace detail
    {
        inline void write_txn(WireWriter &w, const Transaction &t)
        {
            w.key(t.key);
            w.u64(t.created);
            w.u32(t.location.partition);
            w.u32(t.location.block);
            w.u64(t.parent_lineage);
        }

        inline Transaction read_txn(WireReader &r)
        {
            Transaction t;
            t.key = r.key();
            t.created = r.u64();
            t.location.partition = r.u32();
            t.location.block = r.u32();
            t.parent_lineage = r.u64();
            return t;
        }

        inline void write_stats(WireWriter &w, const LpStatistics &s)
        {
            w.u16(s.lp);
            w.vec(s.partitions, [&](PartitionIndex p) { w.u32(p); });
            for (auto v : {s.total_moves, s.rolled_back_moves, s.discarded_moves, s.committed_moves, s.rollback_count,
                           s.cancelbacks_issued, s.cancelbacks_received, s.transactions_sent, s.antis_sent, s.lazy_hits,
                           s.messages_sent, s.messages_received, s.checkpoints_taken, s.coast_forward_moves})
            {
                w.u64(v);
            }
        }

        inline LpStatistics read_stats(WireReader &r)
        {
            LpStatistics s;
            s.lp = r.u16();
            s.partitions = r.vec<PartitionIndex>([&] { return r.u32(); });
            for (auto *v : {&s.total_moves, &s.rolled_back_moves, &s.discarded_moves, &s.committed_moves,
                            &s.rollback_count, &s.cancelbacks_issued, &s.cancelbacks_received, &s.transactions_sent,
                            &s.antis_sent, &s.lazy_hits, &s.messages_sent, &s.messages_received, &s.checkpoints_taken,
                            &s.coast_forward_moves})
            {
                *v = r.u64();
            }
            return s;
        }

        inline void write_payload(WireWriter &w, const Payload &p)
        {
            std::visit(
                [&](const auto &m)
                {
                    using T = std::decay_t<decltype(m)>;
                    if constexpr (std::is_same_v<T, TxnMsg>)
                    {
                        w.u64(m.id);
                        write_txn(w, m.txn);
                    }
                    else if constexpr (std::is_same_v<T, AntiMsg>)
                    {
                        w.u64(m.id);
                        w.key(m.key);
                    }
                    else if constexpr (std::is_same_v<T, CancelbackMsg>)
                    {
                        w.u64(m.id);
                        w.key(m.key);
                        w.u64(m.txn_id);
                    }
                    else if constexpr (std::is_same_v<T, AckMsg>)
                    {
                        w.u64(m.id);
                        w.boolean(m.marked);
                        w.key(m.key);
                    }
                    else if constexpr (std::is_same_v<T, GvtReqMsg>)
                    {
                        w.u32(m.round);
                    }
                    else if constexpr (std::is_same_v<T, GvtRepMsg>)
                    {
                        w.u32(m.round);
                        const auto &r = m.report;
                        w.key(r.lower_bound);
                        w.opt_key(r.provisional_end);
                        w.u8(r.mode);
                        w.u64(r.lvt);
                        w.u64(r.committed_moves);
                        w.u64(r.rolled_back_moves);
                        w.u64(r.rollback_count);
                        w.u64(r.cancelbacks_issued);
                        w.u64(r.uncommitted_moves);
                        w.f64(r.committed_rate);
                        w.f64(r.avg_uncommitted);
                        w.boolean(r.actuator.has_value());
                        w.u64(r.actuator.value_or(0));
                        w.u64(r.lpcc_ticks);
                    }
                    else if constexpr (std::is_same_v<T, GvtBcastMsg>)
                    {
                        w.u32(m.round);
                        w.key(m.gvt);
                    }
                    else if constexpr (std::is_same_v<T, EndBcastMsg>)
                    {
                        w.opt_key(m.end_key);
                    }
                    else if constexpr (std::is_same_v<T, ReportRepMsg>)
                    {
                        write_stats(w, m.stats);
                        w.vec(m.partitions,
                              [&](const PartitionReport &pr)
                              {
                                  w.u32(pr.partition);
                                  w.str(pr.name);
                                  w.i64(pr.termination_counter);
                                  w.vec(pr.block_entries, [&](std::uint64_t e) { w.u64(e); });
                                  w.u64(pr.committed_moves);
                              });
                        w.u64(m.clock);
                    }
                    else if constexpr (std::is_same_v<T, InitMsg>)
                    {
                        w.str(m.model_source);
                        w.u64(m.seed);
                        w.vec(m.partition_to_lp, [&](LpId id) { w.u16(id); });
                        w.str(m.config_json);
                    }
                    // ReportReq and Start carry no payload.
                },
                p);
        }

        inline Payload read_payload(WireReader &r, MessageKind kind, std::size_t kind_offset)
        {
            switch (kind)
            {
            case MessageKind::Txn:
            {
                TxnMsg m;
                m.id = r.u64();
                m.txn = read_txn(r);
                return m;
            }
            case MessageKind::Anti:
            {
                AntiMsg m;
                m.id = r.u64();
                m.key = r.key();
                return m;
            }
            case MessageKind::Cancelback:
            {
                CancelbackMsg m;
                m.id = r.u64();
                m.key = r.key();
                m.txn_id = r.u64();
                return m;
            }
            case MessageKind::Ack:
            {
                AckMsg m;
                m.id = r.u64();
                m.marked = r.boolean();
                m.key = r.key();
                return m;
            }
            case MessageKind::GvtReq: return GvtReqMsg{r.u32()};
            case MessageKind::GvtRep:
            {
                GvtRepMsg m;
                m.round = r.u32();
                auto &rep = m.report;
                rep.lower_bound = r.key();
                rep.provisional_end = r.opt_key();
                rep.mode = r.u8();
                rep.lvt = r.u64();
                rep.committed_moves = r.u64();
                rep.rolled_back_moves = r.u64();
                rep.rollback_count = r.u64();
                rep.cancelbacks_issued = r.u64();
                rep.uncommitted_moves = r.u64();
                rep.committed_rate = r.f64();
                rep.avg_uncommitted = r.f64();
                const bool has_act = r.boolean();
                const auto act = r.u64();
                if (has_act)
                {
                    rep.actuator = act;
                }
                rep.lpcc_ticks = r.u64();
                return m;
            }
            case MessageKind::GvtBcast:
            {
                GvtBcastMsg m;
                m.round = r.u32();
                m.gvt = r.key();
                return m;
            }
            case MessageKind::EndBcast: return EndBcastMsg{r.opt_key()};
            case MessageKind::ReportReq: return ReportReqMsg{};
            case MessageKind::ReportRep:
            {
                ReportRepMsg m;
                m.stats = read_stats(r);
                m.partitions = r.vec<PartitionReport>(
                    [&]
                    {
                        PartitionReport pr;
                        pr.partition = r.u32();
                        pr.name = r.str();
                        pr.termination_counter = r.i64();
                        pr.block_entries = r.vec<std::uint64_t>([&] { return r.u64(); });
                        pr.committed_moves = r.u64();
                        return pr;
                    });
                m.clock = r.u64();
                return m;
            }
            case MessageKind::Init:
            {
                InitMsg m;
                m.model_source = r.str();
                m.seed = r.u64();
                m.partition_to_lp = r.vec<LpId>([&] { return r.u16(); });
                m.config_json = r.str();
                return m;
            }
            case MessageKind::Start: return StartMsg{};
            }
            throw DecodeError(kind_offset, "unknown message kind " + std::to_string(static_cast<int>(kind)));
        }
    }

    inline std::vector<std::byte> encode(const EnvelopeMessage &msg)
    {
        WireWriter w;
        w.u32(0); // patched below
        w.u8(kWireVersion);
        w.u8(static_cast<std::uint8_t>(msg.kind()));
        w.u16(msg.sender);
        w.u16(msg.receiver);
        w.u32(msg.seq);
        detail::write_payload(w, msg.payload);
        w.patch_u32(0, static_cast<std::uint32_t>(w.bytes().size() - 4));
        return std::move(w.bytes());
    }

    // Decodes exactly one frame occupying all of `frame`.
    inline EnvelopeMessage decode(std::span<const std::byte> frame)
    {
        WireReader r(frame);
        const auto len = r.u32();
        if (len != frame.size() - 4)
        {
            throw DecodeError(0, "length prefix " + std::to_string(len) + " does not match frame size " +
                                     std::to_string(frame.size() - 4));
        }
        const auto version_at = r.pos();
        const auto version = r.u8();
        if (version != kWireVersion)
        {
            throw DecodeError(version_at, "unsupported wire version " + std::to_string(version));
        }
        const auto kind_at = r.pos();
        const auto kind = static_cast<MessageKind>(r.u8());
        EnvelopeMessage msg;
        msg.sender = r.u16();
        msg.receiver = r.u16();
        msg.seq = r.u32();
        msg.payload = detail::read_payload(r, kind, kind_at);
        if (r.remaining() != 0)
        {
            throw DecodeError(r.pos(), "trailing bytes in frame");
        }
        return msg;
    }

    // Returns the size of the first complete frame in `buf`, if one is present.
    inline std::optional<std::size_t> complete_frame_size(std::span<const std::byte> buf)
    {
        if (buf.size() < 4)
        {
            return std::nullopt;
        }
        WireReader r(buf.first(4));
        const std::size_t len = r.u32();
        if (buf.size() < 4 + len)
        {
            return std::nullopt;
        }
        return 4 + len;
    }
}
