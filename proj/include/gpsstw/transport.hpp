#pragma once

#include "rng.hpp"
#include "wire.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

namespace gpsstw
{
    class TransportError : public std::runtime_error
    {
    public:
        using std::runtime_error::runtime_error;
    };

    // Microsecond clock; swappable so a lockstep driver can run on virtual time.
    using MicroClock = std::function<std::int64_t()>;

    inline MicroClock steady_micro_clock()
    {
        const auto origin = std::chrono::steady_clock::now();
        return [origin]
        {
            return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - origin)
                .count();
        };
    }

    // Reliable per-channel FIFO message passing between endpoints (LPs and the
    // controller). `seq` is assigned on send.
    class Transport
    {
    public:
        virtual ~Transport() = default;

        // False when the receiver applies backpressure; the caller retries later.
        virtual bool try_send(EnvelopeMessage msg) = 0;
        virtual std::optional<EnvelopeMessage> poll(LpId self) = 0;
        // Blocks until a message for `self` may be deliverable or the timeout passes.
        virtual void wait(LpId self, std::chrono::microseconds timeout) = 0;
        virtual void close() = 0;
        // Messages accepted but not yet polled (test inspection).
        virtual std::vector<EnvelopeMessage> in_flight() const = 0;
    };

    struct ChaosConfig
    {
        bool enabled = false;
        std::int64_t min_delay_us = 0;
        std::int64_t max_delay_us = 0;
        std::uint64_t seed = 1;
    };

    // Per-endpoint inbox: one FIFO per sender, messages held until their delivery time.
    class Mailbox
    {
    public:
        struct Pending
        {
            std::int64_t deliver_at = 0;
            EnvelopeMessage msg;
        };

        // Returns false if full (only when bounded).
        bool push(EnvelopeMessage msg, std::int64_t deliver_at, std::size_t capacity)
        {
            {
                std::lock_guard lock(m_mutex);
                if (capacity != 0 && m_size >= capacity)
                {
                    return false;
                }
                auto &q = m_channels[msg.sender];
                if (!q.empty() && q.back().deliver_at > deliver_at)
                {
                    deliver_at = q.back().deliver_at;
                }
                q.push_back(Pending{deliver_at, std::move(msg)});
                ++m_size;
            }
            m_cv.notify_all();
            return true;
        }

        std::optional<EnvelopeMessage> pop(std::int64_t now)
        {
            std::lock_guard lock(m_mutex);
            std::deque<Pending> *best = nullptr;
            for (auto &[sender, q] : m_channels)
            {
                if (!q.empty() && q.front().deliver_at <= now && (!best || q.front().deliver_at < best->front().deliver_at))
                {
                    best = &q;
                }
            }
            if (!best)
            {
                return std::nullopt;
            }
            auto msg = std::move(best->front().msg);
            best->pop_front();
            --m_size;
            return msg;
        }

        void wait(std::chrono::microseconds timeout)
        {
            std::unique_lock lock(m_mutex);
            if (m_size == 0 && !m_closed)
            {
                m_cv.wait_for(lock, timeout);
            }
        }

        void close()
        {
            {
                std::lock_guard lock(m_mutex);
                m_closed = true;
            }
            m_cv.notify_all();
        }

        std::vector<EnvelopeMessage> snapshot() const
        {
            std::lock_guard lock(m_mutex);
            std::vector<EnvelopeMessage> out;
            for (const auto &[sender, q] : m_channels)
            {
                for (const auto &p : q)
                {
                    out.push_back(p.msg);
                }
            }
            return out;
        }

        std::size_t size() const
        {
            std::lock_guard lock(m_mutex);
            return m_size;
        }

    private:
        mutable std::mutex m_mutex;
        std::condition_variable m_cv;
        std::map<LpId, std::deque<Pending>> m_channels;
        std::size_t m_size = 0;
        bool m_closed = false;
    };

    struct InProcConfig
    {
        std::size_t capacity = 4096; // per receiver; 0 = unbounded
        ChaosConfig chaos;
        // Fixed extra latency for specific (sender, receiver) channels.
        std::map<std::pair<LpId, LpId>, std::int64_t> channel_delay_us;
    };

    class InProcTransport final : public Transport
    {
    public:
        InProcTransport(std::vector<LpId> endpoints, InProcConfig cfg = {}, MicroClock clock = steady_micro_clock())
            : m_cfg(std::move(cfg)), m_clock(std::move(clock)), m_chaos_state(m_cfg.chaos.seed, 0xFFFF, 0xFFFF)
        {
            for (auto id : endpoints)
            {
                m_boxes.emplace(id, std::make_unique<Mailbox>());
            }
        }

        bool try_send(EnvelopeMessage msg) override
        {
            if (m_closed.load())
            {
                throw TransportError("send on closed transport");
            }
            auto it = m_boxes.find(msg.receiver);
            if (it == m_boxes.end())
            {
                throw TransportError("send to unknown endpoint " + std::to_string(msg.receiver));
            }
            std::int64_t deliver_at = m_clock();
            {
                std::lock_guard lock(m_mutex);
                if (m_cfg.chaos.enabled && m_cfg.chaos.max_delay_us > 0)
                {
                    deliver_at += static_cast<std::int64_t>(m_chaos_state.uniform(
                        static_cast<std::uint64_t>(m_cfg.chaos.min_delay_us),
                        static_cast<std::uint64_t>(m_cfg.chaos.max_delay_us)));
                }
                if (auto d = m_cfg.channel_delay_us.find({msg.sender, msg.receiver}); d != m_cfg.channel_delay_us.end())
                {
                    deliver_at += d->second;
                }
                auto &seq = m_seq[{msg.sender, msg.receiver}];
                msg.seq = seq;
                const auto cap = is_control(msg) ? 0 : m_cfg.capacity;
                if (!it->second->push(msg, deliver_at, cap))
                {
                    return false;
                }
                ++seq;
            }
            return true;
        }

        std::optional<EnvelopeMessage> poll(LpId self) override { return box(self).pop(m_clock()); }

        void wait(LpId self, std::chrono::microseconds timeout) override { box(self).wait(timeout); }

        void close() override
        {
            m_closed = true;
            for (auto &[id, b] : m_boxes)
            {
                b->close();
            }
        }

        std::vector<EnvelopeMessage> in_flight() const override
        {
            std::vector<EnvelopeMessage> out;
            for (const auto &[id, b] : m_boxes)
            {
                auto s = b->snapshot();
                out.insert(out.end(), s.begin(), s.end());
            }
            return out;
        }

    private:
        // Control traffic is never refused; only simulation traffic sees backpressure.
        static bool is_control(const EnvelopeMessage &m)
        {
            const auto k = m.kind();
            return k != MessageKind::Txn && k != MessageKind::Anti && k != MessageKind::Cancelback;
        }

        Mailbox &box(LpId id)
        {
            auto it = m_boxes.find(id);
            if (it == m_boxes.end())
            {
                throw TransportError("unknown endpoint " + std::to_string(id));
            }
            return *it->second;
        }

        InProcConfig m_cfg;
        MicroClock m_clock;
        std::map<LpId, std::unique_ptr<Mailbox>> m_boxes;
        std::mutex m_mutex;
        RngStream m_chaos_state;
        std::map<std::pair<LpId, LpId>, std::uint32_t> m_seq;
        std::atomic<bool> m_closed{false};
    };

    // --- TCP ----------------------------------------------------------------
    //
    // One listening socket per endpoint. A connection starts with a handshake of
    // u8 version + u16 sender id; afterwards it carries frames in one direction.

    struct TcpAddress
    {
        std::string host = "127.0.0.1";
        std::uint16_t port = 0;
    };

    namespace detail
    {
        inline void write_all(int fd, const std::byte *data, std::size_t n)
        {
            while (n > 0)
            {
                const auto w = ::send(fd, data, n, MSG_NOSIGNAL);
                if (w <= 0)
                {
                    if (w < 0 && errno == EINTR)
                    {
                        continue;
                    }
                    throw TransportError("tcp write failed");
                }
                data += w;
                n -= static_cast<std::size_t>(w);
            }
        }

        inline bool read_all(int fd, std::byte *data, std::size_t n)
        {
            while (n > 0)
            {
                const auto r = ::recv(fd, data, n, 0);
                if (r == 0)
                {
                    return false;
                }
                if (r < 0)
                {
                    if (errno == EINTR)
                    {
                        continue;
                    }
                    return false;
                }
                data += r;
                n -= static_cast<std::size_t>(r);
            }
            return true;
        }
    }

    // Hosts a set of local endpoints; reaches the rest by address. Works within one
    // process (all endpoints local, loopback sockets) or across processes.
    class TcpTransport final : public Transport
    {
    public:
        // `addresses` lists every endpoint; ports of local endpoints may be 0 and
        // are then chosen by the OS (see address()).
        TcpTransport(std::map<LpId, TcpAddress> addresses, std::vector<LpId> local)
            : m_addresses(std::move(addresses)), m_clock(steady_micro_clock())
        {
            for (auto id : local)
            {
                auto ep = std::make_unique<Endpoint>();
                ep->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
                if (ep->listen_fd < 0)
                {
                    throw TransportError("socket() failed");
                }
                int one = 1;
                ::setsockopt(ep->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
                sockaddr_in addr{};
                addr.sin_family = AF_INET;
                addr.sin_port = htons(m_addresses[id].port);
                ::inet_pton(AF_INET, m_addresses[id].host.c_str(), &addr.sin_addr);
                if (::bind(ep->listen_fd, reinterpret_cast<sockaddr *>(&addr), sizeof addr) != 0 ||
                    ::listen(ep->listen_fd, 64) != 0)
                {
                    ::close(ep->listen_fd);
                    throw TransportError("cannot listen on port " + std::to_string(m_addresses[id].port));
                }
                socklen_t len = sizeof addr;
                ::getsockname(ep->listen_fd, reinterpret_cast<sockaddr *>(&addr), &len);
                m_addresses[id].port = ntohs(addr.sin_port);
                m_endpoints.emplace(id, std::move(ep));
            }
            for (auto &[id, ep] : m_endpoints)
            {
                Endpoint *raw = ep.get();
                raw->acceptor = std::thread([this, raw] { accept_loop(*raw); });
            }
        }

        ~TcpTransport() override { close(); }

        TcpAddress address(LpId id) const { return m_addresses.at(id); }

        // Addresses learned after binding; remote processes need these.
        void set_address(LpId id, TcpAddress a)
        {
            std::lock_guard lock(m_mutex);
            m_addresses[id] = std::move(a);
        }

        bool try_send(EnvelopeMessage msg) override
        {
            if (m_closed.load())
            {
                throw TransportError("send on closed transport");
            }
            auto &out = outgoing(msg.sender, msg.receiver);
            std::lock_guard lock(out.mutex);
            msg.seq = out.seq++;
            const auto frame = encode(msg);
            detail::write_all(out.fd, frame.data(), frame.size());
            return true;
        }

        std::optional<EnvelopeMessage> poll(LpId self) override { return local(self).inbox.pop(m_clock()); }

        void wait(LpId self, std::chrono::microseconds timeout) override { local(self).inbox.wait(timeout); }

        void close() override
        {
            if (m_closed.exchange(true))
            {
                return;
            }
            std::vector<std::thread> readers;
            {
                std::lock_guard lock(m_mutex);
                for (auto &[key, out] : m_out)
                {
                    ::shutdown(out->fd, SHUT_RDWR);
                    ::close(out->fd);
                }
                for (auto &[id, ep] : m_endpoints)
                {
                    ::shutdown(ep->listen_fd, SHUT_RDWR);
                    ::close(ep->listen_fd);
                    ep->inbox.close();
                }
                for (int fd : m_accepted)
                {
                    ::shutdown(fd, SHUT_RDWR);
                }
                readers = std::move(m_readers);
            }
            for (auto &[id, ep] : m_endpoints)
            {
                if (ep->acceptor.joinable())
                {
                    ep->acceptor.join();
                }
            }
            for (auto &t : readers)
            {
                if (t.joinable())
                {
                    t.join();
                }
            }
            std::lock_guard lock(m_mutex);
            for (int fd : m_accepted)
            {
                ::close(fd);
            }
            m_accepted.clear();
        }

        std::vector<EnvelopeMessage> in_flight() const override
        {
            std::vector<EnvelopeMessage> out;
            for (const auto &[id, ep] : m_endpoints)
            {
                auto s = ep->inbox.snapshot();
                out.insert(out.end(), s.begin(), s.end());
            }
            return out;
        }

    private:
        struct Endpoint
        {
            int listen_fd = -1;
            Mailbox inbox;
            std::thread acceptor;
        };

        struct Outgoing
        {
            int fd = -1;
            std::uint32_t seq = 0;
            std::mutex mutex;
        };

        Endpoint &local(LpId id)
        {
            auto it = m_endpoints.find(id);
            if (it == m_endpoints.end())
            {
                throw TransportError("endpoint " + std::to_string(id) + " is not hosted here");
            }
            return *it->second;
        }

        Outgoing &outgoing(LpId from, LpId to)
        {
            std::lock_guard lock(m_mutex);
            auto &slot = m_out[{from, to}];
            if (slot)
            {
                return *slot;
            }
            auto it = m_addresses.find(to);
            if (it == m_addresses.end())
            {
                throw TransportError("no address for endpoint " + std::to_string(to));
            }
            const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
            sockaddr_in addr{};
            addr.sin_family = AF_INET;
            addr.sin_port = htons(it->second.port);
            ::inet_pton(AF_INET, it->second.host.c_str(), &addr.sin_addr);
            bool connected = false;
            for (int attempt = 0; attempt < 200 && !connected; ++attempt)
            {
                connected = ::connect(fd, reinterpret_cast<sockaddr *>(&addr), sizeof addr) == 0;
                if (!connected)
                {
                    std::this_thread::sleep_for(std::chrono::milliseconds(25));
                }
            }
            if (!connected)
            {
                ::close(fd);
                throw TransportError("cannot connect to endpoint " + std::to_string(to));
            }
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            std::byte hello[3];
            hello[0] = static_cast<std::byte>(kWireVersion);
            hello[1] = static_cast<std::byte>(from & 0xFF);
            hello[2] = static_cast<std::byte>(from >> 8);
            detail::write_all(fd, hello, sizeof hello);
            slot = std::make_unique<Outgoing>();
            slot->fd = fd;
            return *slot;
        }

        void accept_loop(Endpoint &ep)
        {
            while (!m_closed.load())
            {
                const int fd = ::accept(ep.listen_fd, nullptr, nullptr);
                if (fd < 0)
                {
                    return;
                }
                std::lock_guard lock(m_mutex);
                if (m_closed.load())
                {
                    ::close(fd);
                    return;
                }
                m_accepted.push_back(fd);
                m_readers.emplace_back([this, &ep, fd] { read_loop(ep, fd); });
            }
        }

        void read_loop(Endpoint &ep, int fd)
        {
            std::byte hello[3];
            if (!detail::read_all(fd, hello, sizeof hello) || std::to_integer<std::uint8_t>(hello[0]) != kWireVersion)
            {
                return;
            }
            std::vector<std::byte> frame;
            while (true)
            {
                std::byte len_bytes[4];
                if (!detail::read_all(fd, len_bytes, 4))
                {
                    return;
                }
                WireReader lr(len_bytes);
                const auto len = lr.u32();
                frame.resize(4 + len);
                std::copy(len_bytes, len_bytes + 4, frame.begin());
                if (!detail::read_all(fd, frame.data() + 4, len))
                {
                    return;
                }
                try
                {
                    auto msg = decode(frame);
                    ep.inbox.push(std::move(msg), 0, 0);
                }
                catch (const DecodeError &)
                {
                    return;
                }
            }
        }

        std::map<LpId, TcpAddress> m_addresses;
        MicroClock m_clock;
        std::map<LpId, std::unique_ptr<Endpoint>> m_endpoints;
        std::map<std::pair<LpId, LpId>, std::unique_ptr<Outgoing>> m_out;
        std::vector<std::thread> m_readers;
        std::vector<int> m_accepted;
        std::mutex m_mutex;
        std::atomic<bool> m_closed{false};
    };
}
