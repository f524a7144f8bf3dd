#pragma once

#include "controller.hpp"
#include "lp.hpp"
#include "model.hpp"
#include "transport.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <deque>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

namespace gpsstw
{
    enum class SyncMode
    {
        TimeWarp,
        Srtw,
    };

    enum class TransportKind
    {
        InProc,
        Tcp,
    };

    // One metrics CSV row: an LP's state as reported in one GVT round.
    struct MetricsRow
    {
        double wall_ms = 0.0;
        LpId lp = 0;
        SimTime lvt = kInfiniteTime;
        SimTime gvt = 0;
        double committed_rate = 0.0;
        double avg_uncommitted = 0.0;
        std::optional<std::uint64_t> actuator;
        LpMode mode = LpMode::Running;
        std::uint64_t rollbacks_cum = 0;
        std::uint64_t rolled_back_moves_cum = 0;
        std::uint64_t cancelbacks_cum = 0;
    };

    inline std::string metrics_header()
    {
        return "wall_ms,lp_id,lvt,gvt,committed_rate,avg_uncommitted,actuator,lp_mode,rollbacks_cum,"
               "rolled_back_moves_cum,cancelbacks_cum";
    }

    inline std::string metrics_csv(const MetricsRow &r)
    {
        auto time = [](SimTime t) { return t == kInfiniteTime ? std::string("inf") : std::to_string(t); };
        std::ostringstream os;
        os << std::fixed << std::setprecision(3) << r.wall_ms << ',' << r.lp << ',' << time(r.lvt) << ','
           << time(r.gvt) << ',' << r.committed_rate << ',' << r.avg_uncommitted << ',';
        if (r.actuator)
        {
            os << *r.actuator;
        }
        os << ',' << mode_name(r.mode) << ',' << r.rollbacks_cum << ',' << r.rolled_back_moves_cum << ','
           << r.cancelbacks_cum;
        return os.str();
    }

    inline std::vector<MetricsRow> metrics_rows(const GvtRound &round, double wall_ms)
    {
        std::vector<MetricsRow> rows;
        const auto horizon = commit_horizon(round);
        for (std::size_t lp = 0; lp < round.reports.size(); ++lp)
        {
            const auto &r = round.reports[lp];
            MetricsRow row;
            row.wall_ms = wall_ms;
            row.lp = static_cast<LpId>(lp);
            row.lvt = r.lvt;
            row.gvt = horizon.time;
            row.committed_rate = r.committed_rate;
            row.avg_uncommitted = r.avg_uncommitted;
            row.actuator = r.actuator;
            row.mode = static_cast<LpMode>(r.mode);
            row.rollbacks_cum = r.rollback_count;
            row.rolled_back_moves_cum = r.rolled_back_moves;
            row.cancelbacks_cum = r.cancelbacks_issued;
            rows.push_back(row);
        }
        return rows;
    }

    struct RunConfig
    {
        SyncMode mode = SyncMode::TimeWarp;
        std::uint64_t seed = 1;
        TransportKind transport = TransportKind::InProc;
        double gvt_period_ms = 250.0;
        std::size_t checkpoint_interval = 1;
        LpccConfig lpcc;
        ChaosConfig chaos;
        std::map<std::pair<LpId, LpId>, std::int64_t> channel_delay_us;
        std::size_t queue_capacity = 4096;
        std::optional<std::uint64_t> move_budget; // all moves performed, re-executions included
        std::vector<LpId> partition_to_lp;        // empty: one LP per partition
        bool aggressive_cancellation = false;
        bool trace_commits = false;
        std::optional<std::uint64_t> rollback_limit; // watchdog on total rollbacks
        double timeout_s = 600.0;
        std::function<void(const MetricsRow &)> metrics;
    };

    enum class RunStatus
    {
        Completed,
        BudgetExceeded,
        WatchdogHalted,
        TimedOut,
    };

    inline const char *status_name(RunStatus s)
    {
        switch (s)
        {
        case RunStatus::Completed: return "completed";
        case RunStatus::BudgetExceeded: return "move budget exceeded";
        case RunStatus::WatchdogHalted: return "halted by rollback watchdog";
        case RunStatus::TimedOut: return "timed out";
        }
        return "?";
    }

    struct RunOutcome
    {
        RunStatus status = RunStatus::Completed;
        FinalReport report;
        std::vector<GvtRound> rounds;
        std::string diagnostic;
    };

    // Why a run should stop early, if it should.
    inline std::optional<std::pair<RunStatus, std::string>> stop_reason(const RunConfig &cfg, std::uint64_t moves,
                                                                        std::uint64_t rollbacks, double seconds)
    {
        if (cfg.move_budget && moves >= *cfg.move_budget)
        {
            return std::pair{RunStatus::BudgetExceeded, "move budget of " + std::to_string(*cfg.move_budget) +
                                                            " reached after " + std::to_string(moves) + " moves"};
        }
        if (cfg.rollback_limit && rollbacks > *cfg.rollback_limit)
        {
            return std::pair{RunStatus::WatchdogHalted, std::to_string(rollbacks) + " rollbacks exceed the limit of " +
                                                            std::to_string(*cfg.rollback_limit)};
        }
        if (seconds > cfg.timeout_s)
        {
            std::ostringstream os;
            os << "no end after " << cfg.timeout_s << " s";
            return std::pair{RunStatus::TimedOut, os.str()};
        }
        return std::nullopt;
    }

    inline std::vector<LpId> resolve_mapping(const ModelProgram &program, const std::vector<LpId> &requested,
                                             std::size_t *lp_count = nullptr)
    {
        std::vector<LpId> map = requested;
        if (map.empty())
        {
            for (PartitionIndex p = 0; p < program.partitions.size(); ++p)
            {
                map.push_back(static_cast<LpId>(p));
            }
        }
        if (map.size() != program.partitions.size())
        {
            throw SimulationError("partition map has " + std::to_string(map.size()) + " entries for " +
                                  std::to_string(program.partitions.size()) + " partitions");
        }
        LpId top = 0;
        for (auto id : map)
        {
            top = std::max(top, id);
        }
        std::vector<bool> used(static_cast<std::size_t>(top) + 1, false);
        for (auto id : map)
        {
            used[id] = true;
        }
        for (std::size_t i = 0; i < used.size(); ++i)
        {
            if (!used[i])
            {
                throw SimulationError("LP " + std::to_string(i) + " has no partition");
            }
        }
        if (lp_count)
        {
            *lp_count = used.size();
        }
        return map;
    }

    inline LpConfig lp_config_for(const RunConfig &cfg)
    {
        LpConfig c;
        c.checkpoint_interval = cfg.checkpoint_interval;
        c.aggressive_cancellation = cfg.aggressive_cancellation;
        c.trace_commits = cfg.trace_commits;
        c.lpcc_enabled = cfg.mode == SyncMode::Srtw;
        c.lpcc = cfg.lpcc;
        return c;
    }

    inline std::string lp_config_to_json(const LpConfig &c)
    {
        nlohmann::json j{
            {"checkpoint_interval", c.checkpoint_interval},
            {"aggressive_cancellation", c.aggressive_cancellation},
            {"cancelback_exit_factor", c.cancelback_exit_factor},
            {"lpcc_enabled", c.lpcc_enabled},
            {"trace_commits", c.trace_commits},
            {"lpcc",
             {{"interval_ms", c.lpcc.interval_ms},
              {"epsilon", c.lpcc.epsilon},
              {"capacity", c.lpcc.capacity},
              {"delta", c.lpcc.delta},
              {"floor", c.lpcc.floor},
              {"extra_indicators", c.lpcc.extra_indicators},
              {"subsamples", c.lpcc.subsamples}}},
        };
        return j.dump();
    }

    inline LpConfig lp_config_from_json(const std::string &text)
    {
        const auto j = nlohmann::json::parse(text);
        LpConfig c;
        c.checkpoint_interval = j.at("checkpoint_interval").get<std::size_t>();
        c.aggressive_cancellation = j.at("aggressive_cancellation").get<bool>();
        c.cancelback_exit_factor = j.at("cancelback_exit_factor").get<double>();
        c.lpcc_enabled = j.at("lpcc_enabled").get<bool>();
        c.trace_commits = j.value("trace_commits", false);
        const auto &l = j.at("lpcc");
        c.lpcc.interval_ms = l.at("interval_ms").get<double>();
        c.lpcc.epsilon = l.at("epsilon").get<double>();
        c.lpcc.capacity = l.at("capacity").get<std::size_t>();
        c.lpcc.delta = l.at("delta").get<double>();
        c.lpcc.floor = l.at("floor").get<std::uint64_t>();
        c.lpcc.extra_indicators = l.at("extra_indicators").get<bool>();
        c.lpcc.subsamples = l.at("subsamples").get<std::size_t>();
        return c;
    }

    // An LP plus what its host needs around it: the unsent outbox and LPCC timing.
    class LpDriver
    {
    public:
        explicit LpDriver(std::unique_ptr<LogicalProcess> lp) : m_lp(std::move(lp)) {}

        LogicalProcess &lp() { return *m_lp; }
        const LogicalProcess &lp() const { return *m_lp; }
        const std::deque<EnvelopeMessage> &unsent() const noexcept { return m_unsent; }
        bool reported() const noexcept { return m_reported && m_unsent.empty(); }

        void deliver(const EnvelopeMessage &m)
        {
            if (m.kind() == MessageKind::ReportReq)
            {
                m_reported = true;
            }
            m_lp->handle(m);
        }

        // Returns true when nothing is left waiting for queue space.
        bool flush(Transport &t)
        {
            for (auto &m : m_lp->take_outbox())
            {
                m_unsent.push_back(std::move(m));
            }
            while (!m_unsent.empty())
            {
                if (!t.try_send(m_unsent.front()))
                {
                    return false;
                }
                m_unsent.pop_front();
            }
            return true;
        }

        StepResult step()
        {
            auto r = m_lp->step();
            if (m_lp->take_end_announcement())
            {
                EnvelopeMessage m;
                m.sender = m_lp->id();
                m.receiver = kControllerId;
                m.payload = GvtRepMsg{0, {}};
                m_unsent.push_back(std::move(m));
            }
            return r;
        }

        void on_clock(double now_ms)
        {
            const auto &cfg = m_lp->config();
            if (!cfg.lpcc_enabled)
            {
                return;
            }
            if (!m_next_tick)
            {
                m_lp->lpcc_tick(now_ms); // baseline
                m_next_tick = now_ms + cfg.lpcc.interval_ms;
                m_next_sample = now_ms;
            }
            const double sub = cfg.lpcc.interval_ms / static_cast<double>(std::max<std::size_t>(cfg.lpcc.subsamples, 1));
            while (now_ms >= m_next_sample + sub && m_next_sample + sub < *m_next_tick)
            {
                m_next_sample += sub;
                m_lp->lpcc_sample();
            }
            if (now_ms >= *m_next_tick)
            {
                m_lp->lpcc_tick(now_ms);
                m_next_sample = *m_next_tick;
                *m_next_tick += cfg.lpcc.interval_ms;
                if (*m_next_tick <= now_ms)
                {
                    m_next_tick = now_ms + cfg.lpcc.interval_ms;
                }
            }
        }

    private:
        std::unique_ptr<LogicalProcess> m_lp;
        std::deque<EnvelopeMessage> m_unsent;
        bool m_reported = false;
        std::optional<double> m_next_tick;
        double m_next_sample = 0.0;
    };

    inline std::unique_ptr<LogicalProcess> lp_from_init(LpId id, const InitMsg &init)
    {
        auto program = std::make_shared<const ModelProgram>(parse_model(init.model_source));
        return std::make_unique<LogicalProcess>(id, std::move(program), init.seed, init.partition_to_lp,
                                                lp_config_from_json(init.config_json));
    }

    // Counters shared between LP threads and the controller's watchdog.
    struct SharedProgress
    {
        std::atomic<std::uint64_t> moves{0};
        std::atomic<std::uint64_t> rollbacks{0};
        std::atomic<bool> abort{false};
        std::mutex error_mutex;
        std::string error;

        void fail(const std::string &what)
        {
            {
                std::lock_guard lock(error_mutex);
                if (error.empty())
                {
                    error = what;
                }
            }
            abort = true;
        }
    };

    inline double steady_ms()
    {
        using namespace std::chrono;
        static const auto origin = steady_clock::now();
        return duration<double, std::milli>(steady_clock::now() - origin).count();
    }

    // LP host loop: waits for INIT and START, then alternates message delivery and
    // steps until the LP has sent its final report.
    inline void serve_lp(Transport &t, LpId id, SharedProgress &progress, std::unique_ptr<LpDriver> *keep = nullptr)
    {
        using namespace std::chrono_literals;
        std::unique_ptr<LpDriver> drv;
        std::deque<EnvelopeMessage> early;
        bool started = false;
        while (!started)
        {
            if (progress.abort)
            {
                return;
            }
            auto m = t.poll(id);
            if (!m)
            {
                t.wait(id, 1ms);
                continue;
            }
            if (const auto *init = std::get_if<InitMsg>(&m->payload))
            {
                drv = std::make_unique<LpDriver>(lp_from_init(id, *init));
            }
            else if (m->kind() == MessageKind::Start)
            {
                if (!drv)
                {
                    throw ProtocolError("START before INIT");
                }
                started = true;
            }
            else
            {
                early.push_back(std::move(*m)); // peers may start first
            }
        }
        for (auto &m : early)
        {
            drv->deliver(m);
        }

        std::uint64_t seen_moves = 0;
        std::uint64_t seen_rollbacks = 0;
        while (!progress.abort)
        {
            for (int i = 0; i < 512; ++i)
            {
                auto m = t.poll(id);
                if (!m)
                {
                    break;
                }
                drv->deliver(*m);
            }
            drv->on_clock(steady_ms());
            bool progressed = false;
            if (drv->flush(t))
            {
                const auto r = drv->step();
                progressed = r.kind == StepKind::Moved || r.cancelled_back > 0;
                drv->flush(t);
            }
            const auto &s = drv->lp().stats();
            progress.moves += s.total_moves - seen_moves;
            progress.rollbacks += s.rollback_count - seen_rollbacks;
            seen_moves = s.total_moves;
            seen_rollbacks = s.rollback_count;
            if (drv->reported())
            {
                break;
            }
            if (!progressed)
            {
                t.wait(id, 1ms);
                std::this_thread::sleep_for(50us);
            }
        }
        if (keep)
        {
            *keep = std::move(drv);
        }
    }

    inline void send_init(Controller &, Transport &t, const ModelProgram &program, const std::vector<LpId> &map,
                          std::size_t lp_count, const RunConfig &cfg)
    {
        const auto text = dump_model(program);
        const auto json = lp_config_to_json(lp_config_for(cfg));
        for (std::size_t lp = 0; lp < lp_count; ++lp)
        {
            EnvelopeMessage m;
            m.sender = kControllerId;
            m.receiver = static_cast<LpId>(lp);
            m.payload = InitMsg{text, cfg.seed, map, json};
            t.try_send(m);
        }
        for (std::size_t lp = 0; lp < lp_count; ++lp)
        {
            EnvelopeMessage m;
            m.sender = kControllerId;
            m.receiver = static_cast<LpId>(lp);
            m.payload = StartMsg{};
            t.try_send(m);
        }
    }

    // Controller loop on the calling thread. LPs run elsewhere (threads or processes).
    inline RunOutcome drive_controller(Transport &t, const ModelProgram &program, const std::vector<LpId> &map,
                                       std::size_t lp_count, const RunConfig &cfg, SharedProgress &progress)
    {
        using namespace std::chrono_literals;
        RunOutcome out;
        Controller ctl(lp_count, program.partitions.size());
        const double start = steady_ms();
        ctl.on_round = [&](const GvtRound &round)
        {
            if (cfg.metrics)
            {
                for (const auto &row : metrics_rows(round, steady_ms() - start))
                {
                    cfg.metrics(row);
                }
            }
        };
        send_init(ctl, t, program, map, lp_count, cfg);
        double last_round = start;
        while (!ctl.done())
        {
            if (progress.abort)
            {
                throw SimulationError(progress.error.empty() ? "LP failure" : progress.error);
            }
            while (auto m = t.poll(kControllerId))
            {
                ctl.handle(*m);
            }
            const double now = steady_ms();
            if (ctl.phase() == Controller::Phase::Running)
            {
                if (auto stop = stop_reason(cfg, progress.moves, progress.rollbacks, (now - start) / 1000.0))
                {
                    std::tie(out.status, out.diagnostic) = *stop;
                    ctl.request_final(std::nullopt);
                }
                else if (!ctl.round_open() && (ctl.round_wanted() || now - last_round >= cfg.gvt_period_ms))
                {
                    ctl.start_round();
                    last_round = now;
                }
            }
            else if ((now - start) / 1000.0 > cfg.timeout_s + 30.0)
            {
                throw SimulationError("LPs did not deliver final reports");
            }
            for (auto &m : ctl.take_outbox())
            {
                t.try_send(std::move(m));
            }
            t.wait(kControllerId, 1ms);
        }
        out.report = ctl.result();
        out.report.wall_seconds = (steady_ms() - start) / 1000.0;
        if (out.status != RunStatus::Completed)
        {
            out.report.completed = false;
            out.report.end_key.reset();
        }
        out.rounds = ctl.history();
        return out;
    }

    // Threaded host: one thread per LP plus the controller on the calling thread.
    inline RunOutcome run_parallel(std::shared_ptr<const ModelProgram> program, const RunConfig &cfg,
                                   std::vector<std::unique_ptr<LpDriver>> *lps_out = nullptr)
    {
        std::size_t lp_count = 0;
        const auto map = resolve_mapping(*program, cfg.partition_to_lp, &lp_count);
        std::vector<LpId> endpoints;
        for (std::size_t i = 0; i < lp_count; ++i)
        {
            endpoints.push_back(static_cast<LpId>(i));
        }
        endpoints.push_back(kControllerId);

        std::unique_ptr<Transport> transport;
        if (cfg.transport == TransportKind::InProc)
        {
            InProcConfig ic;
            ic.capacity = cfg.queue_capacity;
            ic.chaos = cfg.chaos;
            ic.channel_delay_us = cfg.channel_delay_us;
            transport = std::make_unique<InProcTransport>(endpoints, ic);
        }
        else
        {
            std::map<LpId, TcpAddress> addrs;
            for (auto id : endpoints)
            {
                addrs[id] = TcpAddress{"127.0.0.1", 0};
            }
            transport = std::make_unique<TcpTransport>(addrs, endpoints);
        }

        SharedProgress progress;
        std::vector<std::unique_ptr<LpDriver>> kept(lp_count);
        std::vector<std::thread> threads;
        for (std::size_t i = 0; i < lp_count; ++i)
        {
            threads.emplace_back(
                [&, i]
                {
                    try
                    {
                        serve_lp(*transport, static_cast<LpId>(i), progress, &kept[i]);
                    }
                    catch (const std::exception &e)
                    {
                        progress.fail("LP " + std::to_string(i) + ": " + e.what());
                    }
                });
        }
        RunOutcome out;
        std::string failure;
        try
        {
            out = drive_controller(*transport, *program, map, lp_count, cfg, progress);
        }
        catch (const std::exception &e)
        {
            failure = e.what();
            progress.abort = true;
        }
        for (auto &th : threads)
        {
            th.join();
        }
        transport->close();
        if (!failure.empty())
        {
            throw SimulationError(failure);
        }
        if (lps_out)
        {
            *lps_out = std::move(kept);
        }
        return out;
    }

    // --- deterministic lockstep host ---------------------------------------------
    //
    // Runs every LP and the controller on the calling thread against a virtual
    // clock. Each round advances the clock by round_us; LP i performs up to
    // steps_per_round[i] steps per round. Same inputs, same trajectory.

    struct LockstepConfig
    {
        std::int64_t round_us = 100;
        std::vector<std::size_t> steps_per_round; // empty: one step for every LP
        std::uint64_t max_rounds = 50'000'000;
    };

    struct LockstepView
    {
        const std::vector<std::unique_ptr<LpDriver>> &lps;
        const InProcTransport &transport;
        const GvtRound &round;
        OrderKey horizon;
        double wall_ms;
    };

    inline RunOutcome run_lockstep(std::shared_ptr<const ModelProgram> program, const RunConfig &cfg,
                                   const LockstepConfig &ls = {},
                                   const std::function<void(const LockstepView &)> &on_round = {},
                                   std::vector<std::unique_ptr<LpDriver>> *lps_out = nullptr)
    {
        std::size_t lp_count = 0;
        const auto map = resolve_mapping(*program, cfg.partition_to_lp, &lp_count);
        auto now_us = std::make_shared<std::int64_t>(0);
        std::vector<LpId> endpoints;
        for (std::size_t i = 0; i < lp_count; ++i)
        {
            endpoints.push_back(static_cast<LpId>(i));
        }
        endpoints.push_back(kControllerId);
        InProcConfig ic;
        ic.capacity = cfg.queue_capacity;
        ic.chaos = cfg.chaos;
        ic.channel_delay_us = cfg.channel_delay_us;
        InProcTransport transport(endpoints, ic, [now_us] { return *now_us; });

        const auto text = dump_model(*program);
        const auto json = lp_config_to_json(lp_config_for(cfg));
        std::vector<std::unique_ptr<LpDriver>> lps;
        for (std::size_t i = 0; i < lp_count; ++i)
        {
            lps.push_back(std::make_unique<LpDriver>(lp_from_init(static_cast<LpId>(i), InitMsg{text, cfg.seed, map, json})));
        }

        RunOutcome out;
        Controller ctl(lp_count, program->partitions.size());
        auto virtual_ms = [&] { return static_cast<double>(*now_us) / 1000.0; };
        ctl.on_round = [&](const GvtRound &round)
        {
            const double ms = virtual_ms();
            if (cfg.metrics)
            {
                for (const auto &row : metrics_rows(round, ms))
                {
                    cfg.metrics(row);
                }
            }
            if (on_round)
            {
                on_round(LockstepView{lps, transport, round, commit_horizon(round), ms});
            }
        };

        double last_round = 0.0;
        std::uint64_t rounds = 0;
        while (!ctl.done())
        {
            if (++rounds > ls.max_rounds)
            {
                throw SimulationError("lockstep run exceeded " + std::to_string(ls.max_rounds) + " rounds");
            }
            std::uint64_t moves = 0;
            std::uint64_t rollbacks = 0;
            for (std::size_t i = 0; i < lp_count; ++i)
            {
                auto &d = *lps[i];
                const auto id = static_cast<LpId>(i);
                while (auto m = transport.poll(id))
                {
                    d.deliver(*m);
                }
                d.on_clock(virtual_ms());
                const auto steps = ls.steps_per_round.empty() ? std::size_t{1} : ls.steps_per_round.at(i);
                for (std::size_t s = 0; s < steps && d.flush(transport); ++s)
                {
                    d.step();
                }
                d.flush(transport);
                moves += d.lp().stats().total_moves;
                rollbacks += d.lp().stats().rollback_count;
            }

            while (auto m = transport.poll(kControllerId))
            {
                ctl.handle(*m);
            }
            const double now = virtual_ms();
            if (ctl.phase() == Controller::Phase::Running)
            {
                if (auto stop = stop_reason(cfg, moves, rollbacks, now / 1000.0))
                {
                    std::tie(out.status, out.diagnostic) = *stop;
                    ctl.request_final(std::nullopt);
                }
                else if (!ctl.round_open() && (ctl.round_wanted() || now - last_round >= cfg.gvt_period_ms))
                {
                    ctl.start_round();
                    last_round = now;
                }
            }
            for (auto &m : ctl.take_outbox())
            {
                transport.try_send(std::move(m));
            }
            *now_us += ls.round_us;
        }
        out.report = ctl.result();
        out.report.wall_seconds = virtual_ms() / 1000.0;
        if (out.status != RunStatus::Completed)
        {
            out.report.completed = false;
            out.report.end_key.reset();
        }
        out.rounds = ctl.history();
        if (lps_out)
        {
            *lps_out = std::move(lps);
        }
        return out;
    }
}
