#pragma once

#include "gpsstw/runtime.hpp"
#include "random_program.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <sstream>

// Acceptance checks shared by the acceptance binary and the test suites.
namespace gpsstw::criteria
{
    struct Verdict
    {
        bool pass = true;
        std::string detail;
        std::vector<std::string> failures;

        void fail(const std::string &why)
        {
            pass = false;
            if (failures.size() < 8)
            {
                failures.push_back(why);
            }
        }
    };

    inline double seconds_since(std::chrono::steady_clock::time_point t0)
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    inline std::uint64_t rolled_back_moves(const FinalReport &r)
    {
        std::uint64_t n = 0;
        for (const auto &s : r.lp_stats)
        {
            n += s.rolled_back_moves;
        }
        return n;
    }

    inline std::uint64_t rollback_count(const FinalReport &r)
    {
        std::uint64_t n = 0;
        for (const auto &s : r.lp_stats)
        {
            n += s.rollback_count;
        }
        return n;
    }

    inline std::string mode_label(SyncMode m) { return m == SyncMode::Srtw ? "srtw" : "tw"; }

    inline std::string fmt(double v, int precision = 1)
    {
        std::ostringstream os;
        os << std::fixed << std::setprecision(precision) << v;
        return os.str();
    }

    // Settings for the oracle runs: short GVT and LPCC periods so SRTW actually
    // throttles within these small models.
    inline RunConfig oracle_config(SyncMode mode, std::uint64_t seed, bool chaos)
    {
        RunConfig cfg;
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.gvt_period_ms = 5.0;
        cfg.lpcc.interval_ms = 2.0;
        cfg.lpcc.floor = 4;
        cfg.timeout_s = 60.0;
        if (chaos)
        {
            cfg.chaos = ChaosConfig{true, 0, 2000, seed * 31 + 7};
        }
        return cfg;
    }

    inline const std::vector<std::string> &oracle_models()
    {
        static const std::vector<std::string> models{"sparse_transfer_scaled", "dense_transfer_scaled", "zero_delay_loop",
                                                     "four_stage", "single", "bidirectional"};
        return models;
    }

    // 1. Threaded parallel runs reproduce the sequential report exactly.
    inline Verdict oracle_equivalence(const std::vector<std::string> &models, std::uint64_t seeds,
                                      TransportKind transport = TransportKind::InProc, double budget_s = 120.0)
    {
        Verdict v;
        const auto t0 = std::chrono::steady_clock::now();
        std::size_t runs = 0;
        for (const auto &name : models)
        {
            const auto program = test::load_model(name);
            for (std::uint64_t seed = 1; seed <= seeds; ++seed)
            {
                const auto ref = run_sequential(program, seed);
                for (auto mode : {SyncMode::TimeWarp, SyncMode::Srtw})
                {
                    for (bool chaos : {false, true})
                    {
                        auto cfg = oracle_config(mode, seed, chaos);
                        cfg.transport = transport;
                        const auto out = run_parallel(program, cfg);
                        ++runs;
                        if (out.status != RunStatus::Completed || !out.report.same_outcome(ref))
                        {
                            v.fail(name + " seed " + std::to_string(seed) + " " + mode_label(mode) +
                                   (chaos ? " chaos" : " plain") + ": " + status_name(out.status) +
                                   (out.report.same_outcome(ref) ? "" : ", report differs from the oracle"));
                        }
                    }
                }
            }
        }
        const double elapsed = seconds_since(t0);
        if (elapsed >= budget_s)
        {
            v.fail("took " + fmt(elapsed) + " s, limit " + fmt(budget_s) + " s");
        }
        v.detail = std::to_string(runs) + " runs over " + std::to_string(models.size()) + " models x " +
                   std::to_string(seeds) + " seeds, " + fmt(elapsed) + " s";
        return v;
    }

    // 2. Delayed LP1->LP2 traffic drives LP2 ahead; SRTW must roll back less.
    struct RollbackReductionSettings
    {
        std::string model = "sparse_transfer_rollback";
        std::uint64_t runs = 5;
        double gvt_period_ms = 10.0;
        double lpcc_interval_ms = 20.0;
        std::uint64_t floor = 16;
        std::int64_t delay_us = 5000;
        double required_reduction = 0.05;
        double per_run_limit_s = 60.0;
    };

    inline RunConfig rollback_reduction_config(const RollbackReductionSettings &s, SyncMode mode, std::uint64_t seed)
    {
        RunConfig cfg;
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.gvt_period_ms = s.gvt_period_ms;
        cfg.lpcc.interval_ms = s.lpcc_interval_ms;
        cfg.lpcc.floor = s.floor;
        cfg.channel_delay_us[{0, 1}] = s.delay_us;
        cfg.timeout_s = 600.0;
        return cfg;
    }

    inline std::uint64_t median(std::vector<std::uint64_t> v)
    {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    }

    inline Verdict rollback_reduction(const RollbackReductionSettings &s = {})
    {
        Verdict v;
        const auto program = test::load_model(s.model);
        std::vector<std::uint64_t> tw, srtw;
        double slowest = 0.0;
        for (std::uint64_t seed = 1; seed <= s.runs; ++seed)
        {
            const auto ref = run_sequential(program, seed);
            for (auto mode : {SyncMode::TimeWarp, SyncMode::Srtw})
            {
                const auto t0 = std::chrono::steady_clock::now();
                const auto out = run_lockstep(program, rollback_reduction_config(s, mode, seed));
                const double took = seconds_since(t0);
                slowest = std::max(slowest, took);
                if (out.status != RunStatus::Completed || !out.report.same_outcome(ref))
                {
                    v.fail("seed " + std::to_string(seed) + " " + mode_label(mode) + " does not match the oracle");
                }
                if (took >= s.per_run_limit_s)
                {
                    v.fail("seed " + std::to_string(seed) + " " + mode_label(mode) + " took " + fmt(took) + " s");
                }
                (mode == SyncMode::Srtw ? srtw : tw).push_back(rolled_back_moves(out.report));
            }
        }
        const auto m_tw = median(tw);
        const auto m_srtw = median(srtw);
        const double reduction = m_tw > 0 ? 1.0 - static_cast<double>(m_srtw) / static_cast<double>(m_tw) : 0.0;
        if (!(reduction >= s.required_reduction))
        {
            v.fail("reduction " + fmt(100.0 * reduction) + "% below the required " + fmt(100.0 * s.required_reduction) + "%");
        }
        v.detail = "median rolled-back moves TW " + std::to_string(m_tw) + ", SRTW " + std::to_string(m_srtw) + " (" +
                   fmt(100.0 * reduction) + "% fewer, need >= " + fmt(100.0 * s.required_reduction, 0) +
                   "%), slowest run " + fmt(slowest, 2) + " s";
        return v;
    }

    // 3. A model where TW never rolls back, so SRTW's throttling only costs time.
    struct PathologySettings
    {
        std::string model = "dense_transfer_scaled";
        std::uint64_t seed = 1;
        double gvt_period_ms = 5.0;
        double lpcc_interval_ms = 2.0;
        std::uint64_t floor = 16;
        double limit_s = 60.0;
    };

    inline std::vector<std::string> split_csv(const std::string &line)
    {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
        {
            out.push_back(cell);
        }
        if (!line.empty() && line.back() == ',')
        {
            out.emplace_back();
        }
        return out;
    }

    inline Verdict tw_beats_srtw(const PathologySettings &s = {})
    {
        Verdict v;
        const auto t0 = std::chrono::steady_clock::now();
        const auto program = test::load_model(s.model);
        const auto ref = run_sequential(program, s.seed);
        RunConfig cfg;
        cfg.seed = s.seed;
        cfg.gvt_period_ms = s.gvt_period_ms;
        cfg.lpcc.interval_ms = s.lpcc_interval_ms;
        cfg.lpcc.floor = s.floor;

        cfg.mode = SyncMode::TimeWarp;
        const auto tw = run_lockstep(program, cfg);

        cfg.mode = SyncMode::Srtw;
        std::ostringstream csv;
        csv << metrics_header() << '\n';
        cfg.metrics = [&csv](const MetricsRow &row) { csv << metrics_csv(row) << '\n'; };
        const auto srtw = run_lockstep(program, cfg);

        for (const auto *out : {&tw, &srtw})
        {
            if (out->status != RunStatus::Completed || !out->report.same_outcome(ref))
            {
                v.fail(std::string(out == &tw ? "tw" : "srtw") + " run does not match the oracle");
            }
        }

        // (b) read back the CSV as a user would.
        std::istringstream in(csv.str());
        std::string line;
        std::getline(in, line);
        const auto header = split_csv(line);
        const auto col = [&](const std::string &name)
        { return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin()); };
        const auto mode_col = col("lp_mode");
        const auto act_col = col("actuator");
        std::size_t rows = 0;
        std::size_t throttled = 0;
        while (std::getline(in, line))
        {
            const auto cells = split_csv(line);
            ++rows;
            if (cells.size() == header.size() && cells[mode_col] == "cancelback" && !cells[act_col].empty())
            {
                ++throttled;
            }
        }

        const auto tw_rolled = rolled_back_moves(tw.report);
        if (tw_rolled != 0)
        {
            v.fail("(a) TW rolled back " + std::to_string(tw_rolled) + " moves");
        }
        if (throttled == 0)
        {
            v.fail("(b) no metrics row in cancelback mode with an actuator");
        }
        if (!(srtw.report.wall_seconds >= tw.report.wall_seconds))
        {
            v.fail("(c) SRTW wall " + fmt(srtw.report.wall_seconds, 4) + " s < TW " + fmt(tw.report.wall_seconds, 4) + " s");
        }
        const double took = seconds_since(t0);
        if (took >= s.limit_s)
        {
            v.fail("took " + fmt(took) + " s");
        }
        v.detail = "TW rolled back " + std::to_string(tw_rolled) + "; SRTW " + std::to_string(throttled) + "/" +
                   std::to_string(rows) + " metrics rows throttled; wall TW " + fmt(tw.report.wall_seconds, 4) +
                   " s vs SRTW " + fmt(srtw.report.wall_seconds, 4) + " s (lockstep clock)";
        return v;
    }

    // Partition crossings in the sequential history: distinct (transaction, hop > 0).
    inline std::uint64_t crossings(const std::vector<std::pair<OrderKey, PartitionIndex>> &trace)
    {
        std::set<std::tuple<PartitionIndex, std::uint64_t, std::uint32_t>> seen;
        for (const auto &[k, p] : trace)
        {
            if (k.hop > 0)
            {
                seen.emplace(k.origin, k.sequence, k.hop);
            }
        }
        return seen.size();
    }

    // 4. Lazy cancellation ends the zero-delay loop; aggressive cancellation livelocks.
    inline Verdict loop_safety(std::uint64_t seed = 1, double bound_factor = 100.0)
    {
        Verdict v;
        const auto program = test::load_model("zero_delay_loop");
        std::vector<std::pair<OrderKey, PartitionIndex>> trace;
        SequentialOptions so;
        so.trace = &trace;
        const auto ref = run_sequential(program, seed, so);
        const auto cross = crossings(trace);
        const auto bound = static_cast<std::uint64_t>(bound_factor * static_cast<double>(cross));

        RunConfig cfg;
        cfg.seed = seed;
        cfg.gvt_period_ms = 5.0;
        cfg.rollback_limit = bound;
        cfg.timeout_s = 600.0;
        const auto lazy = run_lockstep(program, cfg);
        const auto lazy_rb = rollback_count(lazy.report);
        if (lazy.status != RunStatus::Completed || !lazy.report.same_outcome(ref))
        {
            v.fail(std::string("lazy run: ") + status_name(lazy.status));
        }
        if (lazy_rb > cross)
        {
            v.fail("lazy run rolled back " + std::to_string(lazy_rb) + " times for " + std::to_string(cross) + " crossings");
        }

        cfg.aggressive_cancellation = true;
        const auto aggressive = run_lockstep(program, cfg);
        const auto aggr_rb = rollback_count(aggressive.report);
        if (aggressive.status != RunStatus::WatchdogHalted)
        {
            v.fail(std::string("aggressive run was not halted by the watchdog: ") + status_name(aggressive.status));
        }
        if (aggr_rb <= bound)
        {
            v.fail("aggressive run stayed within the bound");
        }
        v.detail = "lazy: " + std::to_string(lazy_rb) + " rollbacks <= " + std::to_string(cross) +
                   " cross-LP transfers; aggressive: " + std::to_string(aggr_rb) + " rollbacks > " +
                   std::to_string(bound) + " (" + fmt(bound_factor, 0) + "x), " + status_name(aggressive.status);
        return v;
    }

    // 5. GVT safety, inspected globally at every round of deterministic chaos runs.
    struct GvtInvariantCounts
    {
        std::uint64_t rounds = 0;
        std::uint64_t keys_checked = 0;
        std::uint64_t confirmed_ends = 0;
        std::uint64_t runs = 0;
    };

    inline void check_round(const LockstepView &view, OrderKey &last_horizon, OrderKey &last_gvt, Verdict &v,
                            GvtInvariantCounts &n, const std::string &tag)
    {
        ++n.rounds;
        const auto t = view.horizon.time;
        auto check_key = [&](const OrderKey &k, const char *where)
        {
            ++n.keys_checked;
            if (k.time < t)
            {
                v.fail(tag + ": GVT " + to_string(view.horizon) + " above " + where + " " + to_string(k));
            }
        };
        for (const auto &d : view.lps)
        {
            const auto &lp = d->lp();
            for (const auto &txn : lp.state().chain())
            {
                check_key(txn.key, "unprocessed transaction");
            }
            for (const auto &m : lp.input_queue())
            {
                if (const auto *x = std::get_if<TxnMsg>(&m.payload))
                {
                    check_key(x->txn.key, "queued transaction");
                }
                else if (const auto *a = std::get_if<AntiMsg>(&m.payload))
                {
                    check_key(a->key, "queued anti-transaction");
                }
            }
            for (const auto &m : d->unsent())
            {
                if (const auto *x = std::get_if<TxnMsg>(&m.payload))
                {
                    check_key(x->txn.key, "unsent transaction");
                }
            }
            // Fossil collection keeps a restorable state at or below this LP's GVT.
            if (lp.checkpoints().empty())
            {
                v.fail(tag + ": LP " + std::to_string(lp.id()) + " has no checkpoint");
            }
            else if (const auto &at = lp.checkpoints().front().at_key; at && !(*at < lp.gvt()))
            {
                v.fail(tag + ": LP " + std::to_string(lp.id()) + " oldest checkpoint " + to_string(*at) +
                       " is not below its GVT " + to_string(lp.gvt()));
            }
        }
        for (const auto &m : view.transport.in_flight())
        {
            if (const auto *x = std::get_if<TxnMsg>(&m.payload))
            {
                check_key(x->txn.key, "in-flight transaction");
            }
            else if (const auto *a = std::get_if<AntiMsg>(&m.payload))
            {
                check_key(a->key, "in-flight anti-transaction");
            }
        }
        if (view.horizon < last_horizon || view.round.gvt < last_gvt)
        {
            v.fail(tag + ": GVT went backwards");
        }
        last_horizon = view.horizon;
        last_gvt = view.round.gvt;
        if (const auto d = confirm_end(view.round))
        {
            ++n.confirmed_ends;
            if (d->end_key.time > view.round.gvt.time)
            {
                v.fail(tag + ": end " + to_string(d->end_key) + " confirmed above GVT " + to_string(view.round.gvt));
            }
        }
    }

    inline Verdict gvt_invariants(const std::vector<std::string> &models, std::uint64_t seeds, GvtInvariantCounts *counts = nullptr)
    {
        Verdict v;
        GvtInvariantCounts n;
        for (const auto &name : models)
        {
            const auto program = test::load_model(name);
            for (std::uint64_t seed = 1; seed <= seeds; ++seed)
            {
                const auto ref = run_sequential(program, seed);
                for (auto mode : {SyncMode::TimeWarp, SyncMode::Srtw})
                {
                    for (std::size_t interval : {1u, 4u})
                    {
                        auto cfg = oracle_config(mode, seed, true);
                        cfg.checkpoint_interval = interval;
                        const auto tag = name + " seed " + std::to_string(seed) + " " + mode_label(mode) + " ci " +
                                         std::to_string(interval);
                        OrderKey last_horizon = OrderKey::min();
                        OrderKey last_gvt = OrderKey::min();
                        const auto out = run_lockstep(program, cfg, {},
                                                      [&](const LockstepView &view)
                                                      { check_round(view, last_horizon, last_gvt, v, n, tag); });
                        ++n.runs;
                        if (out.status != RunStatus::Completed || !out.report.same_outcome(ref))
                        {
                            v.fail(tag + ": does not match the oracle");
                        }
                    }
                }
            }
        }
        v.detail = std::to_string(n.runs) + " chaos runs, " + std::to_string(n.rounds) + " rounds, " +
                   std::to_string(n.keys_checked) + " pending keys checked, " + std::to_string(n.confirmed_ends) +
                   " confirmed ends";
        if (counts)
        {
            *counts = n;
        }
        return v;
    }

    // 6. LPCC behavior plus: SRTW whose actuator can never bind is TW.
    inline Verdict lpcc_suite()
    {
        Verdict v;
        {
            ClusterSpace s;
            IndicatorVector good;
            good.committed_rate = 100.0;
            good.avg_uncommitted = 10.0;
            IndicatorVector worse = good;
            worse.committed_rate = 80.0;
            s.insert(good);
            s.insert(worse);
            if (actuator_search(s, good).limit)
            {
                v.fail("actuator set although no better state exists");
            }
        }
        {
            LpccConfig cfg;
            cfg.capacity = 16;
            cfg.epsilon = 1e-9;
            ClusterSpace s(cfg);
            for (int i = 0; i < 500; ++i)
            {
                IndicatorVector x;
                x.committed_rate = i;
                x.avg_uncommitted = 500 - i;
                s.insert(x);
                if (s.size() > cfg.capacity)
                {
                    v.fail("cluster space grew past K");
                    break;
                }
            }
        }
        {
            LpccConfig cfg;
            cfg.floor = 32;
            ClusterSpace s(cfg);
            IndicatorVector best;
            best.committed_rate = 1000.0;
            best.avg_uncommitted = 1.0;
            IndicatorVector now;
            now.committed_rate = 5.0;
            now.avg_uncommitted = 900.0;
            s.insert(best);
            s.insert(now);
            const auto a = actuator_search(s, now);
            if (!a.limit || *a.limit != 32)
            {
                v.fail("actuator floor not applied");
            }
        }

        std::size_t identical = 0;
        for (const char *name : {"bidirectional", "four_stage", "zero_delay_loop"})
        {
            const auto program = test::load_model(name);
            for (std::uint64_t seed = 1; seed <= 2; ++seed)
            {
                auto tw_cfg = oracle_config(SyncMode::TimeWarp, seed, true);
                auto srtw_cfg = oracle_config(SyncMode::Srtw, seed, true);
                srtw_cfg.lpcc.floor = std::uint64_t{1} << 60; // the actuator may be set but never binds
                const auto tw = run_lockstep(program, tw_cfg);
                std::uint64_t ticks = 0;
                const auto srtw = run_lockstep(program, srtw_cfg, {},
                                               [&](const LockstepView &view)
                                               {
                                                   for (const auto &r : view.round.reports)
                                                   {
                                                       ticks = std::max(ticks, r.lpcc_ticks);
                                                   }
                                               });
                bool same = tw.status == srtw.status && tw.report.same_outcome(srtw.report) &&
                            tw.report.lp_stats == srtw.report.lp_stats && tw.report.wall_seconds == srtw.report.wall_seconds &&
                            tw.rounds.size() == srtw.rounds.size();
                for (std::size_t i = 0; same && i < tw.rounds.size(); ++i)
                {
                    same = tw.rounds[i].gvt == srtw.rounds[i].gvt;
                }
                if (!same)
                {
                    v.fail(std::string(name) + " seed " + std::to_string(seed) + ": SRTW with a non-binding actuator differs from TW");
                }
                if (ticks == 0)
                {
                    v.fail(std::string(name) + ": LPCC never ticked");
                }
                identical += same ? 1 : 0;
            }
        }
        v.detail = "no-better-state, K bound, floor; " + std::to_string(identical) +
                   "/6 non-binding SRTW runs bit-identical to TW";
        return v;
    }

    // 7. Parser structures and the round-trip property.
    inline Verdict parser_suite(int programs = 1000)
    {
        Verdict v;
        const auto sparse = parse_model(test::read_model("sparse_transfer"));
        const auto dense = parse_model(test::read_model("dense_transfer"));
        auto blk = [](BlockOp op, std::optional<std::string> label = std::nullopt) { return Block{std::move(label), std::move(op), 0}; };
        const bool sparse_ok =
            sparse.partitions.size() == 2 && sparse.partitions[0].termination_start == 120000 &&
            sparse.partitions[1].termination_start == 120000 &&
            sparse.partitions[0].blocks == std::vector<Block>{blk(Generate{1, 0}), blk(Transfer{0.001, "Label1"}), blk(Terminate{0})} &&
            sparse.partitions[1].blocks == std::vector<Block>{blk(Generate{3, 0, 5000}), blk(Terminate{1}, "Label1")};
        const bool dense_ok =
            dense.partitions.size() == 2 && dense.partitions[0].termination_start == 5000 &&
            dense.partitions[1].termination_start == 5000 &&
            dense.partitions[0].blocks == std::vector<Block>{blk(Generate{1, 0, 4000}), blk(Transfer{0.3, "Label1"}), blk(Terminate{1})};
        if (!sparse_ok)
        {
            v.fail("sparse-transfer listing parsed to an unexpected structure");
        }
        if (!dense_ok)
        {
            v.fail("dense-transfer listing parsed to an unexpected structure");
        }
        std::mt19937_64 rng(20240611);
        int ok = 0;
        for (int i = 0; i < programs; ++i)
        {
            const auto p = test::random_program(rng);
            try
            {
                if (parse_model(dump_model(p)) == p)
                {
                    ++ok;
                    continue;
                }
            }
            catch (const ParseError &)
            {
            }
            v.fail("round trip failed:\n" + dump_model(p));
        }
        v.detail = "both listings match; " + std::to_string(ok) + "/" + std::to_string(programs) +
                   " random programs round-trip";
        return v;
    }
}
