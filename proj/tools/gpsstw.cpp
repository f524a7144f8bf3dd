#include "gpsstw/kernel.hpp"
#include "gpsstw/model.hpp"
#include "gpsstw/report.hpp"
#include "gpsstw/runtime.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace
{
    using namespace gpsstw;

    constexpr int kExitOk = 0;
    constexpr int kExitParse = 2;
    constexpr int kExitRuntime = 3;
    constexpr int kExitBudget = 4;

    std::string read_file(const std::string &path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in)
        {
            throw std::runtime_error("cannot open " + path);
        }
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    }

    std::shared_ptr<const ModelProgram> load(const std::string &path)
    {
        return std::make_shared<const ModelProgram>(parse_model(read_file(path)));
    }

    void write_json(const std::string &path, const nlohmann::json &j)
    {
        if (path.empty())
        {
            return;
        }
        std::ofstream out(path);
        if (!out)
        {
            throw std::runtime_error("cannot write " + path);
        }
        out << j.dump(2) << '\n';
    }

    TcpAddress parse_address(const std::string &text)
    {
        const auto colon = text.rfind(':');
        if (colon == std::string::npos)
        {
            throw std::runtime_error("address must be host:port, got '" + text + "'");
        }
        return TcpAddress{text.substr(0, colon), static_cast<std::uint16_t>(std::stoul(text.substr(colon + 1)))};
    }

    // "id=host:port"; the controller is "c".
    std::pair<LpId, TcpAddress> parse_peer(const std::string &text)
    {
        const auto eq = text.find('=');
        if (eq == std::string::npos)
        {
            throw std::runtime_error("peer must be id=host:port, got '" + text + "'");
        }
        const auto id = text.substr(0, eq);
        const LpId lp = id == "c" ? kControllerId : static_cast<LpId>(std::stoul(id));
        return {lp, parse_address(text.substr(eq + 1))};
    }

    std::vector<LpId> parse_map(const std::string &text)
    {
        std::vector<LpId> map;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ','))
        {
            map.push_back(static_cast<LpId>(std::stoul(item)));
        }
        return map;
    }

    struct RunArgs
    {
        std::string model;
        std::string mode = "tw";
        std::string transport = "inproc";
        std::uint64_t seed = 1;
        double gvt_period_ms = 250.0;
        double lpcc_interval_ms = 500.0;
        std::size_t checkpoint_interval = 1;
        std::uint64_t floor = 16;
        double delta = 0.05;
        double epsilon = 0.1;
        std::size_t capacity = 256;
        std::int64_t chaos_min_us = 0;
        std::int64_t chaos_max_us = 0;
        std::uint64_t chaos_seed = 7;
        std::uint64_t budget = 0;
        std::string metrics;
        std::string json;
        std::string map;
        std::size_t queue_capacity = 4096;
        double timeout_s = 600.0;
        bool lockstep = false;
        std::vector<std::string> peers;
        std::string listen;
    };

    RunConfig to_config(const RunArgs &a)
    {
        RunConfig c;
        c.mode = a.mode == "srtw" ? SyncMode::Srtw : SyncMode::TimeWarp;
        c.transport = a.transport == "tcp" ? TransportKind::Tcp : TransportKind::InProc;
        c.seed = a.seed;
        c.gvt_period_ms = a.gvt_period_ms;
        c.checkpoint_interval = a.checkpoint_interval;
        c.lpcc.interval_ms = a.lpcc_interval_ms;
        c.lpcc.floor = a.floor;
        c.lpcc.delta = a.delta;
        c.lpcc.epsilon = a.epsilon;
        c.lpcc.capacity = a.capacity;
        if (a.chaos_max_us > 0)
        {
            c.chaos = ChaosConfig{true, a.chaos_min_us, a.chaos_max_us, a.chaos_seed};
        }
        if (a.budget > 0)
        {
            c.move_budget = a.budget;
        }
        if (!a.map.empty())
        {
            c.partition_to_lp = parse_map(a.map);
        }
        c.queue_capacity = a.queue_capacity;
        c.timeout_s = a.timeout_s;
        if (!(c.gvt_period_ms > 0.0) || !(c.lpcc.interval_ms > 0.0) || c.checkpoint_interval == 0)
        {
            throw std::runtime_error("periods and the checkpoint interval must be positive");
        }
        return c;
    }

    int cmd_parse(const std::string &path)
    {
        const auto program = load(path);
        std::cout << describe_program(*program);
        return kExitOk;
    }

    int cmd_seq(const std::string &path, std::uint64_t seed, std::uint64_t budget, const std::string &json)
    {
        const auto program = load(path);
        SequentialOptions opts;
        if (budget > 0)
        {
            opts.move_budget = budget;
        }
        const auto report = run_sequential(program, seed, opts);
        std::cout << render_report(report);
        write_json(json, report_to_json(report));
        const bool budget_hit = budget > 0 && !report.completed && report.total_moves >= budget;
        return budget_hit ? kExitBudget : kExitOk;
    }

    int cmd_run(const RunArgs &args)
    {
        const auto program = load(args.model);
        auto cfg = to_config(args);

        std::ofstream metrics;
        if (!args.metrics.empty())
        {
            metrics.open(args.metrics);
            if (!metrics)
            {
                throw std::runtime_error("cannot write " + args.metrics);
            }
            metrics << metrics_header() << '\n';
            cfg.metrics = [&metrics](const MetricsRow &row) { metrics << metrics_csv(row) << '\n'; };
        }

        RunOutcome out;
        if (!args.peers.empty())
        {
            // LPs run as separate `worker` processes.
            std::size_t lp_count = 0;
            const auto map = resolve_mapping(*program, cfg.partition_to_lp, &lp_count);
            std::map<LpId, TcpAddress> addrs;
            for (const auto &p : args.peers)
            {
                addrs.insert(parse_peer(p));
            }
            addrs[kControllerId] = args.listen.empty() ? TcpAddress{"127.0.0.1", 0} : parse_address(args.listen);
            TcpTransport transport(addrs, {kControllerId});
            SharedProgress progress;
            out = drive_controller(transport, *program, map, lp_count, cfg, progress);
            transport.close();
        }
        else if (args.lockstep)
        {
            out = run_lockstep(program, cfg);
        }
        else
        {
            out = run_parallel(program, cfg);
        }

        std::cout << render_report(out.report);
        if (out.status != RunStatus::Completed)
        {
            std::cout << "run stopped: " << status_name(out.status) << " (" << out.diagnostic << ")\n";
        }
        auto j = report_to_json(out.report);
        j["status"] = status_name(out.status);
        if (!out.diagnostic.empty())
        {
            j["diagnostic"] = out.diagnostic;
        }
        write_json(args.json, j);
        return out.status == RunStatus::Completed ? kExitOk
               : out.status == RunStatus::BudgetExceeded ? kExitBudget
                                                         : kExitRuntime;
    }

    int cmd_worker(LpId id, const std::string &listen, const std::vector<std::string> &peers)
    {
        std::map<LpId, TcpAddress> addrs;
        for (const auto &p : peers)
        {
            addrs.insert(parse_peer(p));
        }
        addrs[id] = parse_address(listen);
        TcpTransport transport(addrs, {id});
        SharedProgress progress;
        serve_lp(transport, id, progress);
        // Let the final report drain before the sockets close.
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        transport.close();
        return kExitOk;
    }
}

int main(int argc, char **argv)
{
    CLI::App app{"Parallel GPSS simulator (Time Warp / SRTW)"};
    app.require_subcommand(1);

    std::string parse_path;
    auto *parse = app.add_subcommand("parse", "Validate a model and print its block listing");
    parse->add_option("model", parse_path, "Model file")->required();

    std::string seq_path, seq_json;
    std::uint64_t seq_seed = 1, seq_budget = 0;
    auto *seq = app.add_subcommand("seq", "Run the sequential reference simulator");
    seq->add_option("model", seq_path, "Model file")->required();
    seq->add_option("--seed", seq_seed, "RNG seed");
    seq->add_option("--budget", seq_budget, "Stop after this many transaction moves (0: unlimited)");
    seq->add_option("--json", seq_json, "Write the machine-readable report here");

    RunArgs ra;
    auto *run = app.add_subcommand("run", "Run the parallel simulator");
    run->add_option("model", ra.model, "Model file")->required();
    run->add_option("--mode", ra.mode, "tw or srtw")->check(CLI::IsMember({"tw", "srtw"}));
    run->add_option("--transport", ra.transport, "inproc or tcp")->check(CLI::IsMember({"inproc", "tcp"}));
    run->add_option("--seed", ra.seed, "RNG seed");
    run->add_option("--gvt-period-ms", ra.gvt_period_ms, "GVT round period");
    run->add_option("--lpcc-interval-ms", ra.lpcc_interval_ms, "LPCC control interval");
    run->add_option("--checkpoint-interval", ra.checkpoint_interval, "Moves between state checkpoints");
    run->add_option("--floor", ra.floor, "Minimum actuator limit");
    run->add_option("--delta", ra.delta, "Required relative improvement of a better past state");
    run->add_option("--epsilon", ra.epsilon, "Cluster merge radius");
    run->add_option("--clusters", ra.capacity, "Maximum number of clusters (K)");
    run->add_option("--chaos-min-us", ra.chaos_min_us, "Minimum random delivery delay");
    run->add_option("--chaos-max-us", ra.chaos_max_us, "Maximum random delivery delay (0: off)");
    run->add_option("--chaos-seed", ra.chaos_seed, "Seed of the delivery delays");
    run->add_option("--budget", ra.budget, "Abort after this many moves across all LPs (0: unlimited)");
    run->add_option("--metrics", ra.metrics, "Write the per-round metrics CSV here");
    run->add_option("--json", ra.json, "Write the machine-readable report here");
    run->add_option("--map", ra.map, "Partition to LP mapping, e.g. 0,0,1");
    run->add_option("--queue-capacity", ra.queue_capacity, "In-process queue bound per LP");
    run->add_option("--timeout-s", ra.timeout_s, "Give up after this many seconds");
    run->add_flag("--lockstep", ra.lockstep, "Deterministic single-thread host on a virtual clock");
    run->add_option("--peer", ra.peers, "Remote LP worker id=host:port (repeatable)");
    run->add_option("--listen", ra.listen, "Controller address for remote workers");

    std::uint16_t worker_id = 0;
    std::string worker_listen;
    std::vector<std::string> worker_peers;
    auto *worker = app.add_subcommand("worker", "Host one LP over TCP for a remote controller");
    worker->add_option("--id", worker_id, "LP id")->required();
    worker->add_option("--listen", worker_listen, "host:port to listen on")->required();
    worker->add_option("--peer", worker_peers, "id=host:port of the controller (c) and other LPs")->required();

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError &e)
    {
        // --help and friends exit 0; every usage error maps to the parse-error code.
        return app.exit(e) == 0 ? kExitOk : kExitParse;
    }

    try
    {
        if (*parse)
        {
            return cmd_parse(parse_path);
        }
        if (*seq)
        {
            return cmd_seq(seq_path, seq_seed, seq_budget, seq_json);
        }
        if (*run)
        {
            return cmd_run(ra);
        }
        if (*worker)
        {
            return cmd_worker(worker_id, worker_listen, worker_peers);
        }
    }
    catch (const ParseError &e)
    {
        std::cerr << "parse error: " << e.what() << '\n';
        return kExitParse;
    }
    catch (const std::exception &e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
