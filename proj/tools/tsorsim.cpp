// tsorsim: runs cluster scenarios and workloads, dumps routing tables.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "tsor/cluster.hpp"
#include "tsor/workloads.hpp"

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TSoR cluster simulator"};
    app.require_subcommand(1);

    std::string scenario_path;
    std::string workload;
    std::string report_path;
    std::vector<std::string> param_kvs;
    uint64_t seed = 1;

    auto* run = app.add_subcommand("run", "run a workload against a scenario");
    run->add_option("--scenario", scenario_path, "scenario file")->required();
    run->add_option("--workload", workload, "echo|stream|pingpong|connsetup|ingress-echo")
        ->required();
    run->add_option("--seed", seed, "deterministic seed");
    run->add_option("--param", param_kvs, "workload parameter k=v (repeatable)");
    run->add_option("--report", report_path, "write the JSON report here");

    std::string table;
    auto* dump = app.add_subcommand("dump", "print a routing table for a scenario");
    dump->add_option("--scenario", scenario_path, "scenario file")->required();
    dump->add_option("--table", table, "routes|services|ingress|policies")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (dump->parsed()) {
            const tsor::ClusterState st = tsor::load_scenario(slurp(scenario_path));
            if (table == "routes") std::cout << tsor::dump_routes(st);
            else if (table == "services") std::cout << tsor::dump_services(st);
            else if (table == "ingress") std::cout << tsor::dump_ingress(st);
            else if (table == "policies") std::cout << tsor::dump_policies(st);
            else {
                std::cerr << "unknown table: " << table << "\n";
                return 2;
            }
            return 0;
        }

        tsor::RunParams params;
        params.workload = workload;
        params.seed = seed;
        for (const auto& kv : param_kvs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                std::cerr << "bad --param (want k=v): " << kv << "\n";
                return 2;
            }
            params.params[kv.substr(0, eq)] = kv.substr(eq + 1);
        }

        const std::string text = slurp(scenario_path);
        tsor::RunOutput out = tsor::run_workload(text, params);

        if (!report_path.empty()) {
            std::ofstream rf(report_path);
            rf << out.report.dump(2) << "\n";
        }
        const auto& det = out.report["deterministic"];
        const auto& rt = out.report["runtime"];
        std::cout << "workload " << workload << " seed " << seed << "\n";
        std::cout << "  fabric_connections " << det["cluster"]["fabric_connections"]
                  << "  handshake_msgs " << det["cluster"]["handshake_msgs"] << "  bytes_tx "
                  << det["cluster"]["bytes_tx"] << "\n";
        std::cout << "  credit_msgs " << rt["credit_msgs"] << "  sq_write_req "
                  << rt["sq_write_req"] << "  sleeps " << rt["sleeps"] << "  wall_ms "
                  << rt["wall_ms"] << "\n";
        if (!out.ok) {
            for (const auto& s : out.problems) std::cerr << "invariant: " << s << "\n";
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
