// Copyright 2026 The tzm-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Scenario files, reports and the `tzm` command line.
//
// Exit codes: 0 when the outcome is the expected one, 2 when it is not,
// 1 for usage and configuration errors.

#ifndef TZM_CLI_HPP
#define TZM_CLI_HPP

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tzm/defense.hpp"
#include "tzm/scanner.hpp"

namespace tzm {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 1;
inline constexpr int kUnexpected = 2;
} // namespace exit_code

class ScenarioError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Scenario files

/// {profile, attack: {name, ...params}, defenses, budget, restart_cap,
///  seeds: {scan}, expect: {defense-set: cell}}
struct ScenarioFile {
    std::string name;
    ScenarioProfile profile;
    AttackKind attack = AttackKind::Inject;
    AttackOptions options;
    DefenseSet defenses;
    /// Cells that differ from the default expectation, keyed by defense-set name.
    std::map<std::string, std::string> expect;
};

/// Succeeds with no defenses, Blocked(..) otherwise, unless `expect` says so.
inline std::string expected_cell(const ScenarioFile& s, const DefenseSet& d) {
    if (auto it = s.expect.find(d.name()); it != s.expect.end()) return it->second;
    return d.empty() ? "Succeeds" : "Blocked";
}

inline bool cell_matches(const std::string& expected, const std::string& got) {
    if (expected == "Blocked") return got.rfind("Blocked(", 0) == 0;
    return expected == got;
}

/// TZM_SEED, when set, overrides scenario seeds.
inline std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("TZM_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        return std::stoull(s, nullptr, 0);
    } catch (const std::exception&) {
        throw ScenarioError(std::string("TZM_SEED: not a number '") + s + "'");
    }
}

inline ScenarioFile scenario_from_json(const nlohmann::json& j, std::string name) {
    ScenarioFile s;
    s.name = std::move(name);
    try {
        if (!j.is_object()) throw ScenarioError("scenario: not an object");
        if (!j.contains("profile")) throw ScenarioError("profile: missing");
        s.profile = profile_from_json(j.at("profile"));
        if (!j.contains("attack")) throw ScenarioError("attack: missing");
        const auto& a = j.at("attack");
        const auto an = a.is_string() ? a.get<std::string>() : a.at("name").get<std::string>();
        const auto kind = parse_attack(an);
        if (!kind) throw ScenarioError("attack: unknown '" + an + "'");
        s.attack = *kind;
        if (a.is_object()) {
            auto& o = s.options;
            if (a.contains("sled_len")) o.sled_len = a.at("sled_len").get<std::uint32_t>();
            if (a.contains("stride")) o.stride = a.at("stride").get<std::uint32_t>();
            if (a.contains("leak_words")) o.leak_words = a.at("leak_words").get<std::size_t>();
            if (a.contains("unlink_value")) o.unlink_value = a.at("unlink_value").get<std::uint32_t>();
            if (a.contains("write_value")) o.nsc_write_value = a.at("write_value").get<std::uint32_t>();
        }
        if (j.contains("budget")) s.options.budget = j.at("budget").get<std::uint64_t>();
        if (j.contains("attempt_budget")) s.options.attempt_budget = j.at("attempt_budget").get<std::uint64_t>();
        if (j.contains("restart_cap")) s.options.restart_cap = j.at("restart_cap").get<std::size_t>();
        if (j.contains("seeds") && j.at("seeds").contains("scan")) {
            s.options.order.seed = j.at("seeds").at("scan").get<std::uint64_t>();
        }
        std::vector<std::string> defs = s.profile.defenses;
        if (j.contains("defenses")) {
            for (const auto& d : j.at("defenses").get<std::vector<std::string>>()) defs.push_back(d);
        }
        for (const auto& d : defs) {
            const auto parsed = parse_defenses(d);
            if (!parsed) throw ScenarioError("defenses: unknown '" + d + "'");
            s.defenses.nx |= parsed->nx;
            s.defenses.cfi |= parsed->cfi;
            s.defenses.harden |= parsed->harden;
        }
        if (j.contains("expect")) s.expect = j.at("expect").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ScenarioError(s.name + ": " + e.what());
    }
    if (s.options.stride == 0 || s.options.stride % 2 != 0) throw ScenarioError("attack.stride: must be a positive even number");
    const auto want = profile_for(s.attack, s.profile.world);
    if (want.victim != s.profile.victim || want.world != s.profile.world) {
        throw ScenarioError(std::string("attack ") + attack_name(s.attack) + " does not apply to victim " +
                            victim_name(s.profile.victim) + " in world " + host_name(s.profile.world));
    }
    if (auto seed = env_seed()) s.options.order.seed = *seed;
    return s;
}

inline ScenarioFile load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError(path.string() + ": cannot open");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ScenarioError(path.string() + ": " + e.what());
    }
    return scenario_from_json(j, path.stem().string());
}

/// Every *.json in `dir`, ordered by name.
inline std::vector<ScenarioFile> load_scenarios(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    if (!std::filesystem::is_directory(dir)) throw ScenarioError(dir.string() + ": not a directory");
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<ScenarioFile> out;
    for (const auto& f : files) out.push_back(load_scenario(f));
    return out;
}

inline std::filesystem::path default_scenario_dir() { return std::filesystem::path(TZM_SOURCE_DIR) / "scenarios"; }
inline std::filesystem::path default_fixture() {
    return std::filesystem::path(TZM_SOURCE_DIR) / "tests" / "fixtures" / "expected_matrix.json";
}

// ---------------------------------------------------------------------------
// Running scenarios

struct RunResult {
    AttackReport report;
    std::string cell;
    std::string expected;
    [[nodiscard]] bool as_expected() const { return cell_matches(expected, cell); }
};

/// Runs the scenario under `d`. A set `trace` receives the instruction
/// trace of the booted machine; a scan's restart clears it, so what is
/// left covers boot and the final attempt.
inline RunResult run_scenario(const ScenarioFile& s, const DefenseSet& d, std::vector<std::string>* trace = nullptr) {
    auto t = make_target(s.profile, d);
    if (trace) {
        auto arm = t.target.arm;
        t.target.arm = [arm, trace](Machine& m) {
            if (arm) arm(m);
            trace->clear();
            m.set_trace([trace](const TraceEntry& e) { trace->push_back(format_trace(e)); });
        };
        t.target.on_restart = [trace] { trace->clear(); };
    }
    RunResult r;
    r.report = run_attack(s.attack, t.target, s.options);
    r.cell = cell_text(r.report);
    r.expected = expected_cell(s, d);
    return r;
}

inline bool prints_marker(AttackKind k) {
    return k == AttackKind::Inject || k == AttackKind::Rop || k == AttackKind::HeapFnptr;
}

inline nlohmann::json run_report_json(const ScenarioFile& s, const DefenseSet& d, const RunResult& r) {
    nlohmann::json j{{"scenario", s.name},
                     {"profile", to_json(s.profile)},
                     {"defenses", d.name()},
                     {"outcome", r.cell},
                     {"expected", r.expected},
                     {"as_expected", r.as_expected()},
                     {"marker_printed", prints_marker(s.attack) && r.report.success},
                     {"report", to_json(r.report)}};
    return j;
}

// ---------------------------------------------------------------------------
// Matrix

struct MatrixDiff {
    std::string row;
    std::string defense;
    std::string expected;
    std::string got;
};

/// Every bundled scenario under every matrix column, rows keyed by
/// scenario name.
inline nlohmann::json scenario_matrix(const std::vector<ScenarioFile>& scenarios, const std::vector<DefenseSet>& cols) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& s : scenarios) {
        for (const auto& c : cols) j[s.name][c.name()] = run_scenario(s, c).cell;
    }
    return j;
}

/// Cells of `expected` that `got` lacks or disagrees with, and cells of
/// `got` that `expected` lacks.
inline std::vector<MatrixDiff> matrix_diff(const nlohmann::json& expected, const nlohmann::json& got) {
    std::vector<MatrixDiff> out;
    auto cell = [](const nlohmann::json& g, const std::string& r, const std::string& d) -> std::string {
        if (!g.contains(r) || !g.at(r).contains(d)) return "(missing)";
        return g.at(r).at(d).get<std::string>();
    };
    for (const auto& [row, cols] : expected.items()) {
        for (const auto& [def, v] : cols.items()) {
            const auto g = cell(got, row, def);
            if (g != v.get<std::string>()) out.push_back({row, def, v.get<std::string>(), g});
        }
    }
    for (const auto& [row, cols] : got.items()) {
        for (const auto& [def, v] : cols.items()) {
            if (cell(expected, row, def) == "(missing)") out.push_back({row, def, "(missing)", v.get<std::string>()});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Payloads and images

struct PayloadRequest {
    AttackKind attack = AttackKind::Inject;
    HostWorld world = HostWorld::Nsw;
    std::uint32_t sled_len = 50;
    std::optional<std::uint32_t> entry;
    std::size_t leak_words = 5;
    std::uint32_t value = 0x5EC0DE42;
};

struct BuiltPayload {
    Bytes bytes; // record body, as the attacker sends it
    nlohmann::json meta;
};

/// Builds the attack's payload against the default victim for `req.world`.
/// An injection without an entry address scans for one first.
inline BuiltPayload build_payload(const PayloadRequest& req) {
    const auto profile = profile_for(req.attack, req.world);
    const auto img = build_victim(profile);
    BuiltPayload out;
    out.meta = {{"attack", attack_name(req.attack)}, {"world", host_name(profile.world)}};
    switch (req.attack) {
    case AttackKind::Inject: {
        std::uint32_t entry = 0;
        if (req.entry) {
            entry = *req.entry;
        } else {
            const auto [lo, hi] = stack_span(img);
            entry = scan_entry(plain_target(img), injection_input(img, req.sled_len), lo, hi).entry;
        }
        const Bytes rec = injection_input(img, req.sled_len)(entry);
        out.bytes.assign(rec.begin() + 3, rec.end());
        out.meta["entry"] = guest::hex(entry);
        out.meta["sled_len"] = req.sled_len;
        break;
    }
    case AttackKind::Rop: {
        const auto [chain, payload] = marker_rop_chain(img);
        out.bytes = payload.bytes;
        out.meta["gadgets"] = chain.frames.size();
        break;
    }
    case AttackKind::HeapFnptr:
        out.bytes = build_heap_overflow(FnPtrOverwrite{4, img.symbol("msgbuf")}, heap_geometry(img)).bytes;
        break;
    case AttackKind::HeapUnlink:
        out.bytes = build_heap_overflow(Unlink{img.symbol("heap_target"), req.value}, heap_geometry(img)).bytes;
        break;
    case AttackKind::Fmt: out.bytes = build_format_leak(req.leak_words).bytes; break;
    case AttackKind::NscRead:
        out.bytes = le_words({img.symbol("secure_word"), 1, img.symbol("nsc_scratch")});
        break;
    case AttackKind::NscWrite:
        // The delta assumes the planted scratch value is still in place.
        out.bytes = le_words({img.symbol("linebuf") + 12, 1, img.symbol("secure_scratch"), req.value - kSecureScratch});
        break;
    case AttackKind::NscConsole: out.bytes = le_words({img.symbol("secure_secret")}); break;
    }
    out.meta["length"] = out.bytes.size();
    out.meta["null_free"] = null_byte_positions(out.bytes).empty();
    return out;
}

/// Flash contents [0, end of the last flash segment), erased bytes 0xFF.
inline Bytes flash_image(const VictimImage& img) {
    const MemoryMap map = load_image(img.manifest);
    std::uint32_t end = 0;
    for (const auto& seg : img.blob.segments) {
        const Region* r = map.find(seg.origin);
        if (r && r->kind == RegionKind::Flash) end = std::max(end, seg.end());
    }
    Bytes out(end, 0xFF);
    for (const auto& seg : img.blob.segments) {
        const Region* r = map.find(seg.origin);
        if (r && r->kind == RegionKind::Flash) std::copy(seg.bytes.begin(), seg.bytes.end(), out.begin() + seg.origin);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Command line

namespace cli_detail {

inline Bytes read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ScenarioError(p.string() + ": cannot open");
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ScenarioError(p.string() + ": cannot write");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p);
    if (!out) throw ScenarioError(p.string() + ": cannot write");
    out << s;
}

inline std::uint32_t parse_u32(const std::string& s, const char* what) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used, 0);
        if (used != s.size() || v > 0xFFFFFFFFull) throw std::out_of_range(s);
        return static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
        throw ScenarioError(std::string(what) + ": not a 32-bit number '" + s + "'");
    }
}

inline DefenseSet need_defenses(const std::string& s) {
    auto d = parse_defenses(s);
    if (!d) throw ScenarioError("--defense: unknown set '" + s + "'");
    return *d;
}

inline HostWorld need_world(const std::string& s) {
    auto w = parse_host(s);
    if (!w) throw ScenarioError("--world: unknown '" + s + "'");
    return *w;
}

inline AttackKind need_attack(const std::string& s) {
    auto k = parse_attack(s);
    if (!k) throw ScenarioError("unknown attack '" + s + "'");
    return *k;
}

// Report to a file when one is given, else to `out`.
inline void emit(const nlohmann::json& j, const std::string& path, std::ostream& out) {
    const std::string text = j.dump(2) + "\n";
    if (path.empty()) out << text;
    else write_text(path, text);
}

} // namespace cli_detail

/// Entry point of the `tzm` tool; returns the process exit code.
inline int tzm_main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"TrustZone-M attack and defense lab"};
    app.require_subcommand(1);

    std::string run_file, run_defense, run_trace, run_out;
    auto* run = app.add_subcommand("run", "Run one scenario file");
    run->add_option("scenario", run_file, "Scenario JSON")->required();
    run->add_option("--defense", run_defense, "Defense set replacing the scenario's, e.g. nx,cfi");
    run->add_option("--trace", run_trace, "Write the instruction trace here");
    run->add_option("--out", run_out, "Write the report here instead of stdout");

    std::string scan_bin, scan_map, scan_out, scan_base = "0";
    std::size_t scan_len = 3;
    bool scan_summary = false;
    auto* scan = app.add_subcommand("scan", "Scan a flat firmware image");
    scan->add_option("image", scan_bin, "Raw image")->required();
    scan->add_option("--map", scan_map, "Memory map manifest")->required();
    scan->add_option("--base", scan_base, "Load address of the image");
    scan->add_option("--max-gadget-len", scan_len, "Longest gadget, in instructions");
    scan->add_flag("--summary", scan_summary, "Print the census line");
    scan->add_option("--out", scan_out, "Write the report here instead of stdout");

    std::string mx_out, mx_expected, mx_dir, mx_defense, mx_attack, mx_world = "nsw";
    auto* matrix = app.add_subcommand("matrix", "Run the defense matrix");
    matrix->add_option("--out", mx_out, "Write the grid here instead of stdout");
    matrix->add_option("--expected", mx_expected, "Expected grid (default: the bundled fixture)");
    matrix->add_option("--scenarios", mx_dir, "Scenario directory (default: the bundled one)");
    matrix->add_option("--attack", mx_attack, "Single cell: attack name");
    matrix->add_option("--defense", mx_defense, "Single cell: defense set");
    matrix->add_option("--world", mx_world, "Single cell: host world");

    std::string pl_attack, pl_out, pl_world = "nsw", pl_entry, pl_value;
    std::uint32_t pl_sled = 50;
    std::size_t pl_leak = 5;
    auto* payload = app.add_subcommand("payload", "Write an attack payload");
    payload->add_option("attack", pl_attack, "Attack name")->required();
    payload->add_option("--out", pl_out, "Output file")->required();
    payload->add_option("--world", pl_world, "Host world");
    payload->add_option("--sled", pl_sled, "Sled length, in instructions");
    payload->add_option("--entry", pl_entry, "Injection entry address");
    payload->add_option("--leak-words", pl_leak, "Words a format leak reads");
    payload->add_option("--value", pl_value, "Word written by unlink or nsc_write");

    std::string b_file, b_out, b_defense;
    bool b_planted = false;
    std::uint32_t b_seed = 1;
    auto* build = app.add_subcommand("build", "Write a victim's flash image or the planted census image");
    build->add_option("scenario", b_file, "Scenario JSON");
    build->add_option("--out", b_out, "Output file")->required();
    build->add_option("--defense", b_defense, "Defense set to apply");
    build->add_flag("--planted-census", b_planted, "Write the synthetic census image instead");
    build->add_option("--seed", b_seed, "Seed of the planted image");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_code::kOk;
    } catch (const CLI::ParseError& e) {
        err << "tzm: " << e.what() << "\n";
        return exit_code::kConfig;
    }

    try {
        if (*run) {
            const auto s = load_scenario(run_file);
            const DefenseSet d = run->count("--defense") ? need_defenses(run_defense) : s.defenses;
            std::vector<std::string> trace;
            const auto r = run_scenario(s, d, run_trace.empty() ? nullptr : &trace);
            if (!run_trace.empty()) {
                std::ostringstream t;
                for (const auto& line : trace) t << line << "\n";
                write_text(run_trace, t.str());
            }
            emit(run_report_json(s, d, r), run_out, out);
            if (!r.as_expected()) {
                err << "tzm: " << s.name << " under " << d.name() << ": expected " << r.expected << ", got " << r.cell
                    << "\n";
                return exit_code::kUnexpected;
            }
            return exit_code::kOk;
        }
        if (*scan) {
            const auto manifest = load_manifest_file(scan_map);
            const MemoryMap map = load_image(manifest);
            const Bytes bytes = read_file(scan_bin);
            const auto rep = tzm::scan(sweep(bytes, parse_u32(scan_base, "--base")), map, scan_len);
            if (scan_summary) {
                char line[160];
                std::snprintf(line, sizeof line, "total %zu pop_pc %zu bx_lr %zu gadgets %zu density %.2f%%\n",
                              rep.census.total_instructions, rep.census.pop_pc, rep.census.bx_lr,
                              rep.census.pop_pc + rep.census.bx_lr, 100.0 * rep.census.gadget_density());
                out << line;
                if (!scan_out.empty()) emit(to_json(rep), scan_out, out);
            } else {
                emit(to_json(rep), scan_out, out);
            }
            return exit_code::kOk;
        }
        if (*matrix) {
            const auto fixture_path = mx_expected.empty() ? default_fixture() : std::filesystem::path(mx_expected);
            std::ifstream fin(fixture_path);
            if (!fin) throw ScenarioError(fixture_path.string() + ": cannot open");
            nlohmann::json expected;
            try {
                expected = nlohmann::json::parse(fin);
            } catch (const nlohmann::json::exception& e) {
                throw ScenarioError(fixture_path.string() + ": " + e.what());
            }
            nlohmann::json got;
            if (!mx_attack.empty() || !mx_defense.empty()) {
                const AttackKind k = need_attack(mx_attack.empty() ? "inject" : mx_attack);
                const DefenseSet d = need_defenses(mx_defense.empty() ? "none" : mx_defense);
                const auto profile = profile_for(k, need_world(mx_world));
                const std::string row =
                    k == AttackKind::Fmt || k == AttackKind::Inject || k == AttackKind::Rop || k == AttackKind::HeapFnptr ||
                            k == AttackKind::HeapUnlink
                        ? std::string(attack_name(k)) + "_" + host_name(profile.world)
                        : attack_name(k);
                got[row][d.name()] = cell_text(run_attack(k, make_target(profile, d).target));
                emit(got, mx_out, out);
                if (expected.contains(row) && expected[row].contains(d.name()) && expected[row][d.name()] != got[row][d.name()]) {
                    err << "tzm: " << row << " under " << d.name() << ": expected "
                        << expected[row][d.name()].get<std::string>() << ", got " << got[row][d.name()].get<std::string>()
                        << "\n";
                    return exit_code::kUnexpected;
                }
                return exit_code::kOk;
            }
            const auto scenarios = load_scenarios(mx_dir.empty() ? default_scenario_dir() : std::filesystem::path(mx_dir));
            got = scenario_matrix(scenarios, matrix_columns());
            emit(got, mx_out, out);
            const auto diff = matrix_diff(expected, got);
            for (const auto& d : diff) {
                err << "tzm: " << d.row << " under " << d.defense << ": expected " << d.expected << ", got " << d.got
                    << "\n";
            }
            return diff.empty() ? exit_code::kOk : exit_code::kUnexpected;
        }
        if (*payload) {
            PayloadRequest req;
            req.attack = need_attack(pl_attack);
            req.world = need_world(pl_world);
            req.sled_len = pl_sled;
            req.leak_words = pl_leak;
            if (!pl_entry.empty()) req.entry = parse_u32(pl_entry, "--entry");
            if (!pl_value.empty()) req.value = parse_u32(pl_value, "--value");
            const auto p = build_payload(req);
            write_file(pl_out, p.bytes);
            out << p.meta.dump(2) << "\n";
            return exit_code::kOk;
        }
        if (*build) {
            if (b_planted) {
                write_file(b_out, planted_census_image(b_seed));
                return exit_code::kOk;
            }
            if (b_file.empty()) throw ScenarioError("build: a scenario file or --planted-census is required");
            const auto s = load_scenario(b_file);
            const DefenseSet d = build->count("--defense") ? need_defenses(b_defense) : s.defenses;
            write_file(b_out, flash_image(make_target(s.profile, d).target.image));
            return exit_code::kOk;
        }
    } catch (const Error& e) {
        err << "tzm: " << e.what() << "\n";
        return exit_code::kConfig;
    }
    return exit_code::kConfig;
}

} // namespace tzm

#endif // TZM_CLI_HPP
