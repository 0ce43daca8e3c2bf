#!/usr/bin/env python3
# Copyright 2026 The tzm-lab Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Exit codes and report schemas of the tzm command line.

Usage: cli_test.py <tzm binary> <source dir>
"""

import json
import os
import pathlib
import subprocess
import sys
import tempfile
import unittest

import jsonschema

TZM = ""
SRC = pathlib.Path()


def tzm(*args, env=None):
    e = dict(os.environ)
    e.pop("TZM_SEED", None)
    e.update(env or {})
    return subprocess.run([TZM, *map(str, args)], capture_output=True, text=True, env=e, timeout=300)


def schema(name):
    return json.loads((SRC / "schemas" / f"{name}.schema.json").read_text())


class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def scenario(self, name):
        return SRC / "scenarios" / f"{name}.json"

    def test_bundled_scenarios_are_schema_valid(self):
        s = schema("scenario")
        files = sorted((SRC / "scenarios").glob("*.json"))
        self.assertEqual(len(files), 14)
        for f in files:
            jsonschema.validate(json.loads(f.read_text()), s)

    def test_scenario_expectations_agree_with_fixture(self):
        fixture = json.loads((SRC / "tests" / "fixtures" / "expected_matrix.json").read_text())
        for f in sorted((SRC / "scenarios").glob("*.json")):
            expect = json.loads(f.read_text()).get("expect", {})
            for d, cell in fixture[f.stem].items():
                default = "Succeeds" if d == "none" else "Blocked"
                want = expect.get(d, default)
                if want == "Blocked":
                    self.assertTrue(cell.startswith("Blocked("), f"{f.stem} {d}")
                else:
                    self.assertEqual(want, cell, f"{f.stem} {d}")

    def test_run_inject_prints_marker(self):
        r = tzm("run", self.scenario("inject_nsw"))
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(r.stdout)
        jsonschema.validate(rep, schema("run_report"))
        self.assertTrue(rep["marker_printed"])
        self.assertEqual(rep["outcome"], "Succeeds")

    def test_run_inject_with_nx_is_blocked(self):
        r = tzm("run", self.scenario("inject_nsw"), "--defense", "nx")
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(r.stdout)
        jsonschema.validate(rep, schema("run_report"))
        self.assertEqual(rep["outcome"], "Blocked(MemFault)")

    def test_run_unexpected_outcome_exits_2(self):
        # No expectation covers fmt under nx; the default says Blocked.
        spec = json.loads(self.scenario("fmt_nsw").read_text())
        spec.pop("expect", None)
        f = self.dir / "fmt.json"
        f.write_text(json.dumps(spec))
        r = tzm("run", f, "--defense", "nx")
        self.assertEqual(r.returncode, 2)
        self.assertIn("expected Blocked, got Succeeds", r.stderr)

    def test_run_config_errors_exit_1(self):
        self.assertEqual(tzm("run", self.dir / "missing.json").returncode, 1)
        bad = self.dir / "bad.json"
        bad.write_text('{"profile": {"victim": "bof"}, "attack": "nsc_read"}')
        r = tzm("run", bad)
        self.assertEqual(r.returncode, 1)
        self.assertIn("does not apply", r.stderr)
        self.assertEqual(tzm("run", self.scenario("inject_nsw"), "--defense", "aslr").returncode, 1)
        self.assertEqual(tzm().returncode, 1)
        self.assertEqual(tzm("frobnicate").returncode, 1)

    def test_run_reports_to_file_and_writes_trace(self):
        out = self.dir / "rep.json"
        trace = self.dir / "trace.txt"
        r = tzm("run", self.scenario("rop_nsw"), "--defense", "cfi", "--out", out, "--trace", trace)
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(r.stdout, "")
        rep = json.loads(out.read_text())
        self.assertEqual(rep["outcome"], "Blocked(CfiViolation)")
        lines = trace.read_text().splitlines()
        self.assertGreater(len(lines), 100)
        cycle, pc, world, _ = lines[-1].split(",", 3)
        self.assertTrue(cycle.isdigit())
        self.assertTrue(pc.startswith("0x"))
        self.assertIn(world, ("Secure", "NonSecure"))

    def test_seed_env_overrides_scenario_seed(self):
        a = json.loads(tzm("run", self.scenario("inject_nsw")).stdout)
        b = json.loads(tzm("run", self.scenario("inject_nsw"), env={"TZM_SEED": "7"}).stdout)
        c = json.loads(tzm("run", self.scenario("inject_nsw"), env={"TZM_SEED": "7"}).stdout)
        self.assertEqual(b, c)
        self.assertTrue(a["report"]["success"] and b["report"]["success"])
        self.assertNotEqual(a["report"]["attempts"], b["report"]["attempts"])
        self.assertEqual(tzm("run", self.scenario("inject_nsw"), env={"TZM_SEED": "x"}).returncode, 1)

    def test_matrix_equals_fixture(self):
        out = self.dir / "m.json"
        r = tzm("matrix", "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        grid = json.loads(out.read_text())
        jsonschema.validate(grid, schema("matrix"))
        fixture = json.loads((SRC / "tests" / "fixtures" / "expected_matrix.json").read_text())
        self.assertEqual(grid, fixture)

    def test_matrix_with_flipped_nx_cell_exits_2(self):
        fixture = json.loads((SRC / "tests" / "fixtures" / "expected_matrix.json").read_text())
        fixture["inject_nsw"]["nx"] = "Succeeds"
        f = self.dir / "flipped.json"
        f.write_text(json.dumps(fixture))
        r = tzm("matrix", "--expected", f)
        self.assertEqual(r.returncode, 2)
        diff = [l for l in r.stderr.splitlines() if l.startswith("tzm: ")]
        self.assertEqual(diff, ["tzm: inject_nsw under nx: expected Succeeds, got Blocked(MemFault)"])

    def test_matrix_single_cell(self):
        r = tzm("matrix", "--defense", "cfi", "--attack", "fmt")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(json.loads(r.stdout), {"fmt_nsw": {"cfi": "Succeeds"}})

    def test_scan_planted_census_summary(self):
        img = self.dir / "planted.bin"
        self.assertEqual(tzm("build", "--planted-census", "--out", img).returncode, 0)
        r = tzm("scan", img, "--map", SRC / "data" / "default_map.json", "--summary")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("density 3.41%", r.stdout)
        self.assertIn("total 1908 pop_pc 49 bx_lr 16 gadgets 65", r.stdout)

    def test_scan_empty_file(self):
        img = self.dir / "empty.bin"
        img.write_bytes(b"")
        r = tzm("scan", img, "--map", SRC / "data" / "default_map.json")
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(r.stdout)
        jsonschema.validate(rep, schema("scan_report"))
        self.assertEqual((rep["total"], rep["density"]), (0, 0))

    def test_scan_malformed_manifest_exits_1(self):
        img = self.dir / "x.bin"
        img.write_bytes(b"\x00\xbd")
        bad = self.dir / "map.json"
        bad.write_text('{"regions": 3}')
        self.assertEqual(tzm("scan", img, "--map", bad).returncode, 1)

    def test_scan_of_built_victim_finds_planted_gadgets_and_gateways(self):
        img = self.dir / "rop.bin"
        self.assertEqual(tzm("build", self.scenario("nsc_read"), "--out", img).returncode, 0)
        r = tzm("scan", img, "--map", SRC / "data" / "default_map.json", "--max-gadget-len", 3)
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(r.stdout)
        jsonschema.validate(rep, schema("scan_report"))
        self.assertEqual(len(rep["nsc_entries"]), 3)
        self.assertTrue(all(0x7E00 <= a < 0x8000 for a in rep["nsc_entries"]))
        self.assertTrue(all(len(g["instructions"]) <= 3 for g in rep["gadgets"]))

    def test_payload_files(self):
        for attack in ("inject", "rop", "heap_fnptr", "heap_unlink", "fmt", "nsc_read", "nsc_write", "nsc_console"):
            out = self.dir / f"{attack}.bin"
            r = tzm("payload", attack, "--out", out)
            self.assertEqual(r.returncode, 0, attack + r.stderr)
            meta = json.loads(r.stdout)
            jsonschema.validate(meta, schema("payload_meta"))
            self.assertEqual(meta["length"], out.stat().st_size)
        inj = json.loads(tzm("payload", "inject", "--out", self.dir / "i.bin").stdout)
        self.assertTrue(inj["null_free"])
        self.assertEqual(inj["length"], 274)
        self.assertEqual(json.loads(tzm("payload", "fmt", "--out", self.dir / "f.bin").stdout)["length"], 24)
        self.assertEqual((self.dir / "f.bin").read_bytes(), b" ".join([b"%08x"] * 5))
        self.assertEqual(tzm("payload", "inject", "--out", self.dir / "z", "--entry", "zz").returncode, 1)

    def test_reports_are_deterministic(self):
        a = tzm("run", self.scenario("heap_fnptr_swx"), "--defense", "cfi", "--trace", self.dir / "a.txt")
        b = tzm("run", self.scenario("heap_fnptr_swx"), "--defense", "cfi", "--trace", self.dir / "b.txt")
        self.assertEqual(a.stdout, b.stdout)
        self.assertEqual((self.dir / "a.txt").read_bytes(), (self.dir / "b.txt").read_bytes())


if __name__ == "__main__":
    TZM = sys.argv[1]
    SRC = pathlib.Path(sys.argv[2])
    unittest.main(argv=sys.argv[:1], verbosity=2)
