import csv
import json
import math

import numpy as np
import pytest

from bitstack import cli, harness, store
from bitstack.avd import WeightId
from bitstack.errors import BadConfig
from bitstack.loader import resolve_budget

SMALL = ["--layers", "2", "--maps", "2", "--hidden", "12", "--calib-rows", "48", "--sort-rows", "16",
         "--n-iters", "4", "--k", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sorted_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("decompose", "-o", d / "raw.bstk", *SMALL) == 0
    assert run("sort", d / "raw.bstk", "-o", d / "avg.bstk") == 0
    return d / "avg.bstk"


def test_parse_bytes():
    assert cli.parse_bytes("4096") == 4096
    assert cli.parse_bytes("64KiB") == 65536
    assert cli.parse_bytes("1.5MiB") == 3 << 19
    for bad in ("10MB", "1.5", "x", "3kb"):
        with pytest.raises(BadConfig):
            cli.parse_bytes(bad)


def test_decompose_is_deterministic(tmp_path):
    a, b = tmp_path / "a.bstk", tmp_path / "b.bstk"
    assert run("decompose", "-o", a, *SMALL) == 0
    assert run("decompose", "-o", b, *SMALL) == 0
    assert a.read_bytes() == b.read_bytes()
    c = store.read_container(a)
    assert c.universal.strategy == "none" and c.config["seed"] == 1 and c.config["k"] == 2


def test_single_iteration_block_count(tmp_path):
    out = tmp_path / "one.bstk"
    args = SMALL.copy()
    args[args.index("--n-iters") + 1] = "1"
    assert run("decompose", "-o", out, *args) == 0
    assert len(store.read_container(out).universal) == 2 * 2


def test_sorted_container_verifies(sorted_path, capsys):
    c = store.read_container(sorted_path)
    assert c.universal.strategy == "average" and c.config["sort"] == {"strategy": "average"}
    assert run("verify", sorted_path) == 0
    assert "ok: 16 blocks" in capsys.readouterr().out


def test_verify_reports_violations(sorted_path, tmp_path, capsys):
    c = store.read_container(sorted_path)
    order = list(c.universal.order)
    order[0], order[-1] = order[-1], order[0]
    bad = type(c.universal)(tuple(order), "average", c.universal.scores, c.universal.weights, c.n_iters)
    store.write_container(tmp_path / "bad.bstk", store.build_container(c.config, c.stacks, c.scalings, bad))
    assert run("verify", tmp_path / "bad.bstk") == 4
    assert "error[ORDER_VIOLATION]" in capsys.readouterr().err


def test_random_sort_records_seed(sorted_path, tmp_path):
    assert run("sort", sorted_path, "-o", tmp_path / "r.bstk", "--strategy", "random", "--seed", "9") == 0
    c = store.read_container(tmp_path / "r.bstk")
    assert c.config["sort"] == {"strategy": "random", "seed": 9}
    assert run("verify", tmp_path / "r.bstk") == 0


def test_load_eval_matches_library(sorted_path, capsys):
    c = store.read_container(sorted_path)
    net, calib = cli.model_from_config(c.config)
    ev = harness.SurrogateEvaluator(net, c.scalings, calib)
    sizes = {b.ref: b.size_bits for b in c.blocks_in_order()}
    total = sum(math.ceil(b / 8) for b in sizes.values())
    for budget in (0, 333, total // 2, total):
        assert run("load-eval", sorted_path, "--budget", budget, "--json") == 0
        report = json.loads(capsys.readouterr().out)
        plan = resolve_budget(c.universal, sizes, budget)
        mats = {w: np.zeros(s.shape) for w, s in c.stacks.items()}
        for w, i in c.universal.order[: plan.prefix_len]:
            mats[w] += c.stacks[w].blocks[i - 1].restored
        assert report["prefix_len"] == plan.prefix_len and report["loaded_bytes"] == plan.total_bytes
        assert report["eval_score"] == pytest.approx(ev(mats), rel=1e-12, abs=1e-18)
        if budget == 0:
            assert report["degenerate"] and report["eval_score"] == pytest.approx(ev.zero_score)
        if budget == total:
            assert report["eval_score"] < 0.05 * ev.zero_score


def test_load_eval_text_and_unsorted(sorted_path, tmp_path, capsys):
    assert run("load-eval", sorted_path, "--budget", "1KiB") == 0
    assert "loaded" in capsys.readouterr().out
    assert run("decompose", "-o", tmp_path / "raw.bstk", *SMALL) == 0
    assert run("load-eval", tmp_path / "raw.bstk", "--budget", "1KiB") == 2
    assert capsys.readouterr().err.startswith("error[BAD_CONFIG]")


def test_sizes_known_shapes(tmp_path, capsys):
    out = tmp_path / "sizes.csv"
    assert run("sizes", "--shape", "4096x4096", "--shape", "4096x1024", "--csv", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["size_mib"] for r in rows] == ["2.25", "0.66"]
    assert rows[0]["size_bits"] == "18874368"
    assert "2.25" in capsys.readouterr().out


def test_sizes_from_container(sorted_path, tmp_path):
    out = tmp_path / "sizes.csv"
    assert run("sizes", sorted_path, "--csv", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4
    for r in rows:
        m, n, k = int(r["m"]), int(r["n"]), int(r["k"])
        assert int(r["size_bits"]) == m * n + 16 * k * (m + n)


def test_sweep_matches_library(sorted_path, tmp_path):
    out, gp = tmp_path / "sweep.csv", tmp_path / "sweep.gp"
    assert run("sweep", sorted_path, "-o", out, "--points", "7", "--gnuplot", gp) == 0
    rows = harness.parse_sweep_csv(out.read_text())
    c = store.read_container(sorted_path)
    net, calib = cli.model_from_config(c.config)
    total = sum(math.ceil(b.size_bits / 8) for b in c.blocks_in_order())
    expect = harness.budget_sweep(c.stacks, c.universal, c.scalings, harness.SurrogateEvaluator(net, c.scalings, calib),
                                  harness.sweep_grid(total, 7))
    assert rows == expect
    assert "plot" in gp.read_text()
    assert run("sweep", sorted_path, "-o", out, "--stride", "500", "--stop", "2000") == 0
    assert [r.budget_bytes for r in harness.parse_sweep_csv(out.read_text())] == [0, 500, 1000, 1500, 2000]


def test_file_sources(tmp_path):
    net = harness.build_reference_network(harness.NetworkConfig(2, 2, 12), seed=40)
    harness.save_network(tmp_path / "w.npz", net)
    harness.write_matrix(tmp_path / "x.bmat", harness.make_calibration(48, 12, seed=41))
    out = tmp_path / "f.bstk"
    assert run("decompose", "-o", out, *SMALL, "--weights", tmp_path / "w.npz", "--calib", tmp_path / "x.bmat") == 0
    cfg = store.read_container(out).config
    assert len(cfg["weights_file_sha256"]) == 64
    assert run("sort", out, "-o", tmp_path / "g.bstk") == 0
    # the sort step re-reads the sources; a changed file is refused
    harness.write_matrix(tmp_path / "x.bmat", harness.make_calibration(48, 12, seed=42))
    assert run("sort", out, "-o", tmp_path / "h.bstk") == 2


def test_error_exit_codes(tmp_path, capsys):
    assert run("decompose", "-o", tmp_path / "x.bstk", "--k", "0") == 2
    assert run("verify", tmp_path / "missing.bstk") == 3
    (tmp_path / "junk.bstk").write_bytes(b"NOPE" + bytes(60))
    assert run("verify", tmp_path / "junk.bstk") == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error[BAD_MAGIC]: ")
    assert run("load-eval", tmp_path / "junk.bstk", "--budget", "10MB") == 2
    assert run("sizes") == 2
    with pytest.raises(SystemExit) as info:
        run("sort")
    assert info.value.code == 2
