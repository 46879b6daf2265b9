import io
import json
import math
import time

import numpy as np
import pytest

from projsuper import catalog as C
from projsuper.cli import (ConfigError, RunConfig, build_config, main, make_parser, parse_grid, read_scan_csv,
                           scan_sphere, write_scan_csv)


def _json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.mark.parametrize("name", ["generator-1", "darboux-koenigs-4"])
def test_verify_catalog_systems(name, capsys):
    assert main(["verify", name]) == 0
    rep = _json(capsys)
    assert rep["status"] == "PASS" and rep["first_failure"] is None
    names = [c["check"] for c in rep["checks"]]
    assert "metrizability" in names and "independence" in names


def test_verify_known_bad_fixture(data_dir, capsys):
    assert main(["verify", str(data_dir / "bad_system.json")]) == 1
    rep = _json(capsys)
    assert rep["status"] == "FAIL"
    assert rep["first_failure"].startswith("bertrand-darboux")


def test_verify_unknown_system(capsys):
    assert main(["verify", "no-such-system"]) == 2
    assert "error" in capsys.readouterr().err


def test_verify_writes_report(tmp_path):
    out = tmp_path / "r.json"
    assert main(["verify", "generator-2", "--points", "20", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["system"] == "generator-2"


def test_classify_equator(capsys):
    assert main(["classify", "--theta", "0", "--phi", str(math.pi / 4)]) == 0
    rep = _json(capsys)
    assert rep["label"] == "(21,0)"
    assert set(rep) >= {"theta", "phi", "label", "margins", "residual_rms", "seed"}
    assert rep["residual_rms"] < 1e-8


def test_classify_generic(capsys):
    assert main(["classify", "--theta", "0.3", "--phi", "1.0"]) == 0
    assert _json(capsys)["label"] == "(111,11)"


def test_classify_curve_point_lemma_convention(capsys):
    phi = 1.0
    th = C.degeneration_theta(phi)
    assert main(["classify", "--theta", repr(th), "--phi", repr(phi), "--convention", "lemma"]) == 0
    assert _json(capsys)["label"] == "(21,2)"


def test_classify_excluded_point(capsys):
    assert main(["classify", "--theta", str(math.pi / 2), "--phi", "0"]) == 2
    assert "homothetic" in capsys.readouterr().err


def test_seed_precedence(tmp_path, monkeypatch):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# comment\nseed = 11\nsamples = 90\neps-c = 2e-6\n")
    p = make_parser()
    monkeypatch.delenv("PROJSUPER_SEED", raising=False)
    assert build_config(p.parse_args(["classify", "--theta", "0", "--phi", "1"])).seed == RunConfig().seed
    cfg = build_config(p.parse_args(["classify", "--theta", "0", "--phi", "1", "--config", str(cfgfile)]))
    assert (cfg.seed, cfg.samples, cfg.eps_c) == (11, 90, 2e-6)
    monkeypatch.setenv("PROJSUPER_SEED", "22")
    cfg = build_config(p.parse_args(["classify", "--theta", "0", "--phi", "1", "--config", str(cfgfile)]))
    assert cfg.seed == 22
    cfg = build_config(p.parse_args(["classify", "--theta", "0", "--phi", "1", "--config", str(cfgfile),
                                     "--seed", "33", "--samples", "120"]))
    assert (cfg.seed, cfg.samples) == (33, 120)


def test_seed_is_reported(monkeypatch, capsys):
    monkeypatch.setenv("PROJSUPER_SEED", "5")
    assert main(["classify", "--theta", "0.3", "--phi", "1.0"]) == 0
    assert _json(capsys)["seed"] == 5


def test_bad_config(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("colour = blue\n")
    p = make_parser()
    with pytest.raises(ConfigError):
        build_config(p.parse_args(["verify", "generator-1", "--config", str(f)]))
    with pytest.raises(ConfigError):
        RunConfig(eps_c=0)
    with pytest.raises(ConfigError):
        RunConfig(samples=10)
    assert main(["verify", "generator-1", "--config", str(f)]) == 2


def test_grid_parsing():
    assert parse_grid("64x32") == (64, 32)
    for bad in ("4x4", "axb", "8"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_scan_smoke_and_determinism():
    cfg = RunConfig(workers=1)
    t0 = time.time()
    rows = scan_sphere(8, 8, cfg)
    assert time.time() - t0 < 60
    assert len(rows) == 64
    assert all(r["label"] != "unclassifiable" for r in rows)
    texts = []
    for rr in (rows, scan_sphere(8, 8, RunConfig(workers=2))):
        buf = io.StringIO()
        write_scan_csv(rr, buf, cfg, (8, 8), timestamp=False)
        texts.append(buf.getvalue())
    assert texts[0] == texts[1]
    assert texts[0].startswith("# projsuper") and f"seed={cfg.seed}" in texts[0].splitlines()[0]


def test_scan_antipodes_and_csv(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert main(["scan-sphere", "--grid", "8x8", "--workers", "1", "--out", str(out)]) == 0
    rows = read_scan_csv(out)
    assert len(rows) == 64
    # rows are ordered theta-major; the antipode of cell (i, j) is (7-i, j+4 mod 8)
    for i in range(8):
        for j in range(8):
            a, b = rows[8 * i + j], rows[8 * (7 - i) + (j + 4) % 8]
            assert float(a["theta"]) == pytest.approx(-float(b["theta"]))
            assert a["label"] == b["label"]
    # floats are written with 17 significant digits
    assert float(rows[0]["theta"]) == -math.pi / 2 + 0.5 * math.pi / 8


def test_transport_generator_1_to_2(capsys):
    assert main(["transport", "--from", "generator-1", "--to", "generator-2", "--n", "4"]) == 0
    rep = _json(capsys)
    assert rep["closedness"] < 1e-9
    g2 = C.get("generator-2")
    x, y, V = (np.array(rep["grid"][k]) for k in ("x", "y", "V"))
    from projsuper.expr import evaluate
    ref = evaluate(g2.V, {**g2.bindings(), "x": x, "y": y})
    # transported potential equals the catalog one up to a constant and the shared U scale
    A = np.column_stack([ref, np.ones_like(ref)])
    coef, *_ = np.linalg.lstsq(A, V, rcond=None)
    assert np.max(np.abs(A @ coef - V)) < 1e-8 * (1 + np.max(np.abs(V)))
    assert abs(coef[0]) > 1e-3


def test_identity_transport_is_exact(capsys):
    assert main(["transport", "--from", "generator-1", "--to", "generator-1", "--n", "3"]) == 0
    rep = _json(capsys)
    g1 = C.get("generator-1")
    from projsuper.expr import evaluate
    x, y, V = (np.array(rep["grid"][k]) for k in ("x", "y", "V"))
    b = {**g1.bindings(), "x": x, "y": y}
    ref = evaluate(g1.V, b) - evaluate(g1.V, {**g1.bindings(), "x": g1.basepoint[0], "y": g1.basepoint[1]})
    assert np.max(np.abs(V - ref)) < 1e-9 * (1 + np.max(np.abs(ref)))


def test_transport_rejects_other_class(data_dir, capsys):
    assert main(["transport", "--from", "flat-generic", "--to", str(data_dir / "conformal.json")]) == 2
    assert "not projectively equivalent" in capsys.readouterr().err


def test_catalog_list(capsys):
    assert main(["catalog-list", "--json"]) == 0
    names = [d["name"] for d in _json(capsys)]
    assert names == C.names()
    assert main(["catalog-list"]) == 0
    assert "generator-1" in capsys.readouterr().out
