import json
import subprocess

import numpy as np
import pytest

import mvkm


def screen_config(views_kernel=None):
    b = {"name": "B", "file": "b.csv", "kind": "genotype", "group_delimiter": "_"}
    if views_kernel:
        b["kernel"] = views_kernel
    return {
        "schema_version": 1,
        "views": [{"name": "A", "file": "a.csv", "group_delimiter": "_"}, b],
        "phenotype": {"file": "y.csv", "column": "case"},
        "tests": ["overall", "marginal", {"kind": "composite", "order": 2}],
    }


def test_grams_are_valid():
    x = np.random.default_rng(1).normal(size=(30, 4))
    k = mvkm.gaussian_gram(x)
    assert k.shape == (30, 30)
    assert np.allclose(k, k.T)
    assert np.allclose(np.diag(k), 1.0)
    assert np.linalg.eigvalsh(k).min() > -1e-8
    assert np.allclose(mvkm.linear_gram(x), x @ x.T)
    g = np.random.default_rng(2).integers(0, 3, size=(20, 5)).astype(float)
    assert np.allclose(np.diag(mvkm.ibs_gram(g)), 1.0)


def test_family_terms():
    views = [np.random.default_rng(s).normal(size=(25, 3)) for s in range(3)]
    fam = mvkm.kernel_family(views, max_order=3)
    assert len(fam) == 7
    assert np.allclose(fam["1x2"], fam["1"] * fam["2"])


def test_score_tests_on_simulated_data():
    y, x, views = mvkm.simulate(80, 3, [0.2, 0.0, 0.0], seed=3)
    assert set(np.unique(y)) <= {0.0, 1.0}
    results = mvkm.score_tests(y, x, views, family="binomial", genotype_views=[0])
    kinds = [r["kind"] for r in results]
    assert kinds.count("marginal") == 3
    assert kinds.count("composite") == 3
    for r in results:
        assert 0.0 <= r["p_value"] <= 1.0


def test_composite_and_reml():
    rng = np.random.default_rng(4)
    views = [rng.normal(size=(50, 3)) for _ in range(2)]
    x = np.ones((50, 1))
    y = rng.normal(size=50)
    r = mvkm.composite_test(y, x, views, [0, 1])
    assert r["term"] == "1x2"
    assert 0.0 <= r["p_value"] <= 1.0
    assert set(r["taus"]) == {"1", "2"}
    fit = mvkm.reml_fit(y, x, [mvkm.gaussian_gram(v) for v in views])
    assert fit["sigma2"] > 0.0
    assert all(t >= 0.0 for t in fit["taus"])


def test_errors_carry_codes():
    with pytest.raises(mvkm.MvkmError) as info:
        mvkm.ibs_gram(np.full((4, 2), 3.0))
    assert info.value.code == "invalid-genotype"
    with pytest.raises(mvkm.MvkmError) as info:
        mvkm.score_tests(np.zeros(5), np.ones((5, 1)), [np.zeros((5, 2))], family="gamma")
    assert info.value.code == "invalid-parameter"


def test_pvalues_and_bh():
    assert mvkm.satterthwaite_pvalue(0.0, 1.0, 3.0) == pytest.approx(1.0)
    assert mvkm.satterthwaite_pvalue(7.8147, 1.0, 3.0) == pytest.approx(0.05, abs=1e-4)
    assert mvkm.bh_adjust([0.01, 0.04, 0.03]) == pytest.approx([0.03, 0.04, 0.04])


def test_power_study_is_deterministic():
    cfg = json.dumps({"schema_version": 1, "n": 60, "m": 2, "alphas": [0.0, 0.0], "replicates": 3, "methods": ["overall"], "seed": 5})
    a = mvkm.power_study(cfg, workers=1)
    assert a == mvkm.power_study(cfg, workers=2)
    assert len(a.strip().splitlines()) == 2


def test_run_screen(screen_dir):
    path = screen_dir / "run.json"
    path.write_text(json.dumps(screen_config()))
    out = mvkm.run_screen(str(path))
    assert len(out["results"].strip().splitlines()) == 5
    assert json.loads(out["manifest"])["tuples"] == 4
    assert out["failed_tuples"] == 0


def run_cli(cli, *args):
    return subprocess.run([cli, *args], capture_output=True, text=True).returncode


def test_cli_exit_codes(cli, screen_dir):
    good = screen_dir / "good.json"
    good.write_text(json.dumps(screen_config()))
    out = screen_dir / "out"
    assert run_cli(cli, "test", "--config", str(good), "--out", str(out), "--workers", "2") == 0
    for name in ("results.tsv", "plotdata.tsv", "manifest.json"):
        assert (out / name).exists()
    assert run_cli(cli, "validate", "--config", str(good)) == 0

    bad = screen_dir / "bad.json"
    bad.write_text(json.dumps({**screen_config(), "unknown_key": 1}))
    assert run_cli(cli, "test", "--config", str(bad)) == 2
    assert run_cli(cli, "test", "--config", str(good), "--max-tuples", "2") == 2
    assert run_cli(cli, "test", "--config", str(good), "--alpha", "1.5") == 2

    (screen_dir / "b.csv").write_text((screen_dir / "b.csv").read_text().replace("\ns0,", "\ns0,7", 1))
    assert run_cli(cli, "test", "--config", str(good), "--out", str(out)) == 3


def test_cli_all_tuples_failed(cli, screen_dir):
    cfg = screen_dir / "linear.json"
    cfg.write_text(json.dumps(screen_config("linear")))
    assert run_cli(cli, "test", "--config", str(cfg), "--out", str(screen_dir / "out")) == 4


def test_cli_simulate(cli, tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"schema_version": 1, "n": 60, "m": 2, "alphas": [0.0, 0.0], "replicates": 2, "methods": ["overall"]}))
    assert run_cli(cli, "simulate", "--config", str(cfg), "--out", str(tmp_path / "out"), "--seed", "9") == 0
    assert (tmp_path / "out" / "manifest.json").exists()
