import csv
import json

import numpy as np
import pytest

from docforge import attack as atk
from docforge import docgen
from docforge import harness
from docforge import metrics
from docforge import model as mdl


@pytest.fixture(scope="module")
def params_file(tmp_path_factory):
    cfg = mdl.ModelConfig(d=16, d_patch=8, heads=2, dec_layers=1, mlp=16, canvas=(48, 256))
    path = tmp_path_factory.mktemp("victim") / "victim.bin"
    mdl.save_params(mdl.init_params(cfg, 0), path)
    return path


def cfg_for(tmp_path, params_file, **kw):
    base = dict(n_train=2, n_eval=2, n_val=2, params=str(params_file), out=str(tmp_path), K=1)
    base.update(kw)
    return harness.build_config(overrides=base)


def test_parse_kv_and_overrides():
    text = "# comment\nK = 7\nb_values = 1, 3 5\nstyle=prompted  # trailing\n"
    cfg = harness.build_config(harness.parse_kv(text), {"K": "9"})
    assert cfg.K == 9 and cfg.b_values == [1, 3, 5] and cfg.style == "prompted"
    with pytest.raises(ValueError):
        harness.parse_kv("no equals sign")
    with pytest.raises(ValueError):
        harness.build_config({"bogus": "1"})
    with pytest.raises(ValueError):
        harness.build_config(overrides={"b_values": "0 1"})
    with pytest.raises(ValueError):
        harness.build_config(overrides={"region": "corner"})


def test_resolved_defaults_follow_style_and_region():
    r = harness.build_config(overrides={"style": "prompted", "region": "patch"}).resolved()
    assert (r.epsilon, r.alpha, r.K) == atk.DEFAULT_HPARAMS[("prompted", "patch")]
    assert r.loss == atk.LOGIT_MARGIN
    r = harness.build_config(overrides={"style": "prompted", "kind": "doa"}).resolved()
    assert r.loss == atk.NLL


def test_config_echo_roundtrips(tmp_path):
    cfg = harness.build_config(overrides={"K": 3, "b_values": [2, 4]}).resolved()
    path = tmp_path / "config.txt"
    harness.dump_config(cfg, path)
    back = harness.build_config(harness.parse_kv(path.read_text()))
    assert back == cfg


def test_splits_are_disjoint():
    cfg = harness.build_config(overrides={"n_train": 6, "n_eval": 4, "n_val": 4})
    tr, ev, va = harness.datasets(cfg)
    keys = [{d.spec.key() for d in s} for s in (tr, ev, va)]
    assert len(keys[0] | keys[1] | keys[2]) == 14


def test_null_attack_png_equals_input(tmp_path, params_file):
    cfg = cfg_for(tmp_path, params_file, epsilon=0).resolved()
    _, held, _ = harness.datasets(cfg)
    v = harness.load_victim(cfg)
    rec, adv = harness.attack_document(v, held[0], cfg, 1, tmp_path / "a.png")
    assert np.array_equal(docgen.load_png(tmp_path / "a.png"), held[0].pixels)
    assert rec["bit_exact"] and not rec["verdict_diverged"] and rec["linf"] == 0


def test_patch_attack_png_differs_only_in_square(tmp_path, params_file):
    cfg = cfg_for(tmp_path, params_file, region="patch", K=2).resolved()
    _, held, _ = harness.datasets(cfg)
    doc = held[0]
    rec, _ = harness.attack_document(harness.load_victim(cfg), doc, cfg, 1, tmp_path / "p.png")
    diff = (docgen.load_png(tmp_path / "p.png") != doc.pixels).any(axis=-1)
    mask = atk.patch_region(doc.pixels.shape)
    assert diff.any() and not diff[~mask].any()
    assert rec["reload_success"] == rec["success"]


def test_load_victim_checks_style_and_presence(tmp_path, params_file):
    with pytest.raises(FileNotFoundError):
        harness.load_victim(cfg_for(tmp_path, tmp_path / "missing.bin"))
    with pytest.raises(ValueError):
        harness.load_victim(cfg_for(tmp_path, params_file, style="prompted"))


def test_sweep_writes_reports(tmp_path, params_file):
    cfg = cfg_for(tmp_path, params_file, b_values=[1, 5])
    report, records = harness.sweep(cfg, log=lambda s: None)
    assert [r.B for r in report.rows] == [1, 5]
    assert report.rows[1].cdmg is None
    name = "headered-targeted-full"
    rows = list(csv.DictReader(open(tmp_path / f"report_{name}.csv")))
    assert rows[1]["cdmg"] == "undefined"
    assert (tmp_path / f"report_{name}.svg").read_text().startswith("<svg")
    assert len(records) == 4 and all("reload_success" in r for r in records)
    assert len(list((tmp_path / "png").glob("*.png"))) == 4
    back = metrics.EvalReport.from_json((tmp_path / f"report_{name}.json").read_text())
    assert back.rows == report.rows


def test_worker_pool_is_deterministic(tmp_path, params_file):
    cfg = cfg_for(tmp_path, params_file).resolved()
    _, held, _ = harness.datasets(cfg)
    jobs = [(cfg, params_file, d, 1, None) for d in held]
    serial = harness.run_pool(jobs, 1)
    parallel = harness.run_pool(jobs, 2)
    assert json.dumps(serial) == json.dumps(parallel)


def test_render_svg_skips_undefined_points():
    rep = metrics.EvalReport({"name": "x"})
    rep.add(metrics.EvalRow(1, 1.0, 0.0, 0.5, 1.0, 0.5, 2))
    rep.add(metrics.EvalRow(5, 0.5, None, 0.5, 0.7, None, 2))
    svg = harness.render_svg(rep)
    assert svg.count("<circle") == 2 + 1 + 2 + 1
    assert "undefined" in harness.render_text(rep)


def test_cli_gen_uses_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "root"))
    assert harness.main(["gen", "--set", "n_train=2", "--set", "n_eval=1", "--set", "n_val=1"]) == 0
    out = tmp_path / "root" / "data"
    assert (out / "config.txt").exists()
    assert len(json.loads((out / "train" / "manifest.json").read_text())["documents"]) == 2


def test_cli_attack_and_render(tmp_path, params_file):
    args = ["--out", str(tmp_path), "--set", f"params={params_file}", "--set", "n_train=2"]
    args += ["--set", "n_eval=2", "--set", "n_val=1", "--set", "K=1"]
    harness.main(["attack"] + args)
    rec = json.loads((tmp_path / "attack" / "adv_000_B1.json").read_text())
    assert rec["verdict_diverged"] is False
    harness.main(["sweep"] + args + ["--set", "b_values=1"])
    rep = tmp_path / "sweep" / "report_headered-targeted-full.json"
    harness.main(["render-report", str(rep)])
    assert rep.with_suffix(".txt").exists()


def test_train_victim_is_reproducible(tmp_path):
    hashes = []
    for run in ("a", "b"):
        cfg = harness.build_config(
            overrides={"n_train": 1, "n_eval": 1, "n_val": 1, "epochs": 1, "out": str(tmp_path / run)}
        )
        _, summary = harness.train_victim(cfg, log=lambda s: None)
        hashes.append(summary["params_sha1"])
        assert (tmp_path / run / "train_log_headered.csv").exists()
    assert hashes[0] == hashes[1]
