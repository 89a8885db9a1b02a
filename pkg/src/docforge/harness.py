"""Experiment orchestration and the ``docforge`` command line.

Subcommands: ``gen``, ``train``, ``attack``, ``sweep``, ``eval`` and
``render-report``.  Every run writes into ``<root>/<run name>`` where the
root comes from ``--out`` or the ``DOCFORGE_OUT`` environment variable.
Configuration is a plain ``key = value`` file; command-line ``--set
key=value`` pairs override it and the resolved values are echoed to
``config.txt`` in the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as atk
from . import docgen
from . import metrics
from . import model as mdl
from . import preprocess as pp

OUT_ENV = "DOCFORGE_OUT"
DEFAULT_ROOT = "runs"

TARGETED = "targeted"
DOA = "doa"


@dataclass
class ExperimentConfig:
    n_train: int = 64
    n_eval: int = 16
    n_val: int = 16
    data_seed: int = 7
    style: str = mdl.HEADERED
    params: str = ""  # params file; defaults to <out>/victim_<style>.bin
    model_seed: int = 0
    epochs: int = 2000
    lr: float = 3e-3
    batch: int = 8
    target_val_em: float = 0.975  # early stop once the validation split reaches this
    kind: str = TARGETED  # or "doa"
    loss: str = ""  # empty -> default for the style
    region: str = "full"  # or "patch"
    patch_fraction: float = atk.PATCH_FRACTION
    epsilon: float = -1.0  # negative -> default for (style, region)
    alpha: float = -1.0
    K: int = -1
    step: str = "sign"
    b_values: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    tau: float = 0.5
    workers: int = 1
    doc: int = 0  # attack subcommand: index into the eval split
    out: str = ""

    def __post_init__(self):
        if self.style not in (mdl.HEADERED, mdl.PROMPTED):
            raise ValueError(f"unknown style {self.style!r}")
        if self.kind not in (TARGETED, DOA):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.region not in ("full", "patch"):
            raise ValueError(f"unknown region {self.region!r}")
        bad = [b for b in self.b_values if not 1 <= b <= docgen.M]
        if bad:
            raise ValueError(f"B values {bad} outside 1..{docgen.M}")

    def resolved(self):
        """Copy with style-dependent defaults filled in."""
        eps, alpha, K = atk.DEFAULT_HPARAMS[(self.style, self.region)]
        loss = self.loss or (atk.NLL if self.kind == DOA else atk.DEFAULT_LOSS[self.style])
        return dataclasses.replace(
            self,
            loss=loss,
            epsilon=eps if self.epsilon < 0 else self.epsilon,
            alpha=alpha if self.alpha < 0 else self.alpha,
            K=K if self.K < 0 else self.K,
        )

    def params_path(self):
        return Path(self.params) if self.params else Path(self.out) / f"victim_{self.style}.bin"


# ------------------------------------------------------------- config I/O


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, list):
        return [int(v) for v in value.replace(",", " ").split()]
    return value.strip()


def parse_kv(text):
    """``key = value`` lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(file_values=None, overrides=None) -> ExperimentConfig:
    base = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(base)}
    values = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            values[k] = _coerce(v, getattr(base, k)) if isinstance(v, str) else v
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig, path):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, list) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ data


def datasets(cfg: ExperimentConfig):
    """(train, eval, validation) splits; pairwise disjoint field maps."""
    train, held = docgen.train_heldout(cfg.n_train, cfg.n_eval, cfg.data_seed)
    used = {d.spec.key() for d in train + held}
    val = docgen.make_dataset(cfg.n_val, cfg.data_seed + 2, exclude=used)
    return train, held, val


def model_config(style):
    return mdl.ModelConfig(mode=style)


def file_sha1(path):
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------- training


def train_victim(cfg: ExperimentConfig, log=print):
    """Train, save the params file and a CSV log; returns (params, summary dict)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, held, val = datasets(cfg)
    mcfg = model_config(cfg.style)
    tcfg = mdl.TrainConfig(batch=cfg.batch, lr=cfg.lr)
    rows = []
    best = {"em": -1.0, "params": None, "epoch": 0}
    t0 = time.time()

    def on_epoch(epoch, loss):
        rows.append({"epoch": epoch + 1, "loss": loss, "train_em": "", "val_em": ""})

    def monitor(epoch, params):
        em, _ = mdl.exact_match(params, val)
        train_em, _ = mdl.exact_match(params, train[: len(val)])
        rows[-1]["val_em"] = em
        rows[-1]["train_em"] = train_em
        if em > best["em"]:
            best.update(em=em, params=params.copy(), epoch=epoch + 1)
            mdl.save_params(best["params"], cfg.params_path())
        log(
            f"epoch {epoch + 1}: loss {rows[-1]['loss']:.4f} exact-match train {train_em:.3f}"
            f" val {em:.3f} ({time.time() - t0:.0f}s)"
        )
        return em >= cfg.target_val_em

    last = mdl.train(mcfg, train, cfg.epochs, cfg.model_seed, tcfg, monitor=monitor, log=on_epoch)
    # keep the checkpoint with the best validation score
    params = best["params"] if best["params"] is not None else last
    mdl.save_params(params, cfg.params_path())
    with open(out / f"train_log_{cfg.style}.csv", "w") as fh:
        fh.write("epoch,loss,train_em,val_em\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['loss']:.6f},{r['train_em']},{r['val_em']}\n")
    em, _ = mdl.exact_match(params, held)
    summary = {
        "epochs": len(rows),
        "best_epoch": best["epoch"],
        "val_exact_match": best["em"],
        "seconds": round(time.time() - t0, 1),
        "heldout_exact_match": em,
        "params_sha1": file_sha1(cfg.params_path()),
    }
    (out / f"train_summary_{cfg.style}.json").write_text(json.dumps(summary, indent=2))
    return params, summary


def load_victim(cfg: ExperimentConfig):
    path = cfg.params_path()
    if not path.exists():
        raise FileNotFoundError(f"no trained parameters at {path}; run `docforge train` first")
    params = mdl.load_params(path)
    if params.config.mode != cfg.style:
        raise ValueError(f"{path} holds a {params.config.mode} model, config asks for {cfg.style}")
    return mdl.Victim(params)


# ----------------------------------------------------------------- attacks


def feasible_set(cfg: ExperimentConfig, shape):
    mask = atk.patch_region(shape, cfg.patch_fraction) if cfg.region == "patch" else None
    return atk.FeasibleSet(cfg.epsilon, 0.0, 255.0, mask)


def scenario_for(cfg: ExperimentConfig, doc, B):
    if cfg.kind == DOA:
        kind = atk.DENIAL_OF_ANSWER
    else:
        kind = atk.targeted_kind(B)
    return atk.build_scenario(kind, doc, B, loss=cfg.loss, alpha=cfg.alpha, K=cfg.K, step=cfg.step)


def attack_document(victim, doc, cfg: ExperimentConfig, B, png_path=None):
    """Attack one document; returns a JSON-ready record with both verdicts."""
    scenario = scenario_for(cfg, doc, B)
    fs = feasible_set(cfg, doc.pixels.shape)
    result = atk.pgd_attack(victim, doc, scenario, fs)
    adv = result.adversarial(doc.pixels)
    answers = victim.answer_in_memory(adv, doc.questions)
    verdict = _verdict(scenario, answers, doc)
    record = {
        "doc_id": doc.doc_id,
        "B": B,
        "answers": answers,
        "ground_truth": doc.answers,
        "targets": scenario.targets,
        "qa_indices": scenario.qa_indices,
        "losses": result.losses,
        "success": verdict,
        "linf": int(np.abs(result.delta).max()) if result.delta.size else 0,
        "hyperparams": result.hyperparams,
    }
    if png_path is not None:
        docgen.save_png(adv, png_path)
        reloaded = docgen.load_png(png_path)
        again = victim.answer(reloaded, doc.questions)
        record["png"] = str(png_path)
        record["reload_answers"] = again
        record["reload_success"] = _verdict(scenario, again, doc)
        record["bit_exact"] = bool(np.array_equal(reloaded, adv))
        record["verdict_diverged"] = record["reload_success"] != verdict
    return record, adv


def _verdict(scenario, answers, doc):
    return all(
        atk.pair_success(scenario, j, answers[j], doc.qa_pairs[j][1]) for j in scenario.qa_indices
    )


def outcomes_from(record, doc, kind):
    out = []
    for j, (_, truth) in enumerate(doc.qa_pairs):
        optimized = j in record["qa_indices"]
        target = None
        if optimized and kind == TARGETED:
            target = record["targets"][record["qa_indices"].index(j)]
        out.append(metrics.QAOutcome(doc.doc_id, j, record["answers"][j], truth, target, optimized))
    return out


def _attack_job(args):
    cfg, params_path, doc, B, png_path = args
    victim = mdl.Victim(mdl.load_params(params_path))
    try:
        record, _ = attack_document(victim, doc, cfg, B, png_path)
    except atk.AttackError as e:
        record = {"doc_id": doc.doc_id, "B": B, "error": str(e)}
    return record


def run_pool(jobs, workers):
    """Map ``_attack_job`` over ``jobs`` keeping input order (deterministic merge)."""
    if workers <= 1:
        return [_attack_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_attack_job, jobs))


def clean_baseline(victim, docs, tau=0.5):
    outs = []
    for doc in docs:
        answers = victim.answer(doc.pixels, doc.questions)
        outs += [metrics.QAOutcome(doc.doc_id, j, a, t) for j, (a, t) in enumerate(zip(answers, doc.answers))]
    return metrics.anls(outs, tau=tau), outs


def sweep(cfg: ExperimentConfig, log=print):
    """Attack every eval document for each B; returns the EvalReport and raw records."""
    cfg = cfg.resolved()
    out = Path(cfg.out)
    (out / "png").mkdir(parents=True, exist_ok=True)
    _, held, _ = datasets(cfg)
    victim = load_victim(cfg)
    baseline, _ = clean_baseline(victim, held, cfg.tau)
    name = f"{cfg.style}-{cfg.kind}-{cfg.region}"
    report = metrics.EvalReport(
        {
            "name": name,
            "kind": cfg.kind,
            "style": cfg.style,
            "loss": cfg.loss,
            "region": cfg.region,
            "epsilon": cfg.epsilon,
            "alpha": cfg.alpha,
            "K": cfg.K,
            "step": cfg.step,
            "tau": cfg.tau,
        }
    )
    mode = "targeted" if cfg.kind == TARGETED else "untargeted"
    records = []
    for B in cfg.b_values:
        pngs = [out / "png" / f"{name}_B{B}_{i:03d}.png" for i in range(len(held))]
        jobs = [(cfg, cfg.params_path(), doc, B, png) for doc, png in zip(held, pngs)]
        recs = run_pool(jobs, cfg.workers)
        outs, failures = [], 0
        for doc, rec in zip(held, recs):
            if "error" in rec:
                failures += 1
                continue
            outs += outcomes_from(rec, doc, cfg.kind)
        row = metrics.evaluate_outcomes(outs, mode, B, baseline, cfg.tau)
        row.failures = failures
        report.add(row)
        records += recs
        log(f"{name} B={B}: ASR {row.asr} CDMG {row.cdmg} ANLS-B {row.anls_b} ANLS-C {row.anls_c}")
    report.to_csv(out / f"report_{name}.csv")
    report.to_json(out / f"report_{name}.json")
    (out / f"records_{name}.json").write_text(json.dumps(records, indent=1))
    svg_path = out / f"report_{name}.svg"
    svg_path.write_text(render_svg(report))
    return report, records


# --------------------------------------------------------------- figures


def _fmt(v):
    return "undefined" if v is None else f"{v:.3f}"


def render_text(report: metrics.EvalReport):
    cols = ("B", "asr", "cdmg", "anls_baseline", "anls_b", "anls_c")
    lines = [str(report.scenario.get("name", "")), "  ".join(f"{c:>13}" for c in cols)]
    for r in report.rows:
        lines.append("  ".join(f"{(r.B if c == 'B' else _fmt(getattr(r, c))):>13}" for c in cols))
    return "\n".join(lines) + "\n"


def render_svg(report: metrics.EvalReport, width=520, height=320):
    """Line chart of ASR, CDMG, ANLS-B and ANLS-C against B; undefined points are skipped."""
    series = (("asr", "#c0392b"), ("cdmg", "#2c3e50"), ("anls_b", "#27ae60"), ("anls_c", "#8e44ad"))
    left, right, top, bottom = 50, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom
    Bs = [r.B for r in report.rows] or [1]
    lo, hi = min(Bs), max(Bs)
    span = max(hi - lo, 1)
    X = lambda b: left + (b - lo) / span * pw  # noqa: E731
    Y = lambda v: top + (1 - v) * ph  # noqa: E731
    el = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"'
        ' font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-size="13">{report.scenario.get("name", "")}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        el.append(f'<line x1="{left - 4}" y1="{Y(v):.1f}" x2="{left + pw}" y2="{Y(v):.1f}" stroke="#ddd"/>')
        el.append(f'<text x="{left - 8}" y="{Y(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for b in Bs:
        el.append(f'<text x="{X(b):.1f}" y="{top + ph + 16}" text-anchor="middle">{b}</text>')
    el.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">B (optimized QA pairs)</text>')
    for k, (name, color) in enumerate(series):
        pts = [(X(r.B), Y(getattr(r, name))) for r in report.rows if getattr(r, name) is not None]
        if len(pts) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            el.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            el.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * k + 6
        lx = left + pw + 12
        el.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        el.append(f'<text x="{lx + 22}" y="{ly + 4}">{name.upper().replace("_", "-")}</text>')
    el.append("</svg>")
    return "\n".join(el) + "\n"


# -------------------------------------------------------------------- CLI


def _root(args):
    return Path(args.out or os.environ.get(OUT_ENV, DEFAULT_ROOT))


def _config_from_args(args, name):
    file_values = parse_kv(Path(args.config).read_text()) if args.config else {}
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    cfg = build_config(file_values, overrides)
    if not cfg.out:
        cfg = dataclasses.replace(cfg, out=str(_root(args) / name))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    dump_config(cfg.resolved(), Path(cfg.out) / "config.txt")
    return cfg


def cmd_gen(args):
    cfg = _config_from_args(args, "data")
    train, held, val = datasets(cfg)
    for split, docs in (("train", train), ("eval", held), ("val", val)):
        path = docgen.export_dataset(docs, Path(cfg.out) / split)
        print(f"{split}: {len(docs)} documents -> {path}")


def cmd_train(args):
    cfg = _config_from_args(args, "models")
    _, summary = train_victim(cfg)
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    cfg = _config_from_args(args, "models")
    _, held, _ = datasets(cfg)
    victim = load_victim(cfg)
    score, outs = clean_baseline(victim, held, cfg.tau)
    em = float(np.mean([o.prediction == o.ground_truth for o in outs]))
    res = {"anls_baseline": score, "exact_match": em, "tau": cfg.tau, "pairs": len(outs)}
    (Path(cfg.out) / f"eval_{cfg.style}.json").write_text(json.dumps(res, indent=2))
    print(json.dumps(res, indent=2))


def cmd_attack(args):
    cfg = _config_from_args(args, "attack").resolved()
    _, held, _ = datasets(cfg)
    doc = held[cfg.doc]
    victim = load_victim(cfg)
    B = cfg.b_values[0]
    png = Path(cfg.out) / f"adv_{cfg.doc:03d}_B{B}.png"
    record, _ = attack_document(victim, doc, cfg, B, png)
    (Path(cfg.out) / f"adv_{cfg.doc:03d}_B{B}.json").write_text(json.dumps(record, indent=2))
    print(json.dumps({k: record[k] for k in ("answers", "success", "reload_success", "verdict_diverged")}, indent=2))


def cmd_sweep(args):
    cfg = _config_from_args(args, "sweep")
    report, _ = sweep(cfg)
    print(render_text(report))


def cmd_render_report(args):
    report = metrics.EvalReport.from_json(Path(args.report).read_text())
    stem = Path(args.report).with_suffix("")
    Path(f"{stem}.svg").write_text(render_svg(report))
    text = render_text(report)
    Path(f"{stem}.txt").write_text(text)
    print(text)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="docforge", description="Adversarial forgeries against a toy DocVQA model.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, fn in (
        ("gen", cmd_gen),
        ("train", cmd_train),
        ("attack", cmd_attack),
        ("sweep", cmd_sweep),
        ("eval", cmd_eval),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_ROOT})")
        p.set_defaults(fn=fn)
    p = sub.add_parser("render-report")
    p.add_argument("report", help="report JSON written by sweep")
    p.set_defaults(fn=cmd_render_report)
    args = ap.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
