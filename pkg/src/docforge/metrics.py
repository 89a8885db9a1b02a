"""Edit-distance similarity and attack evaluation metrics.

Undefined scores (empty subsets, CDMG with every pair optimized) are returned
as ``None`` rather than 0 so they cannot be averaged in by accident.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _norm(s):
    return s.strip().casefold()


def nls(pred: str, truth: str, normalize: bool = True) -> float:
    """Normalized Levenshtein similarity in [0, 1]; two empty strings score 1."""
    if normalize:
        pred, truth = _norm(pred), _norm(truth)
    longest = max(len(pred), len(truth))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, truth) / longest


@dataclass(frozen=True)
class QAOutcome:
    doc_id: str
    pair_index: int
    prediction: str
    ground_truth: str
    target: str | None = None
    optimized: bool = False


SUBSETS = ("all", "optimized", "held_out")
REFERENCES = ("ground_truth", "targets")


def _select(outcomes, subset):
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    if subset == "all":
        return list(outcomes)
    want = subset == "optimized"
    return [o for o in outcomes if o.optimized == want]


def anls(outcomes, reference="ground_truth", subset="all", tau=0.5, normalize=True):
    """Thresholded mean NLS over the selected pairs, or ``None`` if none are selected.

    With ``reference="targets"`` a pair is scored against its target when it
    has one and against the ground truth otherwise.
    """
    if reference not in REFERENCES:
        raise ValueError(f"unknown reference {reference!r}")
    chosen = _select(outcomes, subset)
    if not chosen:
        return None
    total = 0.0
    for o in chosen:
        ref = o.target if reference == "targets" and o.target is not None else o.ground_truth
        s = nls(o.prediction, ref, normalize)
        total += s if s >= tau else 0.0
    return total / len(chosen)


def _by_doc(outcomes):
    docs = defaultdict(list)
    for o in outcomes:
        docs[o.doc_id].append(o)
    return docs


def pair_success(o: QAOutcome, mode: str) -> bool:
    if mode == "targeted":
        return o.prediction == o.target
    if mode == "untargeted":
        return o.prediction != o.ground_truth
    raise ValueError(f"unknown mode {mode!r}")


def asr(outcomes, mode="targeted"):
    """Fraction of documents whose optimized pairs all meet the attack goal.

    Normalized by the number of documents that have at least one optimized pair.
    """
    docs = [
        [o for o in pairs if o.optimized]
        for pairs in _by_doc(outcomes).values()
    ]
    docs = [d for d in docs if d]
    if not docs:
        return None
    wins = sum(all(pair_success(o, mode) for o in d) for d in docs)
    return wins / len(docs)


def cdmg(outcomes):
    """Error rate (vs ground truth) on pairs left out of the optimization."""
    held = [o for o in outcomes if not o.optimized]
    if not held:
        return None
    return sum(o.prediction != o.ground_truth for o in held) / len(held)


@dataclass
class EvalRow:
    B: int
    asr: float | None
    cdmg: float | None
    anls_baseline: float | None
    anls_b: float | None
    anls_c: float | None
    n_docs: int
    failures: int = 0


@dataclass
class EvalReport:
    scenario: dict
    rows: list = field(default_factory=list)

    COLUMNS = ("scenario", "B", "asr", "cdmg", "anls_baseline", "anls_b", "anls_c", "n_docs", "failures")

    def add(self, row: EvalRow):
        for name in ("asr", "cdmg", "anls_baseline", "anls_b", "anls_c"):
            v = getattr(row, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        self.rows.append(row)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        label = self.scenario.get("name", self.scenario.get("kind", ""))
        for r in self.rows:
            d = asdict(r)
            w.writerow([label] + [_cell(d[c]) for c in self.COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None):
        text = json.dumps({"scenario": self.scenario, "rows": [asdict(r) for r in self.rows]}, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(data["scenario"], [EvalRow(**r) for r in data["rows"]])


def _cell(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def evaluate_outcomes(outcomes, mode, B, anls_baseline=None, tau=0.5):
    """One report row from a list of per-pair outcomes at a given B."""
    n_docs = len(_by_doc(outcomes))
    return EvalRow(
        B=B,
        asr=asr(outcomes, mode),
        cdmg=cdmg(outcomes),
        anls_baseline=anls_baseline,
        anls_b=anls(outcomes, "targets", "optimized", tau),
        anls_c=anls(outcomes, "ground_truth", "held_out", tau),
        n_docs=n_docs,
    )
