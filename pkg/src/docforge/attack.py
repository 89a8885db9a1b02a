"""PGD forgery attacks on the toy DocVQA victim.

The perturbation lives in raw 8-bit pixel units.  Each iteration takes a
gradient step on the signed objective, projects onto the feasible set and
re-quantizes so that ``x + delta`` is always a valid 8-bit image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl

TARGETED_SINGLE = "targeted_single"
TARGETED_MULTI = "targeted_multi"
DENIAL_OF_ANSWER = "denial_of_answer"
KINDS = (TARGETED_SINGLE, TARGETED_MULTI, DENIAL_OF_ANSWER)

NLL = "nll"
LOGIT_MARGIN = "logit_margin"

TARGET_POOL = ("No Answer", "Unclear", "Retry", "Try later", "I won't tell you")

# (epsilon, alpha, K) per victim style and perturbation region
DEFAULT_HPARAMS = {
    ("headered", "full"): (8, 2, 20),
    ("headered", "patch"): (96, 24, 25),
    ("prompted", "full"): (32, 2, 100),
    ("prompted", "patch"): (96, 24, 100),
}
DEFAULT_LOSS = {"headered": NLL, "prompted": LOGIT_MARGIN}
PATCH_FRACTION = 0.15


class AttackError(RuntimeError):
    pass


@dataclass
class FeasibleSet:
    epsilon: float
    lb: float | np.ndarray = 0.0
    ub: float | np.ndarray = 255.0
    mask: np.ndarray | None = None  # (H, W) bool, True where delta may be nonzero

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if np.any(np.asarray(self.lb) > np.asarray(self.ub)):
            raise ValueError("lb must not exceed ub")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if not _is_rectangle(self.mask):
                raise ValueError("mask must be a contiguous axis-aligned rectangle")

    def bounds(self, x):
        """Effective per-pixel [lb, ub] on ``x + delta``; pinned to ``x`` outside the mask."""
        lb = np.broadcast_to(np.asarray(self.lb, dtype=np.float64), x.shape)
        ub = np.broadcast_to(np.asarray(self.ub, dtype=np.float64), x.shape)
        if self.mask is not None:
            m = _channel_mask(self.mask, x)
            lb = np.where(m, lb, x)
            ub = np.where(m, ub, x)
        return lb, ub


def _is_rectangle(mask):
    if not mask.any():
        return False
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return bool(box.all()) and box.sum() == mask.sum()


def _channel_mask(mask, x):
    return mask[..., None] if x.ndim == mask.ndim + 1 else mask


def patch_region(shape, fraction=PATCH_FRACTION):
    """Bottom-right square mask with side ``floor(fraction * min(H, W))``."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    H, W = shape[:2]
    side = int(np.floor(fraction * min(H, W)))
    if side < 1:
        raise ValueError("patch side is smaller than one pixel")
    mask = np.zeros((H, W), dtype=bool)
    mask[H - side :, W - side :] = True
    return mask


def project(delta, x, fs: FeasibleSet):
    """Clamp to the l-inf ball, then to the pixel box, then zero outside the mask."""
    x = np.asarray(x, dtype=np.float64)
    d = np.clip(np.asarray(delta, dtype=np.float64), -fs.epsilon, fs.epsilon)
    lb, ub = fs.bounds(x)
    d = np.clip(x + d, lb, ub) - x
    if fs.mask is not None:
        d = np.where(_channel_mask(fs.mask, x), d, 0.0)
    return d


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_step(x, delta):
    """Integer perturbation making ``x + delta`` integer; x must be integer-valued.

    Ties are broken away from the clean pixel, i.e. the perturbation itself
    is rounded half away from zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.array_equal(x, np.round(x)):
        raise ValueError("x must be integer-valued")
    return round_half_away(delta) + 0.0


@dataclass
class AttackScenario:
    kind: str
    gamma: int
    loss: str
    qa_indices: list
    targets: list
    alpha: float
    K: int
    step: str = "sign"  # "sign" (l-inf steepest descent) or "raw"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        want = -1 if self.kind == DENIAL_OF_ANSWER else 1
        if self.gamma != want:
            raise ValueError(f"gamma must be {want:+d} for {self.kind}")
        if self.loss not in (NLL, LOGIT_MARGIN):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.kind == DENIAL_OF_ANSWER and self.loss != NLL:
            raise ValueError("denial of answer is defined for the NLL loss only")
        if len(self.targets) != len(self.qa_indices) or not self.qa_indices:
            raise ValueError("one target per optimized pair is required")
        if self.step not in ("sign", "raw"):
            raise ValueError(f"unknown step rule {self.step!r}")

    @property
    def B(self):
        return len(self.qa_indices)

    @property
    def targeted(self):
        return self.kind != DENIAL_OF_ANSWER


def build_scenario(kind, doc, B, target_pool=TARGET_POOL, loss=NLL, alpha=2.0, K=20, step="sign"):
    M = len(doc.qa_pairs)
    if not 1 <= B <= M:
        raise ValueError(f"B must lie in [1, {M}]")
    if kind == TARGETED_SINGLE and B != 1:
        raise ValueError("single-answer scenarios optimize exactly one pair")
    idx = list(range(B))
    if kind == DENIAL_OF_ANSWER:
        return AttackScenario(kind, -1, NLL, idx, [doc.qa_pairs[j][1] for j in idx], alpha, K, step)
    if B > len(target_pool):
        raise ValueError(f"B={B} exceeds the target pool size {len(target_pool)}")
    return AttackScenario(kind, 1, loss, idx, list(target_pool[:B]), alpha, K, step)


def targeted_kind(B):
    return TARGETED_SINGLE if B == 1 else TARGETED_MULTI


# ------------------------------------------------------------------ objectives


def _objective_terms(victim, doc, scenario, delta):
    """Build a tape; return (tape, delta node, list of per-pair loss nodes)."""
    tape = ad.Tape(victim.dtype)
    d = tape.input(np.asarray(delta, dtype=np.float64), name="delta")
    questions = [doc.qa_pairs[j][0] for j in scenario.qa_indices]
    terms = victim.losses(tape, d, doc.pixels, questions, scenario.targets, scenario.loss)
    return tape, d, terms


def nll_objective(victim, doc, scenario, delta):
    """gamma * sum of per-pair NLL losses at ``delta`` (a float)."""
    s = AttackScenario(**{**asdict(scenario), "loss": NLL})
    _, _, terms = _objective_terms(victim, doc, s, delta)
    return float(scenario.gamma * sum(t.value.item() for t in terms))


def logit_margin_loss(victim, doc, question, target, delta):
    """Teacher-forced logit-margin loss of one (question, target) at ``delta``."""
    tape = ad.Tape(victim.dtype)
    d = tape.input(np.asarray(delta, dtype=np.float64), name="delta")
    (term,) = victim.losses(tape, d, doc.pixels, [question], [target], LOGIT_MARGIN)
    return float(term.value.item())


def objective_and_gradient(victim, doc, scenario, delta):
    tape, d, terms = _objective_terms(victim, doc, scenario, delta)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    obj = ad.scale(total, scenario.gamma)
    g = ad.gradient(tape, obj, [d])[d.id]
    value = float(obj.value.item())
    tape.release()
    return value, g


# ------------------------------------------------------------------------ PGD


@dataclass
class AttackResult:
    delta: np.ndarray
    losses: list
    answers: list
    success: list
    hyperparams: dict = field(default_factory=dict)
    clean_answers: list = field(default_factory=list)

    @property
    def succeeded(self):
        return all(self.success)

    def adversarial(self, x):
        return (np.asarray(x, dtype=np.int16) + self.delta.astype(np.int16)).astype(np.uint8)

    def to_json(self):
        return json.dumps(
            {
                "losses": self.losses,
                "answers": self.answers,
                "clean_answers": self.clean_answers,
                "success": self.success,
                "succeeded": self.succeeded,
                "linf": float(np.abs(self.delta).max()) if self.delta.size else 0.0,
                "hyperparams": self.hyperparams,
            },
            indent=2,
        )


def pair_success(scenario, j, answer, truth):
    if scenario.targeted:
        return answer == scenario.targets[scenario.qa_indices.index(j)]
    return answer != truth


def check_feasible(delta, x, fs):
    """Raise AssertionError naming the first violated constraint."""
    lb, ub = fs.bounds(np.asarray(x, dtype=np.float64))
    adv = x + delta
    if np.abs(delta).max(initial=0) > fs.epsilon:
        raise AssertionError("l-inf budget violated")
    if np.any(adv < lb) or np.any(adv > ub):
        raise AssertionError("box bounds violated")
    if not np.array_equal(delta, np.round(delta)):
        raise AssertionError("perturbation is not integer-valued")
    if fs.mask is not None and np.any(delta[~fs.mask] != 0):
        raise AssertionError("perturbation outside the patch")


def pgd_step(delta, grad, x, fs, alpha, step="sign"):
    direction = np.sign(grad) if step == "sign" else grad
    delta = project(delta - alpha * direction, x, fs)
    return quantize_step(x, delta)


def pgd_attack(victim, doc, scenario: AttackScenario, fs: FeasibleSet, seed=0, check=False):
    """Run ``scenario.K`` PGD iterations from delta = 0 and judge by free-running decode.

    ``seed`` is recorded for provenance; the zero start makes the run deterministic.
    """
    x = doc.pixels.astype(np.float64)
    delta = np.zeros_like(x)
    losses = []
    for k in range(scenario.K):
        obj, g = objective_and_gradient(victim, doc, scenario, delta)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at iteration {k}")
        losses.append(obj)
        delta = pgd_step(delta, g, x, fs, scenario.alpha, scenario.step)
        if check:
            check_feasible(delta, x, fs)
    adv = (x + delta).astype(np.uint8)
    answers = victim.answer(adv, [doc.qa_pairs[j][0] for j in scenario.qa_indices])
    success = [
        pair_success(scenario, j, a, doc.qa_pairs[j][1]) for j, a in zip(scenario.qa_indices, answers)
    ]
    hp = {
        "kind": scenario.kind,
        "gamma": scenario.gamma,
        "loss": scenario.loss,
        "qa_indices": scenario.qa_indices,
        "targets": scenario.targets,
        "alpha": scenario.alpha,
        "K": scenario.K,
        "step": scenario.step,
        "epsilon": fs.epsilon,
        "patch": fs.mask is not None,
        "seed": seed,
    }
    return AttackResult(delta.astype(np.int16), losses, answers, success, hp)
