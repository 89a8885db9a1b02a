"""Toy OCR-free DocVQA model: patch encoder plus character-level decoder.

The encoder turns a preprocessed (3, H, W) canvas into one feature vector per
P x P patch: a per-patch embedding, a 3x3 neighbourhood mixer and learned
row/column position vectors.  In the prompted mode the question tokens are
embedded and placed ahead of the image tokens.  The decoder is a small
pre-norm transformer (causal self-attention, cross-attention over the
encoder output, MLP) that emits one character per step.

Everything is expressed on :mod:`docforge.autodiff` tapes so the same code
serves training (gradients w.r.t. weights) and attacks (gradients w.r.t.
pixels).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import docgen
from . import preprocess as pp

PAD, BOS, EOS, QDELIM = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<q>")

HEADERED = "headered"
PROMPTED = "prompted"

NEG_INF = -1e9


class Vocabulary:
    """Specials at indices 0..3, then the sorted character set."""

    def __init__(self, chars):
        self.chars = "".join(sorted(set(chars)))
        self.tokens = list(SPECIALS) + list(self.chars)
        self.index = {c: i + len(SPECIALS) for i, c in enumerate(self.chars)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text, eos=True):
        try:
            ids = [self.index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} is not in the vocabulary") from None
        return ids + [EOS] if eos else ids

    def question_tokens(self, question):
        """Prompt tokens: question characters followed by the delimiter."""
        return self.encode(question, eos=False) + [QDELIM]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= len(SPECIALS):
                out.append(self.tokens[i])
        return "".join(out)


def default_chars():
    return "".join(sorted(set(docgen.ANSWER_ALPHABET) | set("".join(docgen.QUESTIONS))))


@dataclass(frozen=True)
class ModelConfig:
    mode: str = HEADERED
    patch: int = 8
    d: int = 64
    d_patch: int = 48
    heads: int = 4
    dec_layers: int = 2
    mlp: int = 128
    t_max: int = 24
    q_max: int = 32
    canvas: tuple = (384, 256)
    chars: str = field(default_factory=default_chars)

    def __post_init__(self):
        if self.mode not in (HEADERED, PROMPTED):
            raise ValueError(f"unknown question mode {self.mode!r}")
        if self.d <= 0 or self.d_patch <= 0 or self.heads <= 0:
            raise ValueError("dimensions must be positive")
        if self.d % self.heads:
            raise ValueError("d must be divisible by the number of heads")
        if self.canvas[0] % self.patch or self.canvas[1] % self.patch:
            raise ValueError(f"patch {self.patch} does not divide canvas {self.canvas}")
        object.__setattr__(self, "canvas", tuple(self.canvas))

    @property
    def vocab(self):
        return Vocabulary(self.chars)

    @property
    def grid(self):
        return self.canvas[0] // self.patch, self.canvas[1] // self.patch

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    def preprocess_spec(self):
        if self.mode == HEADERED:
            return pp.headered_spec(target=self.canvas, patch=self.patch)
        return pp.padded_spec(target=self.canvas, patch=self.patch)


def param_shapes(cfg: ModelConfig):
    """Ordered name -> shape; this order is the serialization order."""
    P, d, dp, V = cfg.patch, cfg.d, cfg.d_patch, len(cfg.vocab)
    gh, gw = cfg.grid
    s = {
        "enc.patch.w": (3 * P * P, dp),
        "enc.patch.b": (dp,),
        "enc.mix.w": (9 * dp, d),
        "enc.mix.b": (d,),
        "enc.row": (gh, d),
        "enc.col": (gw, d),
    }
    if cfg.mode == PROMPTED:
        s["q.tok"] = (V, d)
        s["q.pos"] = (cfg.q_max, d)
    s["dec.tok"] = (V, d)
    s["dec.pos"] = (cfg.t_max, d)
    for layer in range(cfg.dec_layers):
        for block in ("self", "cross"):
            for m in "qkvo":
                s[f"dec.{layer}.{block}.{m}.w"] = (d, d)
                s[f"dec.{layer}.{block}.{m}.b"] = (d,)
        s[f"dec.{layer}.mlp.1.w"] = (d, cfg.mlp)
        s[f"dec.{layer}.mlp.1.b"] = (cfg.mlp,)
        s[f"dec.{layer}.mlp.2.w"] = (cfg.mlp, d)
        s[f"dec.{layer}.mlp.2.b"] = (d,)
    s["out.w"] = (d, V)
    s["out.b"] = (V,)
    return s


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict
    seed: int = 0

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.weights) != list(shapes):
            missing = set(shapes) ^ set(self.weights)
            raise ValueError(f"weights do not match the config: {sorted(missing)[:5]}")
        for k, shp in shapes.items():
            w = np.asarray(self.weights[k], dtype=np.float32)
            if w.shape != shp:
                raise ValueError(f"{k}: expected {shp}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{k} has non-finite entries")
            self.weights[k] = w

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.seed)


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    w = {}
    for name, shp in param_shapes(cfg).items():
        if name.endswith(".b"):
            w[name] = np.zeros(shp, dtype=np.float32)
        elif name in ("enc.row", "enc.col", "q.pos", "dec.pos", "q.tok", "dec.tok"):
            w[name] = (rng.normal(size=shp) * 0.3).astype(np.float32)
        else:
            w[name] = (rng.normal(size=shp) / np.sqrt(shp[0])).astype(np.float32)
    return ModelParams(cfg, w, seed)


# ---------------------------------------------------------------- network


class Net:
    """Parameters bound to one tape.

    ``trainable`` decides whether weights are differentiable leaves
    (training) or constants (attacks, inference).
    """

    def __init__(self, params: ModelParams, tape: ad.Tape, trainable=False):
        self.cfg = params.config
        self.tape = tape
        make = tape.param if trainable else tape.const
        self.w = {k: make(v, name=k) for k, v in params.weights.items()}
        self.cross_attention = []  # per layer, (B, heads, T, N) of the last decode

    def _lin(self, x, name):
        return x @ self.w[name + ".w"] + self.w[name + ".b"]

    # encoder ------------------------------------------------------------

    def encode_image(self, x):
        """(B, 3, H, W) -> (B, N_img, d)."""
        cfg = self.cfg
        P, (gh, gw) = cfg.patch, cfg.grid
        B = x.shape[0]
        if tuple(x.shape[1:]) != (3,) + cfg.canvas:
            raise ValueError(f"expected canvas {(3,) + cfg.canvas}, got {tuple(x.shape[1:])}")
        p = x.reshape(B, 3, gh, P, gw, P).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh, gw, 3 * P * P)
        e = ad.relu(self._lin(p, "enc.patch"))
        ep = ad.pad(e, ((0, 0), (1, 1), (1, 1), (0, 0)))
        nb = ad.concat([ep[:, i : i + gh, j : j + gw] for i in range(3) for j in range(3)], axis=-1)
        h = ad.relu(self._lin(nb, "enc.mix"))
        h = h + ad.reshape(self.w["enc.row"], (gh, 1, cfg.d)) + ad.reshape(self.w["enc.col"], (1, gw, cfg.d))
        return h.reshape(B, gh * gw, cfg.d)

    def encode_question(self, qtok):
        """(B, L) int tokens -> (B, L, d)."""
        qtok = np.asarray(qtok)
        L = qtok.shape[-1]
        if L > self.cfg.q_max:
            raise ValueError(f"question has {L} tokens, at most {self.cfg.q_max} allowed")
        onehot = np.eye(len(self.cfg.vocab), dtype=self.tape.dtype)[qtok]
        return onehot @ self.w["q.tok"] + self.w["q.pos"][:L]

    def encode(self, x, qtok=None):
        if x.ndim == 3:
            x = x.reshape((1,) + tuple(x.shape))
        if (self.cfg.mode == PROMPTED) != (qtok is not None):
            raise ValueError(f"question tokens are required iff the mode is {PROMPTED}")
        H = self.encode_image(x)
        if qtok is None:
            return H
        qtok = np.asarray(qtok)
        if qtok.ndim == 1:
            qtok = np.broadcast_to(qtok, (H.shape[0], qtok.shape[0]))
        return ad.concat([self.encode_question(qtok), H], axis=1)

    # decoder ------------------------------------------------------------

    def cross_kv(self, H):
        """Per-layer cross-attention keys/values, reusable across decode steps."""
        kv = []
        B, N, d = H.shape
        nh = self.cfg.heads
        dh = d // nh
        for layer in range(self.cfg.dec_layers):
            pre = f"dec.{layer}.cross"
            k = self._lin(H, pre + ".k").reshape(B, N, nh, dh).transpose(0, 2, 3, 1)
            v = self._lin(H, pre + ".v").reshape(B, N, nh, dh).transpose(0, 2, 1, 3)
            kv.append((k, v))
        return kv

    def _heads(self, x, nh):
        B, T, d = x.shape
        return x.reshape(B, T, nh, d // nh).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, nh, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, nh * dh)

    def decode(self, kv, tokens):
        """Teacher-forced logits (B, T, V) for input tokens (B, T)."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        B, T = tokens.shape
        if T > cfg.t_max:
            raise ValueError(f"prefix of length {T} exceeds t_max={cfg.t_max}")
        nh, dh = cfg.heads, cfg.d // cfg.heads
        onehot = np.eye(len(cfg.vocab), dtype=self.tape.dtype)[tokens]
        x = onehot @ self.w["dec.tok"] + self.w["dec.pos"][:T]
        causal = np.triu(np.full((T, T), NEG_INF, dtype=self.tape.dtype), 1)
        self.cross_attention = []
        for layer in range(cfg.dec_layers):
            pre = f"dec.{layer}"
            y = ad.layer_norm(x)
            q = self._heads(self._lin(y, pre + ".self.q"), nh)
            k = self._heads(self._lin(y, pre + ".self.k"), nh).transpose(0, 1, 3, 2)
            v = self._heads(self._lin(y, pre + ".self.v"), nh)
            a = ad.softmax(ad.scale(q @ k, 1 / np.sqrt(dh)) + causal)
            x = x + self._lin(self._merge(a @ v), pre + ".self.o")

            y = ad.layer_norm(x)
            q = self._heads(self._lin(y, pre + ".cross.q"), nh)
            ck, cv = kv[layer]
            a = ad.softmax(ad.scale(q @ ck, 1 / np.sqrt(dh)))
            self.cross_attention.append(a)
            x = x + self._lin(self._merge(a @ cv), pre + ".cross.o")

            y = ad.layer_norm(x)
            x = x + self._lin(ad.relu(self._lin(y, pre + ".mlp.1")), pre + ".mlp.2")
        return self._lin(ad.layer_norm(x), "out")


def teacher_inputs(targets):
    """Right-padded (inputs, outputs, mask) arrays for EOS-terminated token lists."""
    T = max(len(t) for t in targets)
    inp = np.full((len(targets), T), PAD, dtype=np.int64)
    out = np.full((len(targets), T), PAD, dtype=np.int64)
    mask = np.zeros((len(targets), T), dtype=bool)
    for i, t in enumerate(targets):
        if not t or t[-1] != EOS:
            raise ValueError("targets must end with EOS")
        inp[i, : len(t)] = [BOS] + list(t[:-1])
        out[i, : len(t)] = t
        mask[i, : len(t)] = True
    return inp, out, mask


def token_nll(logits, out, mask):
    """Per-sequence -sum log p(y_t) under teacher forcing: (B,) node."""
    lp = ad.gather(ad.log_softmax(logits), out)
    return -(lp * mask.astype(lp.tape.dtype)).sum(axis=-1)


def token_margin(logits, out, mask):
    """Per-sequence logit-margin loss: (B,) node."""
    lm = ad.logit_margin(logits, out)
    return (lm * mask.astype(lm.tape.dtype)).sum(axis=-1)


# ------------------------------------------------------------ public API


def _as_node(tape, x):
    return x if isinstance(x, ad.Tensor) else tape.const(np.asarray(x))


def _question_array(params, question_tokens):
    if question_tokens is None:
        return None
    return np.asarray(question_tokens, dtype=np.int64)


def encode(params: ModelParams, preprocessed, question_tokens=None, tape=None):
    """Encoder output H of shape (N, d) (or (B, N, d) for a batch)."""
    tape = tape or (preprocessed.tape if isinstance(preprocessed, ad.Tensor) else ad.Tape(np.float32))
    net = Net(params, tape)
    x = _as_node(tape, preprocessed)
    H = net.encode(x, _question_array(params, question_tokens))
    return H if x.ndim == 4 else H[0]


def decode_step(params: ModelParams, prefix_tokens, H):
    """Logits z_t (|V|,) for the next token after ``prefix_tokens`` (starting with BOS)."""
    prefix = list(prefix_tokens)
    if not prefix or prefix[0] != BOS:
        raise ValueError("prefix must begin with BOS")
    if len(prefix) > params.config.t_max:
        raise ValueError(f"prefix of length {len(prefix)} exceeds t_max={params.config.t_max}")
    tape = H.tape if isinstance(H, ad.Tensor) else ad.Tape(np.float32)
    net = Net(params, tape)
    Hn = _as_node(tape, H)
    if Hn.ndim == 2:
        Hn = Hn.reshape(1, *Hn.shape)
    z = net.decode(net.cross_kv(Hn), np.asarray([prefix]))
    return z[0, -1]


def greedy_decode(params: ModelParams, preprocessed, question_tokens=None):
    """Free-running argmax decode (ties -> lowest index).  Batched input gives a list."""
    x = np.asarray(preprocessed.value if isinstance(preprocessed, ad.Tensor) else preprocessed)
    single = x.ndim == 3
    x = x[None] if single else x
    tape = ad.Tape(np.float32)
    net = Net(params, tape)
    H = net.encode(tape.const(x), _question_array(params, question_tokens))
    kv = net.cross_kv(H)
    B = x.shape[0]
    seq = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(params.config.t_max):
        z = net.decode(kv, seq).value[:, -1]
        nxt = np.argmax(z, axis=-1)
        nxt[done] = PAD
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    tape.release()
    vocab = params.config.vocab
    out = [vocab.decode(s[1:]) for s in seq]
    return out[0] if single else out


def nll_loss(params: ModelParams, preprocessed, question_tokens, target):
    """-sum_t log softmax(z_t)[y_t] with teacher forcing; ``target`` is a string or EOS-ended ids."""
    tgt = params.config.vocab.encode(target) if isinstance(target, str) else list(target)
    tape = preprocessed.tape if isinstance(preprocessed, ad.Tensor) else ad.Tape(np.float32)
    net = Net(params, tape)
    x = _as_node(tape, preprocessed)
    H = net.encode(x, _question_array(params, question_tokens))
    inp, out, mask = teacher_inputs([tgt])
    return token_nll(net.decode(net.cross_kv(H), inp), out, mask)[0]


def logit_margin_loss(params: ModelParams, preprocessed, question_tokens, target):
    tgt = params.config.vocab.encode(target) if isinstance(target, str) else list(target)
    tape = preprocessed.tape if isinstance(preprocessed, ad.Tensor) else ad.Tape(np.float32)
    net = Net(params, tape)
    x = _as_node(tape, preprocessed)
    H = net.encode(x, _question_array(params, question_tokens))
    inp, out, mask = teacher_inputs([tgt])
    return token_margin(net.decode(net.cross_kv(H), inp), out, mask)[0]


# ---------------------------------------------------------- serialization

MAGIC = b"DFVQ"
VERSION = 1


def save_params(params: ModelParams, path):
    """Magic, version, JSON config echo, then float32 little-endian blobs in declaration order."""
    header = json.dumps({"config": asdict(params.config), "seed": params.seed}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for name in param_shapes(params.config):
            f.write(np.ascontiguousarray(params.weights[name], dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    meta = json.loads(data[12 : 12 + n])
    cfg = ModelConfig(**{**meta["config"], "canvas": tuple(meta["config"]["canvas"])})
    buf = io.BytesIO(data[12 + n :])
    weights = {}
    for name, shp in param_shapes(cfg).items():
        count = int(np.prod(shp))
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"truncated parameter file at {name}")
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(shp).astype(np.float32)
    if buf.read(1):
        raise ValueError("trailing bytes in parameter file")
    return ModelParams(cfg, weights, meta.get("seed", 0))


# ---------------------------------------------------------------- training


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, detail=""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 8
    lr: float = 3e-3
    optimizer: str = "adam"  # or "sgd"
    betas: tuple = (0.9, 0.999)
    # weight of the auxiliary loss that points one cross-attention head of the
    # last decoder layer at the character being emitted
    attention_weight: float = 1.0
    prefix_dropout: float = 0.3  # teacher-forced inputs replaced by <q> with this probability
    shift: int = 6  # random page translation in pixels
    eval_every: int = 5
    lr_half_life: float = 200.0  # epochs; 0 keeps the rate fixed
    clip_norm: float = 10.0  # global gradient-norm clip; 0 disables

    def __post_init__(self):
        if self.batch < 1 or self.lr <= 0:
            raise ValueError("batch and lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Example:
    doc: int  # index into the training documents
    question: str
    answer: str
    centres: list  # page-space (x, y) per emitted token: answer chars, then EOS


def examples_from(docs):
    out = []
    for k, doc in enumerate(docs):
        for i, (q, a) in enumerate(doc.qa_pairs):
            centres = docgen.glyph_centres(doc.spec, i) if doc.spec is not None else []
            out.append(Example(k, q, a, centres))
    return out


def canvas_inputs(cfg: ModelConfig, pixels, question):
    """Preprocessed (3, H, W) float32 canvas and its geometry, no tape kept."""
    spec = cfg.preprocess_spec()
    body, geom = pp.fit_body(pixels, spec)
    return pp.compose_canvas(body, question, spec, geom), geom


def token_index(cfg: ModelConfig, geometry, x, y, shift=(0, 0)):
    """Encoder token holding page point (x, y) after a canvas translation ``shift``."""
    r, c = geometry.to_canvas(y, x)
    gh, gw = cfg.grid
    r = min(max(int((r + shift[0]) // cfg.patch), 0), gh - 1)
    c = min(max(int((c + shift[1]) // cfg.patch), 0), gw - 1)
    return r * gw + c


def _batch_arrays(cfg, exs, bodies, rng, tcfg, augment):
    """Canvases (translated by up to ``tcfg.shift`` px when augmenting) and targets."""
    spec = cfg.preprocess_spec()
    vocab = cfg.vocab
    xs, targets, where = [], [], []
    for ex in exs:
        body, geom = bodies[ex.doc]
        shift = (0, 0)
        if augment and tcfg.shift:
            shift = tuple(int(v) for v in rng.integers(-tcfg.shift, tcfg.shift + 1, size=2))
            # page margins are blank, so a cyclic shift is a translation
            body = np.roll(body, shift, axis=(1, 2))
        xs.append(pp.compose_canvas(body, ex.question, spec, geom))
        targets.append(vocab.encode(ex.answer))
        where.append([token_index(cfg, geom, cx, cy, shift) for cx, cy in ex.centres])
    inp, out, mask = teacher_inputs(targets)
    if augment and tcfg.prefix_dropout > 0:
        drop = (rng.random(inp.shape) < tcfg.prefix_dropout) & mask
        drop[:, 0] = False
        inp = np.where(drop, QDELIM, inp)
    att = np.zeros(out.shape, dtype=np.int64)
    att_mask = np.zeros(out.shape, dtype=bool)
    for i, w in enumerate(where):
        n = min(len(w), int(mask[i].sum()))
        att[i, :n] = w[:n]
        att_mask[i, :n] = True
    return np.stack(xs), inp, out, mask, att, att_mask


def batch_loss(params, tape, batch, tcfg, trainable=True, qtok=None):
    """Mean over the batch of token NLL (+ weighted attention loss); returns (loss, net)."""
    x, inp, out, mask, att, att_mask = batch
    net = Net(params, tape, trainable=trainable)
    H = net.encode(tape.const(x), qtok)
    logits = net.decode(net.cross_kv(H), inp)
    loss = token_nll(logits, out, mask).sum()
    if tcfg.attention_weight > 0 and att_mask.any():
        offset = 0 if qtok is None else np.asarray(qtok).shape[-1]
        a0 = net.cross_attention[-1][:, 0]  # (B, T, N)
        hit = ad.gather(a0, att + offset)
        la = ad.log(hit + 1e-6) * att_mask.astype(tape.dtype)
        loss = loss - ad.scale(la.sum(), tcfg.attention_weight)
    return ad.scale(loss, 1.0 / len(inp)), net


class Adam:
    def __init__(self, weights, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            weights[k] = (weights[k] - upd).astype(np.float32)


def _mixed_batches(exs, rng, batch):
    idx = rng.permutation(len(exs))
    return [idx[i : i + batch] for i in range(0, len(idx), batch)]


def _group_by_question(exs, rng, batch):
    """Shuffled mini-batches whose members share a question (prompted batches need equal lengths)."""
    groups = {}
    for i, ex in enumerate(exs):
        groups.setdefault(ex.question, []).append(i)
    batches = []
    for q in sorted(groups):
        idx = rng.permutation(groups[q])
        batches += [idx[i : i + batch] for i in range(0, len(idx), batch)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(cfg: ModelConfig, dataset, epochs, seed=0, tcfg: TrainConfig = None, monitor=None, log=None):
    """Train from scratch on ``dataset`` (documents from docgen); returns ModelParams.

    ``monitor(epoch, params)`` is called every ``tcfg.eval_every`` epochs and
    may return True to stop early.  ``log(epoch, mean_loss)`` receives the
    per-epoch average loss.
    """
    tcfg = tcfg or TrainConfig()
    exs = examples_from(dataset)
    if not exs:
        raise ValueError("dataset is empty")
    longest = max(len(cfg.vocab.encode(ex.answer)) for ex in exs)
    if longest > cfg.t_max:
        raise ValueError(f"answers need {longest} decoding steps, t_max is {cfg.t_max}")
    for ex in exs:
        cfg.vocab.encode(ex.question, eos=False)
    spec = cfg.preprocess_spec()
    bodies = [pp.fit_body(doc.pixels, spec) for doc in dataset]
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(params.weights, tcfg.lr, tcfg.betas) if tcfg.optimizer == "adam" else None
    history = []
    for epoch in range(epochs):
        total = 0.0
        lr = tcfg.lr * 0.5 ** (epoch / tcfg.lr_half_life) if tcfg.lr_half_life > 0 else tcfg.lr
        if opt is not None:
            opt.lr = lr
        # prompted batches share one question so the prompt lengths agree
        batching = _group_by_question if cfg.mode == PROMPTED else _mixed_batches
        for idx in batching(exs, rng, tcfg.batch):
            chunk = [exs[i] for i in idx]
            batch = _batch_arrays(cfg, chunk, bodies, rng, tcfg, augment=True)
            qtok = cfg.vocab.question_tokens(chunk[0].question) if cfg.mode == PROMPTED else None
            tape = ad.Tape(np.float32, check_finite=False)
            try:
                loss, net = batch_loss(params, tape, batch, tcfg, qtok=qtok)
                names = list(net.w)
                g = ad.gradient(tape, loss, [net.w[k] for k in names])
            except ad.NonFiniteError as e:
                raise TrainingDiverged(epoch, str(e)) from None
            grads = {k: g[net.w[k].id] for k in names}
            tape.release()
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingDiverged(epoch, "non-finite gradient")
            if tcfg.clip_norm > 0:
                norm = np.sqrt(sum(float(np.square(v, dtype=np.float64).sum()) for v in grads.values()))
                if norm > tcfg.clip_norm:
                    grads = {k: v * np.float32(tcfg.clip_norm / norm) for k, v in grads.items()}
            if opt is not None:
                opt.step(params.weights, grads)
            else:
                for k, v in grads.items():
                    params.weights[k] = (params.weights[k] - lr * v).astype(np.float32)
            total += float(loss.value) * len(idx)
        mean = total / len(exs)
        if not np.isfinite(mean):
            raise TrainingDiverged(epoch, "loss is not finite")
        history.append(mean)
        if log is not None:
            log(epoch, mean)
        if monitor is not None and (epoch + 1) % tcfg.eval_every == 0 and monitor(epoch, params):
            break
    params.history = history
    return params


# ------------------------------------------------------------- evaluation


def answer_questions(params: ModelParams, pixels, questions):
    """Greedy answers for one uint8 page, through the reference (non-differentiable) pipeline."""
    cfg = params.config
    spec = cfg.preprocess_spec()
    pixels = np.asarray(pixels, dtype=np.uint8)
    if cfg.mode == HEADERED:
        xs = np.stack([pp.reference_preprocess(pixels, q, spec) for q in questions]).astype(np.float32)
        return greedy_decode(params, xs)
    x = pp.reference_preprocess(pixels, "", spec).astype(np.float32)
    vocab = cfg.vocab
    return [greedy_decode(params, x, vocab.question_tokens(q)) for q in questions]


def exact_match(params: ModelParams, docs):
    """Fraction of QA pairs answered exactly, plus the per-pair predictions."""
    preds, hits = [], []
    for doc in docs:
        answers = answer_questions(params, doc.pixels, doc.questions)
        preds.append(answers)
        hits += [p == a for p, a in zip(answers, doc.answers)]
    return float(np.mean(hits)), preds


class Victim:
    """Adapter exposing a trained model to the attack engine."""

    def __init__(self, params: ModelParams, dtype=np.float32):
        self.params = params
        self.dtype = np.dtype(dtype)
        self.spec = params.config.preprocess_spec()

    @property
    def mode(self):
        return self.params.config.mode

    def losses(self, tape, delta, pixels, questions, targets, loss="nll"):
        """One scalar loss node per (question, target), all driven by ``delta``."""
        cfg = self.params.config
        vocab = cfg.vocab
        net = Net(self.params, tape)
        img = pp.map_perturbation(delta, pixels)
        per_seq = token_nll if loss == "nll" else token_margin
        out = []
        if cfg.mode == HEADERED:
            for q, y in zip(questions, targets):
                H = net.encode(pp.preprocess(img, q, self.spec).tensor)
                inp, o, m = teacher_inputs([vocab.encode(y)])
                out.append(per_seq(net.decode(net.cross_kv(H), inp), o, m)[0])
            return out
        x = pp.preprocess(img, "", self.spec).tensor
        Himg = net.encode_image(x.reshape(1, *x.shape))
        for q, y in zip(questions, targets):
            Q = net.encode_question(np.asarray([vocab.question_tokens(q)]))
            H = ad.concat([Q, Himg], axis=1)
            inp, o, m = teacher_inputs([vocab.encode(y)])
            out.append(per_seq(net.decode(net.cross_kv(H), inp), o, m)[0])
        return out

    def answer(self, pixels, questions):
        """Greedy answers through the reference (gather-based) preprocessing."""
        return answer_questions(self.params, pixels, questions)

    def answer_in_memory(self, pixels, questions):
        """Greedy answers through the differentiable preprocessing the attack optimizes."""
        cfg = self.params.config
        tape = ad.Tape(np.float32, check_finite=False)
        img = tape.const(np.asarray(pixels, dtype=np.float64))
        if cfg.mode == HEADERED:
            xs = np.stack([pp.preprocess(img, q, self.spec).tensor.value for q in questions])
            tape.release()
            return greedy_decode(self.params, xs)
        x = pp.preprocess(img, "", self.spec).tensor.value
        tape.release()
        vocab = cfg.vocab
        return [greedy_decode(self.params, x, vocab.question_tokens(q)) for q in questions]
