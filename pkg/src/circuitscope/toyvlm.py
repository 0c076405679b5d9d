"""Deterministic toy vision-language transformer and a synthetic object-existence task.

The model is forward-only and its weights are hand-constructed on top of a seeded
random base:

* two "presence" attention heads (an early one and a later duplicate) compare the
  query object's text identity against the identities of the visual tokens and
  report whether a match exists;
* a "context" attention head measures how many visual tokens share the query
  object's co-occurrence cluster;
* a "prior" MLP turns that co-occurrence signal into logit mass toward ``Yes``,
  scaled by ``prior_bias_strength``;
* a two-stage "readout": one MLP turns each presence head's signal into
  saturating per-head evidence with a dead zone around zero, the next clamps
  the summed evidence and writes it to the answer direction. The clamp makes
  the two presence heads redundant copies of each other.

When the visual tokens are drowned in noise the presence and context heads
fall back to an attention sink on the (never corrupted) BOS token, so a
corrupted image reads as "no evidence either way" rather than as a confident
answer.

With a strong enough prior, adversarial negatives (absent objects from the
dominant cluster of the image) are answered ``Yes``: genuine prior-driven
hallucinations.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BOS, IMG, YES, NO = 0, 1, 2, 3
FIRST_OBJECT = 4

_RMS_EPS = 1e-6


class ConfigError(ValueError):
    """Invalid model, task or pipeline configuration."""


class AddressingError(KeyError):
    """A hook or plan references a component or head the model does not have."""


class Kind(enum.IntEnum):
    ATTN = 0
    MLP = 1


class Answer(enum.IntEnum):
    NO = 0
    YES = 1


class Outcome(str, enum.Enum):
    CORRECT = "correct"
    HALLUCINATING = "hallucinating"
    MISS = "miss"


class Split(str, enum.Enum):
    DISCOVERY = "discovery"
    CPA = "cpa"
    LENS = "lens"
    SELECTION = "selection"
    EVALUATION = "evaluation"
    PROBE = "probe"
    CALIBRATION = "calibration"


_SPLIT_CODE = {s: i for i, s in enumerate(Split)}
SPLIT_ID_STRIDE = 10_000_000


@dataclass(frozen=True, order=True)
class ComponentId:
    layer: int
    kind: Kind

    def __str__(self) -> str:
        return f"L{self.layer}.{'attn' if self.kind == Kind.ATTN else 'mlp'}"

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        layer, _, kind = text.partition(".")
        if not layer.startswith("L") or kind not in ("attn", "mlp"):
            raise ValueError(f"bad component id {text!r}")
        return cls(int(layer[1:]), Kind.ATTN if kind == "attn" else Kind.MLP)


def all_components(depth: int) -> list[ComponentId]:
    return [ComponentId(layer, kind) for layer in range(depth) for kind in Kind]


@dataclass(frozen=True)
class ToyModelConfig:
    depth: int = 8
    width: int = 64
    heads: int = 4
    vocab_size: int = 64
    visual_token_count: int = 16
    prior_bias_strength: float = 0.8
    seed: int = 0
    n_clusters: int = 4
    # None places one prior MLP at roughly 30% depth.
    prior_layers: tuple[int, ...] | None = None
    model_id: str = ""

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.heads < 2:
            raise ConfigError("heads must be >= 2")
        if self.width % self.heads:
            raise ConfigError("width must be a multiple of heads")
        if self.visual_token_count < 1:
            raise ConfigError("visual_token_count must be >= 1")
        if not 0.0 <= self.prior_bias_strength <= 1.0:
            raise ConfigError("prior_bias_strength must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.n_clusters < 2:
            raise ConfigError("n_clusters must be >= 2")
        n_obj = self.vocab_size - FIRST_OBJECT
        per_cluster = n_obj // self.n_clusters if n_obj > 0 else 0
        if per_cluster < 2 or n_obj - per_cluster < self.visual_token_count:
            raise ConfigError("vocab_size too small for the object/cluster layout")
        if self.width // self.heads < self.n_clusters + 1:
            raise ConfigError("head dimension too small for the cluster code")
        if self.width < _layout_size(self) + 1:
            raise ConfigError(f"width must be at least {_layout_size(self) + 1}")
        if self.prior_layers is not None:
            if not self.prior_layers:
                raise ConfigError("prior_layers must be non-empty when given")
            for layer in self.prior_layers:
                if not 0 <= layer < self.depth:
                    raise ConfigError(f"prior layer {layer} outside [0, {self.depth})")

    @property
    def n_objects(self) -> int:
        return self.vocab_size - FIRST_OBJECT

    @property
    def seq_len(self) -> int:
        # BOS, image register, visual objects, query
        return self.visual_token_count + 3

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def label(self) -> str:
        return self.model_id or f"toy-d{self.depth}-s{self.seed}"


def object_cluster(cfg: ToyModelConfig, token: int) -> int:
    per = cfg.n_objects // cfg.n_clusters
    return min((token - FIRST_OBJECT) // per, cfg.n_clusters - 1)


def _id_dim(cfg: ToyModelConfig) -> int:
    return min(cfg.head_dim - 1, 15)


def _layout_size(cfg: ToyModelConfig) -> int:
    # const, 4 markers, 2 id blocks, 2 cluster blocks, pres_a, pres_b, cooc, evid, ans
    return 1 + 4 + 2 * _id_dim(cfg) + 2 * cfg.n_clusters + 5


@dataclass(frozen=True)
class Layout:
    presence_a: int
    context: int
    presence_b: int
    prior: tuple[int, ...]
    readout: int
    clamp: int

    @property
    def context_head(self) -> int:
        return 1 if self.context == self.presence_a else 0


def default_layout(cfg: ToyModelConfig) -> Layout:
    d = cfg.depth
    context = 1 if d >= 3 else 0
    presence_b = min(2, d - 1)
    if cfg.prior_layers is not None:
        prior = tuple(sorted(set(cfg.prior_layers)))
    else:
        prior = (min(max(int(round(0.3 * (d - 1))), context), d - 1),)
    lo = max(presence_b, max(prior))
    readout = min(max(int(round(0.7 * (d - 1))), lo), d - 2)
    if readout < lo:
        # too shallow for separate stages; ramps and clamp share the last block
        readout = d - 1
    clamp = min(readout + 1, d - 1)
    return Layout(presence_a=0, context=context, presence_b=presence_b, prior=prior,
                  readout=readout, clamp=clamp)


# Construction constants. Magnitudes are in residual-stream units; scores in logits.
_C = dict(
    vis_id=4.0, vis_cluster=2.0, vis_marker=5.0, vis_const=3.0,
    img_marker=6.0, img_const=3.0,
    bos_marker=4.0, bos_const=7.0,
    q_id=2.5, q_cluster=1.5, q_marker=1.5, q_const=7.5,
    match_score=16.0, presence_img_sink=12.0, presence_bos_sink=8.0,
    context_gain=2.0, context_base=5.0, context_bos_sink=9.1,
    unembed_gain=8.0, evidence_logit=5.0, prior_logit=16.0, prior_threshold=0.42, prior_width=0.06, answer_bias=0.0,
    readout_threshold=0.5, readout_width=0.3,
    base_answer_leak=1.0, base_embed=0.05, base_qk=0.08, base_vo=0.02, base_mlp_in=0.12, base_mlp_out=0.012,
)


@dataclass
class LayerWeights:
    ln1: np.ndarray
    wq: np.ndarray  # (W, H*dh)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (H*dh, W)
    ln2: np.ndarray
    w_in: np.ndarray  # (W, F)
    b_in: np.ndarray
    w_out: np.ndarray  # (F, W)
    b_out: np.ndarray


@dataclass
class ToyModel:
    cfg: ToyModelConfig
    layout: Layout
    text_embed: np.ndarray
    visual_embed: np.ndarray
    pos_embed: np.ndarray
    layers: list[LayerWeights]
    ln_f: np.ndarray
    unembed: np.ndarray  # (vocab, W)
    basis: dict[str, np.ndarray] = field(repr=False)

    @property
    def depth(self) -> int:
        return self.cfg.depth

    @property
    def components(self) -> list[ComponentId]:
        return all_components(self.cfg.depth)

    @property
    def model_id(self) -> str:
        return self.cfg.label()

    def check_component(self, c: ComponentId) -> None:
        if not (0 <= c.layer < self.cfg.depth) or c.kind not in (Kind.ATTN, Kind.MLP):
            raise AddressingError(f"{c} is not a component of a depth-{self.cfg.depth} model")

    def check_head(self, layer: int, head: int) -> None:
        if not (0 <= layer < self.cfg.depth and 0 <= head < self.cfg.heads):
            raise AddressingError(f"head ({layer}, {head}) outside the model")

    def answer_direction(self) -> np.ndarray:
        return self.basis["ans"][:, 0].copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _arrays(self) -> Iterable[np.ndarray]:
        yield self.text_embed
        yield self.visual_embed
        yield self.pos_embed
        for lw in self.layers:
            yield from (lw.ln1, lw.wq, lw.wk, lw.wv, lw.wo, lw.ln2, lw.w_in, lw.b_in, lw.w_out, lw.b_out)
        yield self.ln_f
        yield self.unembed


def _spread_codes(rng: np.random.Generator, n: int, dim: int, iters: int = 400) -> np.ndarray:
    codes = rng.normal(size=(n, dim))
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    for _ in range(iters):
        gram = codes @ codes.T
        np.fill_diagonal(gram, 0.0)
        codes -= 0.05 * (gram**3) @ codes
        codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    return codes


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def build_model(cfg: ToyModelConfig) -> ToyModel:
    """Build the toy model; identical configs give bit-identical weights."""
    cfg.validate()
    W, H, dh, V = cfg.width, cfg.heads, cfg.head_dim, cfg.vocab_size
    F = 4 * W
    nc, idd = cfg.n_clusters, _id_dim(cfg)
    lay = default_layout(cfg)
    rng = _rng(cfg.seed, 0xB0D1)

    rot, _ = np.linalg.qr(rng.normal(size=(W, W)))
    names = [("const", 1), ("m_bos", 1), ("m_img", 1), ("m_vis", 1), ("m_q", 1),
             ("vid", idd), ("tid", idd), ("vcl", nc), ("tcl", nc),
             ("pres_a", 1), ("pres_b", 1), ("cooc", 1), ("evid", 1), ("ans", 1)]
    basis: dict[str, np.ndarray] = {}
    col = 0
    for name, n in names:
        basis[name] = rot[:, col:col + n]
        col += n
    basis["free"] = rot[:, col:]
    b = {k: (v[:, 0] if v.shape[1] == 1 else v) for k, v in basis.items()}

    codes = _spread_codes(rng, cfg.n_objects, idd)
    onehot = np.eye(nc)

    text = np.zeros((V, W))
    vis = np.zeros((V, W))
    text[BOS] = _C["bos_marker"] * b["m_bos"] + _C["bos_const"] * b["const"]
    vis[IMG] = _C["img_marker"] * b["m_img"] + _C["img_const"] * b["const"]
    for tok in range(FIRST_OBJECT, V):
        code = codes[tok - FIRST_OBJECT]
        cl = onehot[object_cluster(cfg, tok)]
        vis[tok] = (_C["vis_id"] * b["vid"] @ code + _C["vis_cluster"] * b["vcl"] @ cl
                    + _C["vis_marker"] * b["m_vis"] + _C["vis_const"] * b["const"])
        text[tok] = (_C["q_id"] * b["tid"] @ code + _C["q_cluster"] * b["tcl"] @ cl
                     + _C["q_marker"] * b["m_q"] + _C["q_const"] * b["const"])
    # random base writes are confined to the free subspace so the structured
    # circuit reads only what the structured weights put there
    free = basis["free"] @ basis["free"].T
    ans = basis["ans"] @ basis["ans"].T
    leak = free + _C["base_answer_leak"] * ans
    text += _C["base_embed"] * rng.normal(size=text.shape) @ free * (np.abs(text).sum(1, keepdims=True) > 0)
    vis += _C["base_embed"] * rng.normal(size=vis.shape) @ free * (np.abs(vis).sum(1, keepdims=True) > 0)
    pos = 0.5 * _C["base_embed"] * rng.normal(size=(cfg.seq_len, W)) @ free

    # rms-normalised scale of each prototype vector
    def nscale(*parts: float) -> float:
        return np.sqrt(W) / np.sqrt(sum(p * p for p in parts))

    s_vis = nscale(_C["vis_id"], _C["vis_cluster"], _C["vis_marker"], _C["vis_const"])
    s_img = nscale(_C["img_marker"], _C["img_const"])
    s_bos = nscale(_C["bos_marker"], _C["bos_const"])
    s_q = nscale(_C["q_id"], _C["q_cluster"], _C["q_marker"], _C["q_const"])
    s_fin = s_q  # residual at the query position stays dominated by the constant

    sqrt_dh = np.sqrt(dh)
    layers: list[LayerWeights] = []
    for li in range(cfg.depth):
        wq = _C["base_qk"] * rng.normal(size=(W, H * dh)) / np.sqrt(W)
        wk = _C["base_qk"] * rng.normal(size=(W, H * dh)) / np.sqrt(W)
        wv = _C["base_vo"] * rng.normal(size=(W, H * dh))
        wo = _C["base_vo"] * rng.normal(size=(H * dh, W)) @ leak
        w_in = _C["base_mlp_in"] * rng.normal(size=(W, F)) / 8.0
        b_in = 0.1 * rng.normal(size=F)
        w_out = _C["base_mlp_out"] * rng.normal(size=(F, W)) @ leak
        b_out = np.zeros(W)
        # structured units are written over the first few hidden slots
        unit = 0

        def clear_head(h: int) -> slice:
            sl = slice(h * dh, (h + 1) * dh)
            for w in (wq, wk, wv):
                w[:, sl] = 0.0
            wo[sl, :] = 0.0
            return sl

        def presence_head(h: int, out_dir: np.ndarray) -> None:
            # match -> object value +1; no match -> image register value -1;
            # unreadable image -> BOS value 0
            sl = clear_head(h)
            beta = _C["match_score"] * sqrt_dh
            wq[:, sl][:, :idd] = b["tid"] * (beta / (_C["q_id"] * s_q))
            wq[:, sl][:, idd] = b["const"] * (sqrt_dh / (_C["q_const"] * s_q))
            wk[:, sl][:, :idd] = b["vid"] / (_C["vis_id"] * s_vis)
            wk[:, sl][:, idd] = (b["m_img"] * (_C["presence_img_sink"] / (_C["img_marker"] * s_img))
                                 + b["m_bos"] * (_C["presence_bos_sink"] / (_C["bos_marker"] * s_bos)))
            wv[:, sl][:, 0] = b["m_vis"] / (_C["vis_marker"] * s_vis) - b["m_img"] / (_C["img_marker"] * s_img)
            wo[sl, :][0] = out_dir

        def context_head(h: int) -> None:
            # same-cluster objects outscore other objects; BOS soaks up the rest
            sl = clear_head(h)
            kappa = _C["context_gain"] * sqrt_dh
            wq[:, sl][:, :nc] = b["tcl"] * (2.0 * kappa / (_C["q_cluster"] * s_q)) - np.outer(
                b["const"], np.ones(nc)) * (kappa / (_C["q_const"] * s_q))
            wq[:, sl][:, nc] = b["const"] * (sqrt_dh / (_C["q_const"] * s_q))
            wk[:, sl][:, :nc] = b["vcl"] / (_C["vis_cluster"] * s_vis)
            wk[:, sl][:, nc] = (b["m_vis"] * (_C["context_base"] / (_C["vis_marker"] * s_vis))
                                + b["m_bos"] * (_C["context_bos_sink"] / (_C["bos_marker"] * s_bos)))
            wv[:, sl][:, 0] = b["m_vis"] / (_C["vis_marker"] * s_vis)
            wo[sl, :][0] = b["cooc"]

        if li == lay.presence_a:
            presence_head(0, b["pres_a"])
        if li == lay.context:
            context_head(lay.context_head)
        if li == lay.presence_b and lay.presence_b != lay.presence_a:
            presence_head(0, b["pres_b"])

        if li in lay.prior:
            # saturating ramp from prior_threshold over prior_width
            gain = cfg.prior_bias_strength * _C["prior_logit"] / len(lay.prior)
            wdt = _C["prior_width"]
            w_in[:, unit] = b["cooc"] / s_fin
            b_in[unit] = -_C["prior_threshold"]
            w_in[:, unit + 1] = b["cooc"] / s_fin
            b_in[unit + 1] = -_C["prior_threshold"] - wdt
            w_out[unit] = b["ans"] * (gain / (wdt * _C["unembed_gain"]))
            w_out[unit + 1] = -b["ans"] * (gain / (wdt * _C["unembed_gain"]))
            unit += 2
        if li == lay.readout and lay.clamp == lay.readout:
            # shallow model: one dead-zone ramp on the summed presence signal
            t, wdt = _C["readout_threshold"], _C["readout_width"]
            both = b["pres_a"] + b["pres_b"] if lay.presence_b != lay.presence_a else b["pres_a"]
            scale = _C["evidence_logit"] / (wdt * _C["unembed_gain"])
            for sign in (1.0, -1.0):
                w_in[:, unit] = sign * both / s_fin
                b_in[unit] = -t
                w_in[:, unit + 1] = sign * both / s_fin
                b_in[unit + 1] = -t - wdt
                w_out[unit] = sign * b["ans"] * scale
                w_out[unit + 1] = -sign * b["ans"] * scale
                unit += 2
        elif li == lay.readout:
            # per-head dead-zone ramps: |z| below t reads as no evidence,
            # saturating at +-1 per head once |z| >= t + w
            t, wdt = _C["readout_threshold"], _C["readout_width"]
            heads_dirs = [b["pres_a"], b["pres_b"]] if lay.presence_b != lay.presence_a else [b["pres_a"]]
            for d in heads_dirs:
                for sign in (1.0, -1.0):
                    w_in[:, unit] = sign * d / s_fin
                    b_in[unit] = -t
                    w_in[:, unit + 1] = sign * d / s_fin
                    b_in[unit + 1] = -t - wdt
                    w_out[unit] = sign * b["evid"] / wdt
                    w_out[unit + 1] = -sign * b["evid"] / wdt
                    unit += 2
        if li == lay.clamp and lay.clamp != lay.readout:
            # evidence clamped to [-1, 1]: one saturated head is as good as two
            w_in[:, unit] = b["evid"] / s_fin
            b_in[unit] = 1.0
            w_in[:, unit + 1] = b["evid"] / s_fin
            b_in[unit + 1] = -1.0
            scale = _C["evidence_logit"] / _C["unembed_gain"]
            w_out[unit] = b["ans"] * scale
            w_out[unit + 1] = -b["ans"] * scale
            b_out = b_out - b["ans"] * scale
            unit += 2

        layers.append(LayerWeights(
            ln1=np.ones(W), wq=wq, wk=wk, wv=wv, wo=wo, ln2=np.ones(W),
            w_in=w_in, b_in=b_in, w_out=w_out, b_out=b_out))

    unembed = 0.1 * rng.normal(size=(V, W))
    g = _C["unembed_gain"] / (2.0 * s_fin)
    bias = _C["answer_bias"] / (2.0 * _C["q_const"] * s_fin)
    unembed[YES] = g * b["ans"] - bias * b["const"]
    unembed[NO] = -g * b["ans"] + bias * b["const"]

    model = ToyModel(cfg=cfg, layout=lay, text_embed=text, visual_embed=vis, pos_embed=pos,
                     layers=layers, ln_f=np.ones(W), unembed=unembed, basis=basis)
    _center_answer_bias(model)
    for arr in model._arrays():
        arr.setflags(write=False)
    return model


def _center_answer_bias(model: ToyModel, n: int = 128, rounds: int = 3) -> None:
    """Shift the yes/no unembedding so image-free (noised) inputs sit at zero margin.

    The random base adds a model-specific constant to the answer logits; without
    this step a corrupted image would read as a confident Yes or No.
    """
    cfg = model.cfg
    samples = generate_task(cfg, cfg.seed, n, Split.CALIBRATION)
    x0 = embed(model, samples)
    rng = _rng(cfg.seed, 0xCA1B)
    vs = visual_slice(model)
    for i in range(n):
        block = x0[i, vs]
        x0[i, vs] = block + rng.normal(size=block.shape) * 3.0 * block.std()
    const = model.basis["const"][:, 0]
    for _ in range(rounds):
        run = run_batch(model, x0)
        margin = float(np.median(run.logits[:, 0] - run.logits[:, 1]))
        hf = rms_norm(run.final_hidden, model.ln_f)
        per_unit = float(np.mean(hf @ const))
        model.unembed[YES] -= 0.5 * margin / per_unit * const
        model.unembed[NO] += 0.5 * margin / per_unit * const


# ---------------------------------------------------------------------------
# Task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSample:
    sample_id: int
    visual_tokens: tuple[int, ...]
    query_object: int
    ground_truth: Answer
    co_occurrence_score: float

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "visual_tokens": list(self.visual_tokens),
            "query_object": self.query_object,
            "ground_truth": self.ground_truth.name.lower(),
            "co_occurrence_score": self.co_occurrence_score,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskSample":
        return cls(
            sample_id=int(rec["sample_id"]),
            visual_tokens=tuple(int(t) for t in rec["visual_tokens"]),
            query_object=int(rec["query_object"]),
            ground_truth=Answer[rec["ground_truth"].upper()],
            co_occurrence_score=float(rec["co_occurrence_score"]),
        )


def co_occurrence(cfg: ToyModelConfig, visual: Sequence[int], query: int) -> float:
    """Fraction of the other image objects that share the query's cluster."""
    k = object_cluster(cfg, query)
    return sum(1 for t in visual if t != query and object_cluster(cfg, t) == k) / len(visual)


def generate_task(
    cfg: ToyModelConfig,
    seed: int,
    n: int,
    split: Split | str,
    adversarial_percentile: float = 75.0,
) -> list[TaskSample]:
    """Draw ``n`` balanced object-existence samples for one split.

    Negatives are adversarial: the query is an absent object whose
    co-occurrence score is at or above ``adversarial_percentile`` of all
    absent candidates for that image.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    split = Split(split)
    code = _SPLIT_CODE[split]
    Vt = cfg.visual_token_count
    objects = np.arange(FIRST_OBJECT, cfg.vocab_size)
    clusters = np.array([object_cluster(cfg, t) for t in objects])
    labels = np.array([Answer.YES] * ((n + 1) // 2) + [Answer.NO] * (n // 2))
    _rng(seed, code, 0x5EED).shuffle(labels)

    out = []
    for i in range(n):
        r = _rng(seed, code, i)
        dominant = int(r.integers(cfg.n_clusters))
        in_cluster = objects[clusters == dominant]
        out_cluster = objects[clusters != dominant]
        cap = min(len(in_cluster) - 1, Vt)
        n_in = int(min(cap, 1 + r.binomial(cap - 1, 0.4)))
        n_in = max(n_in, Vt - len(out_cluster), 1)
        picked = np.concatenate([
            r.choice(in_cluster, size=n_in, replace=False),
            r.choice(out_cluster, size=Vt - n_in, replace=False),
        ])
        r.shuffle(picked)
        visual = tuple(int(t) for t in picked)
        if labels[i] == Answer.YES:
            query = int(r.choice(picked))
        else:
            absent = [int(t) for t in objects if int(t) not in visual]
            scores = np.array([co_occurrence(cfg, visual, t) for t in absent])
            cut = np.percentile(scores, adversarial_percentile)
            pool = [t for t, s in zip(absent, scores) if s >= cut]
            query = int(r.choice(pool))
        out.append(TaskSample(
            sample_id=code * SPLIT_ID_STRIDE + i,
            visual_tokens=visual,
            query_object=query,
            ground_truth=Answer(int(labels[i])),
            co_occurrence_score=co_occurrence(cfg, visual, query),
        ))
    return out


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class Hooks:
    """Interventions applied during a forward pass.

    ``patch`` replaces a component's output at the final position (a ``(W,)``
    vector) or at every position (an ``(S, W)`` array). ``edit`` maps a
    component's full ``(S, W)`` output to a new one. ``head_edit`` maps the
    ``(S, head_dim)`` pre-output-projection activation of one head.
    """

    visual_embeddings: np.ndarray | None = None
    patch: dict[ComponentId, np.ndarray] = field(default_factory=dict)
    edit: dict[ComponentId, Callable[[np.ndarray], np.ndarray]] = field(default_factory=dict)
    head_edit: dict[tuple[int, int], Callable[[np.ndarray], np.ndarray]] = field(default_factory=dict)

    def validate(self, model: ToyModel) -> None:
        for c in list(self.patch) + list(self.edit):
            model.check_component(c)
        for layer, head in self.head_edit:
            model.check_head(layer, head)
        if self.visual_embeddings is not None:
            shape = (model.cfg.visual_token_count + 1, model.cfg.width)
            if self.visual_embeddings.shape != shape:
                raise AddressingError(f"visual embeddings must have shape {shape}")


@dataclass
class ForwardRecord:
    logits: np.ndarray  # [yes, no]
    delta: float
    answer: Answer
    outcome: Outcome
    hidden_states: np.ndarray  # (depth + 1, S, W)
    component_outputs: dict[ComponentId, np.ndarray]
    head_activations: np.ndarray  # (depth, heads, head_dim) at the final position


def outcome_of(answer: Answer, truth: Answer) -> Outcome:
    if answer == truth:
        return Outcome.CORRECT
    return Outcome.HALLUCINATING if truth == Answer.NO else Outcome.MISS


def answer_delta(logits: np.ndarray, truth: Answer) -> float:
    """Logit of the correct answer minus the incorrect one; ``logits`` is [yes, no]."""
    yes, no = float(logits[0]), float(logits[1])
    return yes - no if truth == Answer.YES else no - yes


def embed(model: ToyModel, samples: Sequence[TaskSample]) -> np.ndarray:
    """Layer-0 residual stream, shape (B, S, W)."""
    cfg = model.cfg
    toks = np.array([[IMG, *s.visual_tokens] for s in samples], dtype=np.int64)
    for s in samples:
        bad = [t for t in (*s.visual_tokens, s.query_object) if not FIRST_OBJECT <= t < cfg.vocab_size]
        if bad:
            raise AddressingError(f"sample {s.sample_id}: tokens {bad} outside the object vocabulary")
    x = np.empty((len(samples), cfg.seq_len, cfg.width))
    x[:, 0] = model.text_embed[BOS]
    x[:, 1:-1] = model.visual_embed[toks]
    x[:, -1] = model.text_embed[[s.query_object for s in samples]]
    return x + model.pos_embed


def visual_slice(model: ToyModel) -> slice:
    return slice(1, model.cfg.visual_token_count + 2)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS) * gain


# site hook: (component, output (B, S, W)) -> output
SiteHook = Callable[[ComponentId, np.ndarray], np.ndarray]
# head hook: (layer, z (B, H, S, dh)) -> z
HeadHook = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class BatchRun:
    final_hidden: np.ndarray  # (B, W) after the last block
    logits: np.ndarray  # (B, 2) as [yes, no]
    resid: np.ndarray | None  # (B, depth + 1, S, W)
    comp_final: np.ndarray | None  # (B, depth, 2, W) component outputs at the final position
    heads_final: np.ndarray | None  # (B, depth, H, dh)


def run_batch(
    model: ToyModel,
    x0: np.ndarray,
    site_hook: SiteHook | None = None,
    head_hook: HeadHook | None = None,
    record: bool = False,
    start_layer: int = 0,
) -> BatchRun:
    """Batched forward pass from a residual of shape (B, S, W).

    ``x0`` is the residual stream entering block ``start_layer`` (the embedding
    output when 0). Every operation acts per batch element, so a sample's
    result depends on the rest of the batch only through rounding in the
    matrix products; identical batches give identical bits.
    """
    if record and start_layer:
        raise ValueError("recording requires a pass from layer 0")
    cfg = model.cfg
    B, S, W = x0.shape
    H, dh = cfg.heads, cfg.head_dim
    mask = np.triu(np.full((S, S), -np.inf), k=1)
    x = x0.copy()
    resid = np.empty((B, cfg.depth + 1, S, W)) if record else None
    comp = np.empty((B, cfg.depth, 2, W)) if record else None
    heads = np.empty((B, cfg.depth, H, dh)) if record else None
    inv = 1.0 / np.sqrt(dh)
    for li in range(start_layer, cfg.depth):
        lw = model.layers[li]
        if record:
            resid[:, li] = x
        h = rms_norm(x, lw.ln1)
        q = (h @ lw.wq).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = (h @ lw.wk).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        v = (h @ lw.wv).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) * inv + mask
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        z = w @ v  # (B, H, S, dh)
        if head_hook is not None:
            z = head_hook(li, z)
        if record:
            heads[:, li] = z[:, :, -1]
        attn = z.transpose(0, 2, 1, 3).reshape(B, S, H * dh) @ lw.wo
        cid = ComponentId(li, Kind.ATTN)
        if site_hook is not None:
            attn = site_hook(cid, attn)
        if record:
            comp[:, li, 0] = attn[:, -1]
        x = x + attn
        h2 = rms_norm(x, lw.ln2)
        mlp = np.maximum(h2 @ lw.w_in + lw.b_in, 0.0) @ lw.w_out + lw.b_out
        cid = ComponentId(li, Kind.MLP)
        if site_hook is not None:
            mlp = site_hook(cid, mlp)
        if record:
            comp[:, li, 1] = mlp[:, -1]
        x = x + mlp
    if record:
        resid[:, cfg.depth] = x
    fin = x[:, -1]
    hf = rms_norm(fin, model.ln_f)
    logits = hf @ model.unembed[[YES, NO]].T
    return BatchRun(final_hidden=fin, logits=logits, resid=resid, comp_final=comp, heads_final=heads)


def hooks_to_callbacks(model: ToyModel, hooks: Hooks) -> tuple[SiteHook | None, HeadHook | None]:
    site = None
    head = None
    if hooks.patch or hooks.edit:
        def site(cid: ComponentId, out: np.ndarray) -> np.ndarray:
            if cid in hooks.edit:
                out = np.stack([hooks.edit[cid](o) for o in out])
            if cid in hooks.patch:
                rep = hooks.patch[cid]
                out = out.copy()
                if rep.ndim == 1:
                    out[:, -1] = rep
                else:
                    out[:] = rep
            return out
    if hooks.head_edit:
        def head(layer: int, z: np.ndarray) -> np.ndarray:
            todo = [(h, f) for (l, h), f in hooks.head_edit.items() if l == layer]
            if not todo:
                return z
            z = z.copy()
            for h, f in todo:
                for bi in range(z.shape[0]):
                    z[bi, h] = f(z[bi, h])
            return z
    return site, head


def forward(model: ToyModel, sample: TaskSample, hooks: Hooks | None = None) -> ForwardRecord:
    """Greedy single-sample forward pass with optional hooks."""
    x0 = embed(model, [sample])
    site = head = None
    if hooks is not None:
        hooks.validate(model)
        if hooks.visual_embeddings is not None:
            x0[0, visual_slice(model)] = hooks.visual_embeddings
        site, head = hooks_to_callbacks(model, hooks)
    return forward_from(model, sample, x0, site, head)


def forward_from(model: ToyModel, sample: TaskSample, x0: np.ndarray,
                 site_hook: SiteHook | None = None, head_hook: HeadHook | None = None) -> ForwardRecord:
    """Single-sample recorded pass from a prepared (1, S, W) embedding and batch callbacks."""
    run = run_batch(model, x0, site_hook, head_hook, record=True)
    logits = run.logits[0]
    ans = Answer.YES if logits[0] > logits[1] else Answer.NO
    comps = {c: run.comp_final[0, c.layer, int(c.kind)].copy() for c in model.components}
    return ForwardRecord(
        logits=logits.copy(),
        delta=answer_delta(logits, sample.ground_truth),
        answer=ans,
        outcome=outcome_of(ans, sample.ground_truth),
        hidden_states=run.resid[0],
        component_outputs=comps,
        head_activations=run.heads_final[0],
    )


def answers(logits: np.ndarray) -> np.ndarray:
    """Greedy answers for a (B, 2) [yes, no] logit array; ties go to No."""
    return np.where(logits[:, 0] > logits[:, 1], int(Answer.YES), int(Answer.NO))


def batch_deltas(logits: np.ndarray, samples: Sequence[TaskSample]) -> np.ndarray:
    sign = np.array([1.0 if s.ground_truth == Answer.YES else -1.0 for s in samples])
    return sign * (logits[:, 0] - logits[:, 1])


def evaluate_outcomes(model: ToyModel, samples: Sequence[TaskSample], chunk: int = 256) -> list[Outcome]:
    out: list[Outcome] = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        run = run_batch(model, embed(model, part))
        for s, a in zip(part, answers(run.logits)):
            out.append(outcome_of(Answer(int(a)), s.ground_truth))
    return out


def hallucination_rate(model: ToyModel, samples: Sequence[TaskSample]) -> float:
    """False-positive rate over No-ground-truth samples."""
    neg = [s for s in samples if s.ground_truth == Answer.NO]
    if not neg:
        return 0.0
    outs = evaluate_outcomes(model, neg)
    return sum(o == Outcome.HALLUCINATING for o in outs) / len(neg)


def model_family(base: ToyModelConfig, depths: Sequence[int] = (6, 8, 10)) -> list[ToyModelConfig]:
    """Configs of different depth and distinct seeds for cross-architecture analysis."""
    from dataclasses import replace

    return [replace(base, depth=d, seed=base.seed + 1000 * (i + 1) if d != base.depth else base.seed,
                    model_id=f"toy-d{d}") for i, d in enumerate(depths)]
