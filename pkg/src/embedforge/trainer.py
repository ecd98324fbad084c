"""Two-stage training driver, optimizer, and checkpoint serialization.

Stage 1 runs the in-batch contrastive objective over (query, positive)
pairs; stage 2 adds mined hard negatives and optional teacher distillation.
The encoder is linear, so gradients flow to the token table and projection
in closed form; no autodiff is involved. Runs are bit-deterministic for a
fixed (seed, config, data) triple.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import objectives
from .datamix import PairBatch
from .embedder import (
    PASSAGE,
    QUERY,
    ROLE_QUERY,
    SYMMETRIC,
    EmbeddingModel,
    ForwardPass,
    InputRole,
    TokenizerConfig,
    forward_batch,
    widened,
)
from .errors import BadMagic, ShapeMismatch, StageOrder, TruncatedFile, UnsupportedVersion

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"

CHECKPOINT_MAGIC = b"ME5F"
CHECKPOINT_VERSION = 1

# Nominal recipe constants; desk-scale runs override them via config.
PRETRAIN_LR = {"small": 3e-4, "base": 2e-4, "large": 1e-4}
FINETUNE_LR = {"small": 3e-5, "base": 2e-5, "large": 1e-5}
PRETRAIN_BATCH = 32768
PRETRAIN_STEPS = 30000
FINETUNE_BATCH = 512
FINETUNE_EPOCHS = 2
DEFAULT_TAU = 0.01
DEFAULT_ALPHA = 1.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training stage."""

    stage: str
    size_class: str = "small"
    batch_size: int = 64
    steps: int | None = None
    epochs: int | None = None
    lr: float = 3e-4
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    kd_tau_teacher: float = 1.0
    kd_tau_student: float = 1.0
    # Symmetric tasks (e.g. parallel sentences) prefix both sides as queries.
    symmetric: bool = False

    def __post_init__(self):
        if self.stage not in (STAGE_PRETRAIN, STAGE_FINETUNE):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.stage == STAGE_PRETRAIN and (self.steps is None or self.epochs is not None):
            raise ValueError("pretrain config sets steps, not epochs")
        if self.stage == STAGE_FINETUNE and (self.epochs is None or self.steps is not None):
            raise ValueError("finetune config sets epochs, not steps")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


def default_config(stage: str, size_class: str) -> TrainConfig:
    """Nominal recipe hyperparameters for a stage and model size."""
    if size_class not in PRETRAIN_LR:
        raise ValueError(f"unknown size_class {size_class!r}")
    if stage == STAGE_PRETRAIN:
        return TrainConfig(
            stage=stage,
            size_class=size_class,
            batch_size=PRETRAIN_BATCH,
            steps=PRETRAIN_STEPS,
            lr=PRETRAIN_LR[size_class],
        )
    if stage == STAGE_FINETUNE:
        return TrainConfig(
            stage=stage,
            size_class=size_class,
            batch_size=FINETUNE_BATCH,
            epochs=FINETUNE_EPOCHS,
            lr=FINETUNE_LR[size_class],
        )
    raise ValueError(f"stage must be pretrain or finetune, got {stage!r}")


@dataclass
class AdamState:
    """First/second moment estimates plus the update counter.

    Moments live in float64 in memory; checkpoints narrow them to float32.
    """

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: Mapping[str, np.ndarray]) -> AdamState:
    zeros = lambda a: np.zeros(a.shape, dtype=np.float64)
    return AdamState(0, {k: zeros(p) for k, p in params.items()}, {k: zeros(p) for k, p in params.items()})


def apply_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam step (beta1=0.9, beta2=0.999, eps=1e-8, no weight decay).

    Pure: inputs are untouched, fresh arrays come back. Update arithmetic
    runs in float64; parameters narrow back to float32.
    """
    if set(params) != set(grads):
        raise ShapeMismatch(f"param/grad name mismatch: {sorted(params)} vs {sorted(grads)}")
    t = state.step + 1
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    # lr * (m / bias1) / (sqrt(v / bias2) + eps) with the scalars folded out.
    scale = lr * np.sqrt(bias2) / bias1
    shifted_eps = ADAM_EPS * np.sqrt(bias2)
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = np.multiply(state.m[name], ADAM_BETA1)
        m += (1.0 - ADAM_BETA1) * g
        v = np.multiply(state.v[name], ADAM_BETA2)
        v += (1.0 - ADAM_BETA2) * np.square(g)
        denom = np.sqrt(v)
        denom += shifted_eps
        step = np.multiply(m, scale)
        step /= denom
        new_params[name] = (p.astype(np.float64) - step).astype(np.float32)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


@dataclass(frozen=True)
class TeacherOracle:
    """Deterministic (query, passage) -> score interface standing in for a cross-encoder."""

    fn: Callable[[str, str], float]
    name: str = "custom"

    def score(self, query: str, passage: str) -> float:
        return float(self.fn(query, passage))


def exact_match_teacher(gold, hit: float = 1.0, miss: float = -1.0) -> TeacherOracle:
    """Oracle scoring `hit` for gold (query, passage) pairs and `miss` otherwise.

    gold is a query -> positive mapping or an iterable of (query, positive).
    """
    if isinstance(gold, Mapping):
        truths = frozenset(gold.items())
    else:
        truths = frozenset((q, p) for q, p in gold)
    return TeacherOracle(
        fn=lambda q, p: hit if (q, p) in truths else miss,
        name="exact-match-oracle",
    )


@dataclass
class Checkpoint:
    """Model parameters plus everything needed to resume or reproduce."""

    config: TrainConfig
    model_meta: dict
    params: dict[str, np.ndarray]
    opt: AdamState
    step: int
    stage: str
    version: int = CHECKPOINT_VERSION

    def to_model(self) -> EmbeddingModel:
        tok = TokenizerConfig(
            n_gram_sizes=tuple(self.model_meta["n_gram_sizes"]),
            vocab_size=int(self.model_meta["vocab_size"]),
            hash_seed=int(self.model_meta["hash_seed"]),
        )
        return EmbeddingModel(
            tokenizer=tok,
            token_table=self.params["token_table"].copy(),
            projection=self.params["projection"].copy(),
            size_class=self.model_meta["size_class"],
        )


def model_meta(model: EmbeddingModel) -> dict:
    return {
        "size_class": model.size_class,
        "vocab_size": model.tokenizer.vocab_size,
        "n_gram_sizes": list(model.tokenizer.n_gram_sizes),
        "hash_seed": model.tokenizer.hash_seed,
    }


def _backprop(
    tape: ForwardPass,
    d_emb: np.ndarray,
    proj64: np.ndarray,
    grad_table: np.ndarray,
    grad_proj: np.ndarray,
) -> None:
    """Push embedding gradients through normalize/project/pool into the tables.

    All reductions run in a fixed order so results are bit-stable.
    """
    e = tape.embeddings
    dz = (d_emb - np.einsum("ij,ij->i", d_emb, e)[:, None] * e) / tape.norms[:, None]
    grad_proj += tape.pooled.T @ dz
    du = dz @ proj64.T
    grad_table += tape.pooling.T @ du


def _one_step(
    model: EmbeddingModel,
    batch: PairBatch,
    cfg: TrainConfig,
    teacher: TeacherOracle | None,
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Gradients for one batch plus scalar telemetry, parameters untouched."""
    n = len(batch)
    queries = [p.query for p in batch.pairs]
    positives = [p.positive for p in batch.pairs]
    depth = batch.negative_depth
    query_roles = [
        InputRole(ROLE_QUERY, p.instruction) if p.instruction else QUERY for p in batch.pairs
    ]
    doc_role = SYMMETRIC if cfg.symmetric else PASSAGE
    tape_q = forward_batch(model, query_roles, queries)
    tape_p = forward_batch(model, doc_role, positives)
    eq, ep = tape_q.embeddings, tape_p.embeddings
    qp = eq @ ep.T

    if cfg.stage == STAGE_PRETRAIN or (depth == 0 and teacher is None):
        out = objectives.info_nce(qp, cfg.tau)
        d_eq = out.grad_scores @ ep
        d_ep = out.grad_scores.T @ eq
        tape_h = d_eh = None
        telemetry = {"loss": out.loss, "ce": out.loss, "kd": 0.0}
    else:
        hard_texts = [neg for p in batch.pairs for neg in p.negatives]
        tape_h = forward_batch(model, doc_role, hard_texts) if hard_texts else None
        eh = tape_h.embeddings.reshape(n, depth, -1) if tape_h is not None else None
        scores = np.empty((n, 1 + depth + n - 1))
        scores[:, 0] = np.diag(qp)
        if depth:
            scores[:, 1 : 1 + depth] = np.einsum("id,imd->im", eq, eh)
        off_diag = ~np.eye(n, dtype=bool)
        scores[:, 1 + depth :] = qp[off_diag].reshape(n, n - 1)
        t_scores = None
        if teacher is not None:
            t_scores = np.empty((n, 1 + depth))
            for i, pair in enumerate(batch.pairs):
                t_scores[i, 0] = teacher.score(pair.query, pair.positive)
                for m, neg in enumerate(pair.negatives):
                    t_scores[i, 1 + m] = teacher.score(pair.query, neg)
        out = objectives.finetune_loss(
            scores, t_scores, cfg.tau, cfg.alpha, cfg.kd_tau_teacher, cfg.kd_tau_student
        )
        g = out.grad_scores
        # Scatter the flat gradient back onto the (query x positive) grid.
        w = np.zeros((n, n))
        w[np.arange(n), np.arange(n)] = g[:, 0]
        w[off_diag] = g[:, 1 + depth :].ravel()
        d_eq = w @ ep
        if depth:
            d_eq += np.einsum("im,imd->id", g[:, 1 : 1 + depth], eh)
            d_eh = (g[:, 1 : 1 + depth, None] * eq[:, None, :]).reshape(n * depth, -1)
        else:
            d_eh = None
        d_ep = w.T @ eq
        ce = out.loss
        kd = 0.0
        if t_scores is not None and t_scores.shape[1] >= 2 and cfg.alpha > 0:
            kd = objectives.kd_divergence(
                t_scores, scores[:, : t_scores.shape[1]], cfg.kd_tau_teacher, cfg.kd_tau_student
            ).loss
            ce = out.loss - cfg.alpha * kd
        telemetry = {"loss": out.loss, "ce": ce, "kd": kd}

    proj64 = widened(model)[1]
    grads = {
        "token_table": np.zeros(model.token_table.shape),
        "projection": np.zeros(model.projection.shape),
    }
    _backprop(tape_q, d_eq, proj64, grads["token_table"], grads["projection"])
    _backprop(tape_p, d_ep, proj64, grads["token_table"], grads["projection"])
    if tape_h is not None and d_eh is not None:
        _backprop(tape_h, d_eh, proj64, grads["token_table"], grads["projection"])
    return grads, telemetry


def _set_params(model: EmbeddingModel, params: Mapping[str, np.ndarray]) -> None:
    model.token_table = params["token_table"]
    model.projection = params["projection"]


def pretrain(
    model: EmbeddingModel,
    batches: Sequence[PairBatch],
    cfg: TrainConfig,
    sink: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Contrastive pre-training for cfg.steps steps, cycling over batches."""
    if cfg.stage != STAGE_PRETRAIN:
        raise StageOrder(f"pretrain called with stage={cfg.stage!r}")
    if cfg.steps > 0 and not batches:
        raise ValueError("pretrain needs at least one batch")
    state = init_adam_state(model.params())
    for step in range(cfg.steps):
        batch = batches[step % len(batches)]
        grads, telemetry = _one_step(model, batch, cfg, teacher=None)
        if sink is not None:
            sink({"step": step, **telemetry})
        new_params, state = apply_update(model.params(), grads, cfg.lr, state)
        _set_params(model, new_params)
    return Checkpoint(
        config=cfg,
        model_meta=model_meta(model),
        params={k: v.copy() for k, v in model.params().items()},
        opt=state,
        step=cfg.steps,
        stage=STAGE_PRETRAIN,
    )


def finetune(
    source: EmbeddingModel | Checkpoint,
    batches: Sequence[PairBatch],
    cfg: TrainConfig,
    teacher: TeacherOracle | None = None,
    sink: Callable[[dict], None] | None = None,
    allow_refinetune: bool = False,
) -> Checkpoint:
    """Fine-tuning over cfg.epochs passes with hard negatives and optional KD.

    Refuses a checkpoint that already completed fine-tuning unless
    allow_refinetune is set.
    """
    if cfg.stage != STAGE_FINETUNE:
        raise StageOrder(f"finetune called with stage={cfg.stage!r}")
    if isinstance(source, Checkpoint):
        if source.stage == STAGE_FINETUNE and not allow_refinetune:
            raise StageOrder(
                "checkpoint already completed fine-tuning; pass allow_refinetune to override"
            )
        model = source.to_model()
    else:
        model = source
    if cfg.epochs > 0 and not batches:
        raise ValueError("finetune needs at least one batch")
    state = init_adam_state(model.params())
    step = 0
    for _epoch in range(cfg.epochs):
        for batch in batches:
            grads, telemetry = _one_step(model, batch, cfg, teacher)
            if sink is not None:
                sink({"step": step, **telemetry})
            new_params, state = apply_update(model.params(), grads, cfg.lr, state)
            _set_params(model, new_params)
            step += 1
    return Checkpoint(
        config=cfg,
        model_meta=model_meta(model),
        params={k: v.copy() for k, v in model.params().items()},
        opt=state,
        step=step,
        stage=STAGE_FINETUNE,
    )


# --- checkpoint file format --------------------------------------------------
#
# magic "ME5F" | u32 LE version | u64 LE header length | UTF-8 JSON header |
# raw little-endian payloads in header-declared order: parameters as
# float32, then optimizer moments as float64 (so in-memory state
# round-trips bitwise).


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    param_names = sorted(ckpt.params)
    opt_names = [f"{which}.{name}" for which in ("m", "v") for name in sorted(ckpt.opt.m)]
    header = {
        "format_version": ckpt.version,
        "config": asdict(ckpt.config),
        "model": ckpt.model_meta,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "opt_step": ckpt.opt.step,
        "params": [[n, list(ckpt.params[n].shape)] for n in param_names],
        "opt": [[n, list(ckpt.params[n.split(".", 1)[1]].shape)] for n in opt_names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in param_names:
            fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
        for name in opt_names:
            which, base = name.split(".", 1)
            fh.write(np.ascontiguousarray(getattr(ckpt.opt, which)[base], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    if len(blob) < 16:
        raise TruncatedFile(f"{path}: header fields truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version} not supported")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + header_len:
        raise TruncatedFile(f"{path}: JSON header truncated")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedFile(f"{path}: unreadable header: {exc}") from exc
    offset = 16 + header_len

    def take(shape: list[int], dtype: str) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(blob):
            raise TruncatedFile(f"{path}: payload ends before declared tensors")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
        return arr

    params = {name: take(shape, "<f4") for name, shape in header["params"]}
    opt_arrays = {name: take(shape, "<f8") for name, shape in header["opt"]}
    opt = AdamState(
        step=int(header["opt_step"]),
        m={n.split(".", 1)[1]: a for n, a in opt_arrays.items() if n.startswith("m.")},
        v={n.split(".", 1)[1]: a for n, a in opt_arrays.items() if n.startswith("v.")},
    )
    cfg_dict = dict(header["config"])
    return Checkpoint(
        config=TrainConfig(**cfg_dict),
        model_meta=header["model"],
        params=params,
        opt=opt,
        step=int(header["step"]),
        stage=header["stage"],
        version=version,
    )
