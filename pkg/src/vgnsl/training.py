"""Alternating optimization and checkpointing.

Each batch runs one interleaved pass: sample a tree per caption; update phi
and the trainable embedding slice with the exact ranking-loss gradient; then
score each sampled merge with the just-updated representations and update
the score net by REINFORCE.  Every tensor update is plain bias-corrected
Adam, implemented here.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import PairedExample, Vocabulary, batches
from .errors import ConfigError, DataError, DegenerateInputError, FormatError
from .parser import ModelParams, ParseResult, compose_vectors, init_params, log_softmax, parse
from .vse import EncodedCaption, GradientSet, VseHyper, match_matrix, vse_backward

VSE_TENSORS = ("embeddings", "phi")
THETA_TENSORS = ("w1", "b1", "w2", "b2")
ALL_TENSORS = ("embeddings", "w1", "b1", "w2", "b2", "phi")

CHECKPOINT_MAGIC = b"VGNC"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_phase1: float = 5e-4
    lr_phase2: float = 5e-5
    phase_switch_epoch: int = 15  # epochs trained at lr_phase1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hyper: VseHyper = field(default_factory=VseHyper)
    head_initial: bool = False
    clip_norm: float = 2.0  # global L2 clip; 0 disables
    reset_moments_on_switch: bool = True
    reward_baseline: bool = False  # moving-average REINFORCE baseline
    baseline_decay: float = 0.9
    embed_dim: int = 512
    hidden_dim: int = 128
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be > 0")

    def learning_rate(self, epoch: int) -> float:
        return self.lr_phase2 if epoch >= self.phase_switch_epoch else self.lr_phase1


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams, names: Sequence[str]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(getattr(params, n)) for n in names},
            v={n: np.zeros_like(getattr(params, n)) for n in names},
        )


def adam_update(
    theta: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step_count: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step; returns (theta, m, v)."""
    if step_count < 1:
        raise DataError("Adam step_count starts at 1")
    if not np.all(np.isfinite(grad)):
        raise DegenerateInputError("non-finite gradient")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step_count)
    v_hat = v / (1.0 - beta2**step_count)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def optimizer_step(
    params: ModelParams,
    grads: GradientSet,
    state: AdamState,
    names: Sequence[str],
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """Apply Adam to the named tensors in place."""
    state.t += 1
    for name in names:
        theta = getattr(params, name)
        new_theta, state.m[name], state.v[name] = adam_update(
            theta,
            getattr(grads, "d_" + name),
            state.m[name],
            state.v[name],
            lr,
            beta1,
            beta2,
            eps,
            state.t,
        )
        theta[...] = new_theta


def mask_frozen_embeddings(d_embeddings: np.ndarray, params: ModelParams) -> None:
    """Zero gradients on the frozen pretrained slice; the unk row stays live."""
    p = params.pretrained_dim
    if p <= 0:
        return
    unk_slice = d_embeddings[params.unk_id, :p].copy()
    d_embeddings[:, :p] = 0
    d_embeddings[params.unk_id, :p] = unk_slice


def clip_gradients(grads: GradientSet, names: Sequence[str], max_norm: float) -> float:
    """Global L2 clip over the named tensors; returns the pre-clip norm."""
    total = 0.0
    for name in names:
        g = getattr(grads, "d_" + name)
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in names:
            getattr(grads, "d_" + name)[...] *= scale
    return norm


def reinforce_update(
    traces: Sequence[Sequence],
    rewards: Sequence[Sequence[float]],
    params: ModelParams,
) -> GradientSet:
    """d(theta) = -sum_t r_t * grad log pi(j*_t), accumulated over the batch.

    Each step's reward credits only its own decision: no discounting and no
    reward-to-go.  Inputs are the constituent stacks recorded at sampling
    time, so the gradient is taken under the distribution that produced the
    trace.
    """
    grads = GradientSet.zeros(params)
    for steps, step_rewards in zip(traces, rewards):
        if len(steps) != len(step_rewards):
            raise DataError("one reward per merge step required")
        for step, r in zip(steps, step_rewards):
            if r == 0.0 or step.scores.size < 2:
                continue
            x = step.inputs
            u = np.concatenate([x[:-1], x[1:]], axis=1)
            pre = u @ params.w1 + params.b1
            hidden = np.maximum(pre, 0)
            probs = np.exp(log_softmax(step.scores.astype(np.float64)))
            coeff = (probs.astype(params.dtype, copy=True))
            coeff[step.index] -= 1.0
            coeff *= r  # d(-r log pi)/d score_j = r * (p_j - 1[j = j*])
            grads.d_w2 += hidden.T @ coeff
            grads.d_b2 += coeff.sum()
            d_pre = (coeff[:, None] * params.w2[None, :]) * (pre > 0)
            grads.d_w1 += u.T @ d_pre
            grads.d_b1 += d_pre.sum(axis=0)
    return grads


def merge_rewards(
    encodings: Sequence[EncodedCaption],
    images: np.ndarray,
    params: ModelParams,
    hyper: VseHyper,
    head_initial: bool,
) -> List[List[float]]:
    """Per-caption, per-step rewards from one batch-wide match matrix.

    Matches the standalone reward/reward_hi operations exactly; computed in
    bulk because every merge of every caption shares the same negatives.
    """
    all_vectors = np.concatenate([e.vectors for e in encodings], axis=0)
    owners = np.concatenate(
        [np.full(len(e.vectors), i, dtype=np.intp) for i, e in enumerate(encodings)]
    )
    s = match_matrix(images.astype(params.dtype, copy=False), all_vectors, params.phi)
    n_images = s.shape[0]
    offsets = np.cumsum([0] + [len(e.vectors) for e in encodings])
    out: List[List[float]] = []
    for i, enc in enumerate(encodings):
        foreign_cols = owners != i
        foreign_rows = np.arange(n_images) != i
        n = len(enc.token_ids)
        rewards_i: List[float] = []
        for t in range(len(enc.children)):
            col = offsets[i] + n + t
            m_own = s[i, col]
            conc = _hinge_total(m_own - s[i, foreign_cols] - hyper.margin_c) + _hinge_total(
                m_own - s[foreign_rows, col] - hyper.margin_c
            )
            if head_initial:
                right_col = offsets[i] + enc.children[t][1]
                m_right = s[i, right_col]
                abst = _hinge_total(
                    s[i, foreign_cols] - m_right + hyper.margin_c
                ) + _hinge_total(s[foreign_rows, right_col] - m_right + hyper.margin_c)
                conc = conc / (hyper.hi_weight * abst + 1.0)
            rewards_i.append(float(conc))
        out.append(rewards_i)
    return out


def _hinge_total(x: np.ndarray) -> float:
    return float(x[x > 0].sum())


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float  # ranking loss per caption, averaged over batches
    mean_reward: float  # raw per-merge reward average
    merges_per_second: float
    lr: float
    n_batches: int


def train_epoch(
    examples: Sequence[PairedExample],
    params: ModelParams,
    config: TrainConfig,
    vse_state: AdamState,
    theta_state: AdamState,
    epoch: int,
    baseline: List[float],
    log_fn: Optional[Callable[[dict], None]] = None,
) -> EpochStats:
    """One pass over the corpus; updates params and optimizer states in place.

    `baseline` is a single-element list holding the moving-average reward;
    it is only consulted when config.reward_baseline is on.
    """
    if len(examples) == 0:
        raise DataError("empty corpus")
    lr = config.learning_rate(epoch)
    index_batches = batches(
        list(range(len(examples))),
        config.batch_size,
        seed=[config.seed, epoch, 0],
        shuffle=True,
        training=True,
    )
    losses: List[float] = []
    reward_sum = 0.0
    reward_count = 0
    merge_count = 0
    started = time.perf_counter()
    for batch_no, idx_batch in enumerate(index_batches):
        batch = [examples[g] for g in idx_batch]
        results: List[ParseResult] = []
        for g, ex in zip(idx_batch, batch):
            rng = np.random.default_rng([config.seed, epoch, 1, int(g)])
            results.append(parse(ex.caption.ids, params, mode="sample", rng=rng))
        images = np.stack([ex.feature for ex in batch]).astype(params.dtype)
        encodings = [
            EncodedCaption(ex.caption.ids, res.children, res.vectors)
            for ex, res in zip(batch, results)
        ]
        loss, grads = vse_backward(encodings, images, params, config.hyper)
        mask_frozen_embeddings(grads.d_embeddings, params)
        if config.clip_norm:
            clip_gradients(grads, VSE_TENSORS, config.clip_norm)
        optimizer_step(
            params, grads, vse_state, VSE_TENSORS, lr, config.beta1, config.beta2, config.eps
        )

        updated = [
            EncodedCaption(e.token_ids, e.children, compose_vectors(e.token_ids, e.children, params))
            for e in encodings
        ]
        rewards = merge_rewards(updated, images, params, config.hyper, config.head_initial)
        flat = [r for rs in rewards for r in rs]
        reward_sum += sum(flat)
        reward_count += len(flat)
        merge_count += len(flat)
        if config.reward_baseline and flat:
            rewards = [[r - baseline[0] for r in rs] for rs in rewards]
            batch_mean = sum(flat) / len(flat)
            baseline[0] = config.baseline_decay * baseline[0] + (1 - config.baseline_decay) * batch_mean
        theta_grads = reinforce_update([res.steps for res in results], rewards, params)
        if config.clip_norm:
            clip_gradients(theta_grads, THETA_TENSORS, config.clip_norm)
        optimizer_step(
            params, theta_grads, theta_state, THETA_TENSORS, lr,
            config.beta1, config.beta2, config.eps,
        )

        per_caption = loss / len(batch)
        losses.append(per_caption)
        if log_fn is not None:
            log_fn(
                {
                    "epoch": epoch + 1,
                    "batch": batch_no,
                    "loss": per_caption,
                    "mean_reward": (sum(flat) / len(flat)) if flat else 0.0,
                    "lr": lr,
                }
            )
    elapsed = max(time.perf_counter() - started, 1e-9)
    return EpochStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)),
        mean_reward=reward_sum / reward_count if reward_count else 0.0,
        merges_per_second=merge_count / elapsed,
        lr=lr,
        n_batches=len(index_batches),
    )


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocabulary
    params: ModelParams
    vse_state: AdamState
    theta_state: AdamState
    epoch: int  # completed epochs
    baseline: float = 0.0


def build_model(
    vocab: Vocabulary,
    config: TrainConfig,
    feature_dim: int,
    word_vectors: Optional[dict] = None,
    dtype=np.float32,
) -> ModelParams:
    rng = np.random.default_rng([config.seed, 2])
    return init_params(
        vocab_size=len(vocab),
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        feature_dim=feature_dim,
        rng=rng,
        dtype=dtype,
        normalize_embeddings=config.normalize_embeddings,
        word_vectors=word_vectors,
        vocab_words=vocab.words,
        unk_id=vocab.unk_id,
    )


def train(
    examples: Sequence[PairedExample],
    vocab: Vocabulary,
    config: TrainConfig,
    checkpoint_fn: Optional[Callable[[int, Checkpoint], None]] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
    word_vectors: Optional[dict] = None,
) -> Tuple[ModelParams, List[EpochStats]]:
    """Full training run; invokes checkpoint_fn after every epoch."""
    if len(examples) == 0:
        raise DataError("empty corpus")
    feature_dim = examples[0].feature.shape[0]
    params = build_model(vocab, config, feature_dim, word_vectors=word_vectors)
    vse_state = AdamState.zeros(params, VSE_TENSORS)
    theta_state = AdamState.zeros(params, THETA_TENSORS)
    baseline = [0.0]
    stats: List[EpochStats] = []
    for epoch in range(config.epochs):
        if epoch == config.phase_switch_epoch and config.reset_moments_on_switch:
            vse_state = AdamState.zeros(params, VSE_TENSORS)
            theta_state = AdamState.zeros(params, THETA_TENSORS)
        stats.append(
            train_epoch(
                examples, params, config, vse_state, theta_state, epoch, baseline, log_fn
            )
        )
        if checkpoint_fn is not None:
            checkpoint_fn(
                epoch,
                Checkpoint(
                    config=config,
                    vocab=vocab,
                    params=params,
                    vse_state=vse_state,
                    theta_state=theta_state,
                    epoch=epoch + 1,
                    baseline=baseline[0],
                ),
            )
    return params, stats


def _tensor_entries(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    entries = [(name, getattr(ckpt.params, name)) for name in ALL_TENSORS]
    for name in VSE_TENSORS:
        entries.append((f"vse.m.{name}", ckpt.vse_state.m[name]))
        entries.append((f"vse.v.{name}", ckpt.vse_state.v[name]))
    for name in THETA_TENSORS:
        entries.append((f"theta.m.{name}", ckpt.theta_state.m[name]))
        entries.append((f"theta.v.{name}", ckpt.theta_state.v[name]))
    return entries


def _dtype_tag(dtype) -> str:
    for tag, dt in _DTYPE_TAGS.items():
        if np.dtype(dtype) == dt:
            return tag
    raise FormatError(f"unsupported tensor dtype {dtype}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the VGNC format.

    Layout: magic "VGNC", u32 version, u64 header length, a UTF-8 JSON
    header naming every tensor {name, shape, dtype}, then the raw
    little-endian tensor payloads concatenated in header order.
    """
    entries = _tensor_entries(ckpt)
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "baseline": ckpt.baseline,
        "model": {
            "unk_id": ckpt.params.unk_id,
            "pretrained_dim": ckpt.params.pretrained_dim,
            "normalize_embeddings": ckpt.params.normalize_embeddings,
        },
        "opt": {"vse_t": ckpt.vse_state.t, "theta_t": ckpt.theta_state.t},
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr.dtype)}
            for name, arr in entries
        ],
        "vocab": {"words": ckpt.vocab.words, "unk_id": ckpt.vocab.unk_id},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a VGNC checkpoint")
        head = f.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        (version,) = struct.unpack("<I", head[:4])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", head[4:])
        blob = f.read(header_len)
        if len(blob) != header_len:
            raise FormatError(f"{path}: truncated JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}")
        tensors: Dict[str, np.ndarray] = {}
        for desc in header["tensors"]:
            dtype = _DTYPE_TAGS.get(desc["dtype"])
            if dtype is None:
                raise FormatError(f"{path}: unknown tensor dtype {desc['dtype']!r}")
            count = int(np.prod(desc["shape"])) if desc["shape"] else 1
            payload = f.read(dtype.itemsize * count)
            if len(payload) != dtype.itemsize * count:
                raise FormatError(f"{path}: truncated payload for {desc['name']}")
            tensors[desc["name"]] = np.frombuffer(payload, dtype=dtype).reshape(desc["shape"]).copy()
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payloads")

    cfg_dict = dict(header["config"])
    cfg_dict["hyper"] = VseHyper(**cfg_dict["hyper"])
    try:
        config = TrainConfig(**cfg_dict)
    except TypeError as exc:
        raise FormatError(f"{path}: config snapshot mismatch: {exc}")
    words = header["vocab"]["words"]
    vocab = Vocabulary(words, {w: i for i, w in enumerate(words)}, header["vocab"]["unk_id"])
    model_meta = header["model"]
    params = ModelParams(
        embeddings=tensors["embeddings"],
        w1=tensors["w1"],
        b1=tensors["b1"],
        w2=tensors["w2"],
        b2=tensors["b2"],
        phi=tensors["phi"],
        unk_id=model_meta["unk_id"],
        pretrained_dim=model_meta["pretrained_dim"],
        normalize_embeddings=model_meta["normalize_embeddings"],
    )
    vse_state = AdamState(
        m={n: tensors[f"vse.m.{n}"] for n in VSE_TENSORS},
        v={n: tensors[f"vse.v.{n}"] for n in VSE_TENSORS},
        t=header["opt"]["vse_t"],
    )
    theta_state = AdamState(
        m={n: tensors[f"theta.m.{n}"] for n in THETA_TENSORS},
        v={n: tensors[f"theta.v.{n}"] for n in THETA_TENSORS},
        t=header["opt"]["theta_t"],
    )
    return Checkpoint(
        config=config,
        vocab=vocab,
        params=params,
        vse_state=vse_state,
        theta_state=theta_state,
        epoch=header["epoch"],
        baseline=header["baseline"],
    )
