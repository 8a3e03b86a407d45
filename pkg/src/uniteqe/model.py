"""Trainable unified scorer: pluggable encoder, CLS pooling, tanh feedforward
head, three-format MSE training with hand-written gradients, and a versioned
binary checkpoint format.

Checkpoint byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"UQECKPT\\0"
    offset 8   uint32    format version
    offset 12  uint64    header length H
    offset 20  H bytes   UTF-8 JSON header (sorted keys): config, metadata,
                         step, payload_sha256 and a list of sections
                         {name, dtype, shape, offset, nbytes}
    offset 20+H          payload: the sections' raw bytes, back to back

Section names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``;
every array is stored as ``<f8``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence as Seq

import numpy as np

from .corpus import Dataset, Example, InputFormat, Sequence, Vocabulary, build_input, split_three_way
from .errors import CheckpointError, DataError, NumericalError

CHECKPOINT_MAGIC = b"UQECKPT\0"
CHECKPOINT_VERSION = 1
ENCODER_GROUP = ("embedding", "encoder.")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    buckets: int = 8192
    head_dims: tuple[int, ...] = (128, 64, 1)
    lr_encoder: float = 1e-3
    lr_head: float = 3e-3
    seed: int = 0
    encoder_kind: str = "mean_context"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(x) for x in self.head_dims))
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not self.head_dims or self.head_dims[-1] != 1:
            raise ValueError("the last head layer must have width 1")
        if self.lr_encoder <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if self.encoder_kind not in ENCODERS:
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}; known: {sorted(ENCODERS)}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.buckets)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["head_dims"] = list(self.head_dims)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


# ---------------------------------------------------------------- encoders


class MeanContextEncoder:
    """Embedding lookup plus a mean-conditioned affine map with tanh.

    Row ``t`` of the output is ``tanh(A (e_t + mean(e)) + b)``; the CLS row
    therefore summarizes the whole sequence.
    """

    kind = "mean_context"

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        bound = 1.0 / math.sqrt(cfg.d)
        return {
            "embedding": rng.uniform(-bound, bound, size=(cfg.vocab.size, cfg.d)),
            "encoder.weight": rng.uniform(-bound, bound, size=(cfg.d, cfg.d)),
            "encoder.bias": np.zeros(cfg.d),
        }

    @classmethod
    def inputs(cls, params: dict, ids: np.ndarray, segments: np.ndarray) -> np.ndarray:
        return params["embedding"][ids]

    @classmethod
    def input_grads(cls, params: dict, ids, segments, mask, d_rows: np.ndarray) -> dict[str, np.ndarray]:
        dE = np.zeros_like(params["embedding"])
        np.add.at(dE, ids[mask], d_rows[mask])
        return {"embedding": dE}

    @classmethod
    def encode(cls, params: dict, ids: np.ndarray, segments: np.ndarray) -> np.ndarray:
        x = cls.inputs(params, ids, segments)
        return np.tanh((x + x.mean(axis=0)) @ params["encoder.weight"].T + params["encoder.bias"])

    @classmethod
    def pool(cls, params: dict, ids: np.ndarray, lengths: np.ndarray, segments: np.ndarray):
        """CLS rows for a padded batch ``ids`` of shape (B, T)."""
        mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
        x = cls.inputs(params, ids, segments) * mask[..., None]
        u = x[:, 0] + x.sum(axis=1) / lengths[:, None]
        h = np.tanh(u @ params["encoder.weight"].T + params["encoder.bias"])
        return h, (ids, lengths, segments, mask, u, h)

    @classmethod
    def backward(cls, params: dict, cache, dh: np.ndarray) -> dict[str, np.ndarray]:
        ids, lengths, segments, mask, u, h = cache
        dz = dh * (1.0 - h * h)
        du = dz @ params["encoder.weight"]
        d_rows = np.repeat((du / lengths[:, None])[:, None, :], ids.shape[1], axis=1)
        d_rows[:, 0] += du
        grads = cls.input_grads(params, ids, segments, mask, d_rows)
        grads["encoder.weight"] = dz.T @ u
        grads["encoder.bias"] = dz.sum(axis=0)
        return grads


class SegmentMeanEncoder(MeanContextEncoder):
    """Mean-context encoder whose input rows also carry a learned segment
    embedding (hypothesis / second / third segment), as PLM inputs do."""

    kind = "segment_mean"
    num_segments = 3

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = super().init_params(cfg, rng)
        bound = 1.0 / math.sqrt(cfg.d)
        params["encoder.segment"] = rng.uniform(-bound, bound, size=(cls.num_segments, cfg.d))
        return params

    @classmethod
    def inputs(cls, params, ids, segments):
        return params["embedding"][ids] + params["encoder.segment"][segments]

    @classmethod
    def input_grads(cls, params, ids, segments, mask, d_rows):
        grads = super().input_grads(params, ids, segments, mask, d_rows)
        dG = np.zeros_like(params["encoder.segment"])
        np.add.at(dG, segments[mask], d_rows[mask])
        grads["encoder.segment"] = dG
        return grads


ENCODERS = {cls.kind: cls for cls in (MeanContextEncoder, SegmentMeanEncoder)}


# Learning rates and batch sizes as published for the large backbones; the
# second backbone halves both learning rates.
LARGE_BATCH_PRETRAIN = 1024
LARGE_BATCH_FINETUNE = 32

PRESETS: dict[str, ModelConfig] = {
    "xlmr-large": ModelConfig(d=1024, buckets=250002, head_dims=(3072, 1024, 1), lr_encoder=1.0e-5, lr_head=3.0e-5),
    "infoxlm-large": ModelConfig(d=1024, buckets=250002, head_dims=(3072, 1024, 1), lr_encoder=0.5e-5, lr_head=1.5e-5),
    "desk": ModelConfig(encoder_kind="segment_mean"),
    "desk-b": ModelConfig(d=48, head_dims=(96, 48, 1), lr_encoder=0.5e-3, lr_head=1.5e-3, seed=1,
                          encoder_kind="segment_mean"),
    "desk-mean": ModelConfig(),
    "tiny": ModelConfig(d=8, buckets=64, head_dims=(16, 8, 1)),
}


# ---------------------------------------------------------------- state


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.params.items():
            self.adam_m.setdefault(name, np.zeros_like(arr))
            self.adam_v.setdefault(name, np.zeros_like(arr))

    @property
    def encoder(self):
        return ENCODERS[self.config.encoder_kind]

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    def copy(self) -> "ModelState":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelState(self.config, dup(self.params), dup(self.adam_m), dup(self.adam_v), self.step, dict(self.metadata))

    def head_layers(self) -> int:
        return len(self.config.head_dims)


def init_state(config: ModelConfig, seed: Optional[int] = None) -> ModelState:
    """Weights uniform in +-1/sqrt(d), biases zero."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = ENCODERS[config.encoder_kind].init_params(config, rng)
    bound = 1.0 / math.sqrt(config.d)
    width = config.d
    for k, out in enumerate(config.head_dims):
        params[f"head.{k}.weight"] = rng.uniform(-bound, bound, size=(out, width))
        params[f"head.{k}.bias"] = np.zeros(out)
        width = out
    return ModelState(config, params)


def zero_state(config: ModelConfig) -> ModelState:
    state = init_state(config)
    for arr in state.params.values():
        arr[...] = 0.0
    return state


def is_encoder_param(name: str) -> bool:
    return name.startswith(ENCODER_GROUP)


# ---------------------------------------------------------------- forward / backward


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray       # (B, T) padded token ids
    lengths: np.ndarray   # (B,)
    segments: np.ndarray  # (B, T) segment index per position
    targets: Optional[np.ndarray]
    format: InputFormat
    example_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_sequences(seqs: Seq[Sequence], pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    segments = np.zeros_like(ids)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        segments[i, :len(s)] = s.segment_ids()
    return ids, lengths, segments


def make_batch(examples: Seq[Example], fmt, vocab: Vocabulary, require_scores: bool = True) -> Batch:
    fmt = InputFormat.parse(fmt)
    seqs = []
    for ex in examples:
        try:
            seqs.append(build_input(ex, fmt, vocab))
        except DataError as err:
            raise DataError(f"cannot encode example {ex.id}: {err}") from None
    ids, lengths, segments = pad_sequences(seqs, vocab.pad_id)
    targets = None
    if require_scores:
        unscored = [ex.id for ex in examples if ex.score is None]
        if unscored:
            raise DataError(f"training example {unscored[0]!r} has no score")
        targets = np.array([ex.score for ex in examples], dtype=np.float64)
    return Batch(ids, lengths, segments, targets, fmt, tuple(ex.id for ex in examples))


def _check_ids(state: ModelState, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= state.vocab.size):
        raise DataError(f"token id out of range [0, {state.vocab.size})")


def _head_forward(state: ModelState, h: np.ndarray):
    acts = [h]
    a = h
    n = state.head_layers()
    for k in range(n):
        z = a @ state.params[f"head.{k}.weight"].T + state.params[f"head.{k}.bias"]
        a = np.tanh(z) if k < n - 1 else z
        acts.append(a)
    return a[:, 0], acts


def _head_backward(state: ModelState, acts, dp: np.ndarray):
    grads = {}
    dz = dp[:, None]
    for k in reversed(range(state.head_layers())):
        W = state.params[f"head.{k}.weight"]
        grads[f"head.{k}.weight"] = dz.T @ acts[k]
        grads[f"head.{k}.bias"] = dz.sum(axis=0)
        da = dz @ W
        dz = da * (1.0 - acts[k] ** 2) if k > 0 else da
    return grads, dz


def forward_batch(state: ModelState, batch: Batch) -> np.ndarray:
    _check_ids(state, batch.ids)
    h, _ = state.encoder.pool(state.params, batch.ids, batch.lengths, batch.segments)
    p, _ = _head_forward(state, h)
    return p


def hidden_activations(state: ModelState, batch: Batch) -> list[np.ndarray]:
    """Outputs of the head's tanh layers, for inspection."""
    h, _ = state.encoder.pool(state.params, batch.ids, batch.lengths, batch.segments)
    _, acts = _head_forward(state, h)
    return acts[1:-1]


def encode(state: ModelState, seq: Sequence) -> np.ndarray:
    """Full (length x d) representation of one sequence."""
    ids = np.asarray(seq.ids, dtype=np.int64)
    _check_ids(state, ids)
    return state.encoder.encode(state.params, ids, np.asarray(seq.segment_ids()))


def forward(state: ModelState, seq: Sequence) -> float:
    ids, lengths, segments = pad_sequences([seq], state.vocab.pad_id)
    return float(forward_batch(state, Batch(ids, lengths, segments, None, seq.format))[0])


def loss(p: float, q: float) -> float:
    return (p - q) ** 2


def batch_loss_and_grads(state: ModelState, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error of one single-format batch and its gradient."""
    _check_ids(state, batch.ids)
    h, cache = state.encoder.pool(state.params, batch.ids, batch.lengths, batch.segments)
    p, acts = _head_forward(state, h)
    diff = p - batch.targets
    value = float(np.mean(diff * diff))
    grads, dh = _head_backward(state, acts, 2.0 * diff / diff.size)
    grads.update(state.encoder.backward(state.params, cache, dh))
    return value, grads


class StepLoss(NamedTuple):
    total: float
    ref: Optional[float]
    src: Optional[float]
    src_ref: Optional[float]


def loss_and_grads(state: ModelState, batch_ref: Optional[Batch] = None, batch_src: Optional[Batch] = None,
                   batch_srcref: Optional[Batch] = None) -> tuple[StepLoss, dict[str, np.ndarray]]:
    """Summed multi-format objective and its gradient; absent batches contribute nothing."""
    batches = (batch_ref, batch_src, batch_srcref)
    present = [b for b in batches if b is not None]
    if not present:
        raise ValueError("train step needs at least one batch")
    if len({len(b) for b in present}) > 1:
        raise ValueError("all format batches in one step must have the same size")
    subs: list[Optional[float]] = []
    total_grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    for batch in batches:
        if batch is None:
            subs.append(None)
            continue
        if batch.targets is None:
            raise DataError("training batch has no targets")
        with np.errstate(over="ignore", invalid="ignore"):
            value, grads = batch_loss_and_grads(state, batch)
        subs.append(value)
        for k, g in grads.items():
            total_grads[k] += g
    total = sum(s for s in subs if s is not None)
    return StepLoss(total, *subs), total_grads


def adam_update(state: ModelState, grads: dict[str, np.ndarray], lr_encoder: float, lr_head: float) -> None:
    cfg = state.config
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        lr = lr_encoder if is_encoder_param(name) else lr_head
        state.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def train_step(state: ModelState, batch_ref: Optional[Batch] = None, batch_src: Optional[Batch] = None,
               batch_srcref: Optional[Batch] = None, *, lr_encoder: Optional[float] = None,
               lr_head: Optional[float] = None) -> tuple[ModelState, StepLoss]:
    """One optimizer update on the summed loss of the given format batches.

    Updates ``state`` in place.  A non-finite loss raises before anything is
    modified.
    """
    losses, grads = loss_and_grads(state, batch_ref, batch_src, batch_srcref)
    if not math.isfinite(losses.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError(f"non-finite loss at step {state.step + 1}: {losses.total}")
    adam_update(state, grads,
                state.config.lr_encoder if lr_encoder is None else lr_encoder,
                state.config.lr_head if lr_head is None else lr_head)
    return state, losses


# ---------------------------------------------------------------- epochs


ALL_FORMATS = "all"
FORMAT_ORDER = (InputFormat.SRC, InputFormat.REF, InputFormat.SRC_REF)


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 1
    batch_size: int = 32
    lr_encoder: Optional[float] = None
    lr_head: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_formats(value) -> "str | InputFormat":
    if value is None or (isinstance(value, str) and value.strip().lower() == ALL_FORMATS):
        return ALL_FORMATS
    return InputFormat.parse(value)


def _format_parts(dataset: Dataset, formats, split_seed: int) -> dict[InputFormat, Dataset]:
    formats = parse_formats(formats)
    if formats == ALL_FORMATS:
        return dict(zip(FORMAT_ORDER, split_three_way(dataset, split_seed)))
    return {formats: dataset}


def train_epoch(state: ModelState, dataset: Dataset, formats, hyper: TrainHyper, seed: int,
                split_seed: Optional[int] = None,
                on_step: Optional[Callable[[dict, StepLoss], None]] = None) -> ModelState:
    """One pass over ``dataset``.

    With ``formats="all"`` the data is split three ways (one part per input
    format, split by ``split_seed``) and each step draws one equal-size batch
    from every part; the step count follows the smallest part.  With a single
    format only that format's loss is used.
    """
    if len(dataset) == 0:
        return state
    if any(ex.score is None for ex in dataset):
        missing = next(ex.id for ex in dataset if ex.score is None)
        raise DataError(f"training example {missing!r} has no score")
    parts = _format_parts(dataset, formats, seed if split_seed is None else split_seed)
    rng = np.random.default_rng(seed)
    orders = {fmt: rng.permutation(len(part)) for fmt, part in parts.items()}
    steps_len = min(len(p) for p in parts.values())
    if steps_len == 0:
        return state
    vocab = state.vocab
    for start in range(0, steps_len, hyper.batch_size):
        stop = min(start + hyper.batch_size, steps_len)
        batches = {
            fmt: make_batch([part[i] for i in orders[fmt][start:stop]], fmt, vocab)
            for fmt, part in parts.items()
        }
        _, losses = train_step(
            state,
            batches.get(InputFormat.REF),
            batches.get(InputFormat.SRC),
            batches.get(InputFormat.SRC_REF),
            lr_encoder=hyper.lr_encoder,
            lr_head=hyper.lr_head,
        )
        if on_step is not None:
            on_step(batches, losses)
    return state


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(state: ModelState, dataset: Dataset, formats, hyper: TrainHyper, seed: int, on_step=None) -> ModelState:
    for epoch in range(hyper.epochs):
        train_epoch(state, dataset, formats, hyper, epoch_seed(seed, epoch), split_seed=seed, on_step=on_step)
    return state


# ---------------------------------------------------------------- inference


def predict(state: ModelState, dataset: Dataset, format=InputFormat.SRC) -> np.ndarray:
    fmt = InputFormat.parse(format)
    vocab = state.vocab
    out = np.empty(len(dataset))
    for i, ex in enumerate(dataset):
        try:
            seq = build_input(ex, fmt, vocab)
        except DataError as err:
            raise DataError(f"cannot encode example {ex.id}: {err}") from None
        out[i] = forward(state, seq)
    return out


class CheckpointScorer:
    """Scorer backed by a trained model state."""

    def __init__(self, state: ModelState, name: str = "model"):
        self.state = state
        self.name = name

    def score(self, example: Example, format=InputFormat.SRC) -> float:
        return forward(self.state, build_input(example, format, self.state.vocab))


# ---------------------------------------------------------------- checkpoints


def _sections(state: ModelState):
    for prefix, group in (("param", state.params), ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for name in sorted(group):
            yield f"{prefix}/{name}", np.ascontiguousarray(group[name], dtype="<f8")


def checkpoint_bytes(state: ModelState) -> bytes:
    sections, chunks, offset = [], [], 0
    for name, arr in _sections(state):
        raw = arr.tobytes()
        sections.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "metadata": state.metadata,
        "step": state.step,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(state))
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint {path}: {err.strerror}") from err
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err.strerror}") from err
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(blob[20:20 + head_len].decode("utf-8"))
        payload = blob[20 + head_len:]
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise CheckpointError(f"{path}: payload checksum mismatch")
        config = ModelConfig.from_dict(header["config"])
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for sec in header["sections"]:
            prefix, name = sec["name"].split("/", 1)
            raw = payload[sec["offset"]:sec["offset"] + sec["nbytes"]]
            groups[prefix][name] = np.frombuffer(raw, dtype=sec["dtype"]).reshape(sec["shape"]).astype(np.float64)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint ({err})") from None
    return ModelState(config, groups["param"], groups["adam_m"], groups["adam_v"], int(header["step"]),
                      header.get("metadata", {}))


def same_parameters(a: ModelState, b: ModelState) -> bool:
    return a.params.keys() == b.params.keys() and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def with_metadata(state: ModelState, **meta) -> ModelState:
    state.metadata = {**state.metadata, **meta}
    return state


__all__ = [
    "Batch", "CheckpointScorer", "ModelConfig", "ModelState", "PRESETS", "StepLoss", "TrainHyper",
    "encode", "forward", "init_state", "load_checkpoint", "loss", "loss_and_grads", "make_batch",
    "predict", "save_checkpoint", "train", "train_epoch", "train_step",
]

