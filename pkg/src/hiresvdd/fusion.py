"""Fusing a selected pool of experts: logit averaging, embedding concatenation, self-attention."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import (
    Linear,
    MeanPoolSeq,
    MultiHeadSelfAttention,
    ParamStore,
    ReLU,
    Sequential,
    TrainSchedule,
    adamw_step,
    arrays_digest,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigError, EmptyPool, NotTrainable, NumericError, PoolMismatch
from .expert import ExpertModel, ExpertOutput, FeatureBank, _bank_for, embed_dataset, supervised_loss
from .records import DatasetManifest, ScoreEntry, ScoreSet

log = logging.getLogger(__name__)

KINDS = ("aggregation", "concatenation", "interaction")
CLI_KINDS = {"aggregate": "aggregation", "concat": "concatenation", "interact": "interaction"}


@dataclass
class SelectedPool:
    """Fullband expert (when present) first, then subband experts by ascending lower edge."""

    members: list[ExpertModel]

    def __post_init__(self):
        if not self.members:
            raise EmptyPool("a selected pool needs at least one expert")
        full = [m for m in self.members if m.role == "fullband"]
        subs = sorted((m for m in self.members if m.role == "subband"), key=lambda m: m.band)
        self.members = full + subs

    @property
    def K(self) -> int:
        return sum(m.role == "subband" for m in self.members)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def bands(self) -> list[tuple[float, float]]:
        return [m.band for m in self.members]


def aggregate_logits(logits) -> float:
    """Parameter-free late fusion: every pool member is an equal voter."""
    z = np.asarray(list(logits), dtype=np.float64)
    if z.size == 0:
        raise EmptyPool("cannot aggregate an empty list of logits")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logit in aggregation")
    return float(np.mean(z))


class FusionHead:
    """Learnable (or, for ``aggregation``, empty) head over stacked pool outputs."""

    def __init__(self, kind: str, n_members: int, embed_dim: int = 32, *, n_heads: int = 4, d_k: int = 8,
                 hidden=(256, 128), inter_hidden: int = 64, seed: int = 0, init: str = "he"):
        if kind not in KINDS:
            raise ConfigError(f"fusion kind must be one of {KINDS}, got {kind!r}")
        if n_members < 1:
            raise EmptyPool("fusion head needs at least one pool member")
        self.kind, self.n_members, self.embed_dim = kind, n_members, embed_dim
        self.n_heads, self.d_k, self.seed = n_heads, d_k, seed
        self.hidden, self.inter_hidden = tuple(hidden), inter_hidden
        self.store = ParamStore()
        self.net = None
        self.attn = None
        rng = np.random.default_rng([seed, 3])
        dt = np.float64
        if kind == "concatenation":
            dims = (embed_dim * n_members, *self.hidden, 1)
            layers = []
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                layers.append(Linear(a, b, rng=rng, dtype=dt, init=init if i < len(dims) - 2 else
                                     ("zeros" if init == "zeros" else "xavier")))
                if i < len(dims) - 2:
                    layers.append(ReLU())
            self.net = Sequential(*layers)
        elif kind == "interaction":
            if n_heads * d_k != embed_dim:
                raise ConfigError(f"n_heads * d_k must equal embed_dim={embed_dim}, got {n_heads} * {d_k}")
            self.attn = MultiHeadSelfAttention(embed_dim, n_heads, d_k, rng=rng, dtype=dt)
            self.net = Sequential(
                self.attn,
                MeanPoolSeq(),
                Linear(embed_dim, inter_hidden, rng=rng, dtype=dt, init=init),
                ReLU(),
                Linear(inter_hidden, 1, rng=rng, dtype=dt, init="zeros" if init == "zeros" else "xavier"),
            )
        if self.net is not None:
            for name, p in self.net.named_parameters():
                self.store.add(name, p)

    @property
    def trainable(self) -> bool:
        return self.kind != "aggregation"

    @property
    def attention(self):
        """Attention weights ``(B, n_heads, S, S)`` of the last interaction forward pass."""
        return None if self.attn is None else self.attn.attention

    def forward_batch(self, h: np.ndarray, z: np.ndarray) -> np.ndarray:
        """``h``: ``(B, S, D)`` stacked embeddings in pool order; ``z``: ``(B, S)`` logits."""
        if h.ndim != 3 or h.shape[1] != self.n_members or h.shape[2] != self.embed_dim:
            raise PoolMismatch(f"head expects (B, {self.n_members}, {self.embed_dim}) embeddings, got {h.shape}")
        if self.kind == "aggregation":
            return np.asarray(z, dtype=np.float64).mean(axis=1)
        if self.kind == "concatenation":
            return self.net.forward(h.reshape(h.shape[0], -1))[:, 0]
        return self.net.forward(h)[:, 0]

    def backward_batch(self, dz: np.ndarray) -> None:
        self.net.backward(np.asarray(dz, dtype=np.float64)[:, None])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.store.items()}

    def load_state_dict(self, arrays) -> None:
        for name, p in self.store.items():
            p.value = np.asarray(arrays[name], dtype=np.float64).copy()

    def meta(self) -> dict:
        return {
            "kind": self.kind, "n_members": self.n_members, "embed_dim": self.embed_dim, "n_heads": self.n_heads,
            "d_k": self.d_k, "hidden": list(self.hidden), "inter_hidden": self.inter_hidden, "seed": self.seed,
        }

    def digest(self) -> str:
        return arrays_digest(self.state_dict())

    def save(self, path) -> str:
        path = Path(path)
        digest = save_checkpoint(path, self.state_dict())
        path.with_suffix(".json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")
        return digest

    @classmethod
    def load(cls, path) -> "FusionHead":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        head = cls(meta["kind"], meta["n_members"], meta["embed_dim"], n_heads=meta["n_heads"], d_k=meta["d_k"],
                   hidden=meta["hidden"], inter_hidden=meta["inter_hidden"], seed=meta["seed"])
        head.load_state_dict(load_checkpoint(path))
        return head


def _stack(outputs: list[ExpertOutput], head: FusionHead):
    if len(outputs) != head.n_members:
        raise PoolMismatch(f"head built for {head.n_members} members, got {len(outputs)} outputs")
    h = np.stack([np.asarray(o.h, dtype=np.float64) for o in outputs])[None]
    z = np.array([[o.z for o in outputs]], dtype=np.float64)
    return h, z


def concat_fuse(outputs: list[ExpertOutput], head: FusionHead) -> float:
    if head.kind != "concatenation":
        raise ConfigError(f"concat_fuse needs a concatenation head, got {head.kind!r}")
    return float(head.forward_batch(*_stack(outputs, head))[0])


def mhsa_interact(outputs: list[ExpertOutput], head: FusionHead) -> float:
    if head.kind != "interaction":
        raise ConfigError(f"mhsa_interact needs an interaction head, got {head.kind!r}")
    return float(head.forward_batch(*_stack(outputs, head))[0])


def pool_outputs(pool: SelectedPool, ids: list[str], bank: FeatureBank):
    """Stacked ``(h, z)`` for ``ids``: shapes ``(n, S, D)`` and ``(n, S)`` in pool order."""
    hs, zs = zip(*(embed_dataset(m, ids, bank) for m in pool.members))
    return np.stack(hs, axis=1), np.stack(zs, axis=1)


@dataclass
class FusionTrainResult:
    head: FusionHead
    loss_history: list[float] = field(default_factory=list)


def train_fusion_head(head: FusionHead, pool: SelectedPool, manifest: DatasetManifest,
                      schedule: TrainSchedule = TrainSchedule(), epochs: int = 20, *, batch_size: int = 16,
                      loss: str = "focal", bank: FeatureBank | None = None, features=None) -> FusionTrainResult:
    """Train only the head on frozen expert outputs of the training split.

    ``features`` may pass precomputed ``(h, z, y)`` arrays instead of a manifest pass.
    """
    if not head.trainable:
        raise NotTrainable("aggregation has no parameters to train")
    if head.n_members != pool.size:
        raise PoolMismatch(f"head built for {head.n_members} members, pool has {pool.size}")
    if epochs == 0:
        return FusionTrainResult(head)
    if features is None:
        rows = [r for r in manifest.rows if r.split == "train"] or list(manifest.rows)
        for m in pool.members:
            bank = _bank_for(m, DatasetManifest(rows, manifest.root), bank)
        rows = [r for r in rows if r.id in bank.spectrograms]
        h_all, z_all = pool_outputs(pool, [r.id for r in rows], bank)
        y_all = np.array([r.y for r in rows], dtype=np.float64)
    else:
        h_all, z_all, y_all = features
    n = len(y_all)
    total = epochs * -(-n // batch_size)
    from dataclasses import replace

    schedule = replace(schedule, total_steps=total)
    rng = np.random.default_rng([head.seed, 4])
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            zf = head.forward_batch(h_all[idx], z_all[idx])
            per, dz = supervised_loss(loss, zf, y_all[idx])
            value = float(per.mean())
            if not np.isfinite(value):
                raise NumericError(f"non-finite fusion loss at step {step}")
            head.store.zero_grad()
            head.backward_batch(dz / len(idx))
            adamw_step(head.store, head.store.grads(), cosine_lr(step, schedule), schedule)
            history.append(value)
            step += 1
    return FusionTrainResult(head, history)


def fuse_scores(pool: SelectedPool, head: FusionHead, manifest: DatasetManifest, *,
                bank: FeatureBank | None = None) -> ScoreSet:
    if head.n_members != pool.size:
        raise PoolMismatch(f"head built for {head.n_members} members, pool has {pool.size}")
    for m in pool.members:
        bank = _bank_for(m, manifest, bank)
    rows = sorted(manifest.rows, key=lambda r: r.id)
    ok = [r for r in rows if r.id in bank.spectrograms]
    skipped = [(r.id, bank.failures[r.id]) for r in rows if r.id in bank.failures]
    if not ok:
        return ScoreSet([], skipped)
    h, z = pool_outputs(pool, [r.id for r in ok], bank)
    fused = head.forward_batch(h, z)
    return ScoreSet([ScoreEntry(r.id, r.label, float(s)) for r, s in zip(ok, fused)], skipped)


def aggregate_score_sets(sets: list[ScoreSet]) -> ScoreSet:
    """Decision-level fusion of per-expert score files: mean logit per shared utterance id."""
    if not sets:
        raise EmptyPool("no score sets to aggregate")
    maps = [s.as_dict() for s in sets]
    labels = {e.id: e.label for e in sets[0]}
    common = sorted(set.intersection(*(set(m) for m in maps)))
    return ScoreSet([ScoreEntry(uid, labels[uid], aggregate_logits(m[uid] for m in maps)) for uid in common])


# -- pool descriptor -------------------------------------------------------------------


def write_pool_descriptor(path, kind: str, members: list[tuple[str, tuple[float, float]]], head: str | None = None) -> str:
    doc = {
        "kind": kind,
        "members": [{"checkpoint": str(ckpt), "band": [float(lo), float(hi)]} for ckpt, (lo, hi) in members],
    }
    if head:
        doc["head"] = str(head)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_pool_descriptor(path):
    """Returns ``(doc, sha256)``; checkpoint paths are resolved relative to the descriptor."""
    path = Path(path)
    raw = path.read_bytes()
    doc = json.loads(raw)
    if "members" not in doc or not doc["members"]:
        raise EmptyPool(f"{path}: pool descriptor lists no members")
    for m in doc["members"]:
        p = Path(m["checkpoint"])
        m["checkpoint"] = str(p if p.is_absolute() else path.parent / p)
    return doc, hashlib.sha256(raw).hexdigest()


def load_pool(doc) -> SelectedPool:
    models = []
    for m in doc["members"]:
        model = ExpertModel.load(m["checkpoint"])
        if list(model.band) != [float(b) for b in m["band"]]:
            raise PoolMismatch(f"{m['checkpoint']}: descriptor band {m['band']} != model band {model.band}")
        models.append(model)
    return SelectedPool(models)
