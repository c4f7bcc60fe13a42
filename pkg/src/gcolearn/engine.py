"""Adam, the two-group episode trainer and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .collaboration import gcm_cross, gcm_predict, group_forward
from .losses import (FocalConfig, LossWeights, NonFiniteLoss, classification_loss, gcm_loss,
                     soft_iou_loss, total_loss)
from .model import ModelConfig, Params, classify, decode, encode, init_params
from .serialize import FormatError, dump_array, load_array
from .synth import DatasetManifest, Episode, sample_episode

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params, **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **hyper)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)


# -------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    episodes_per_epoch: int | None = None
    k: int = 8
    lr: float = 1e-4
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    use_gam: bool = True
    use_gcm: bool = True
    use_acm: bool = True
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2 if self.use_gcm else 0.0,
                           self.lambda3 if self.use_acm else 0.0)

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_gamma, self.focal_alpha)

    def steps_per_epoch(self, manifest: DatasetManifest) -> int:
        if self.episodes_per_epoch:
            return self.episodes_per_epoch
        n = sum(1 for r in manifest.records if r.split == "train")
        return math.ceil(n / (2 * self.k))


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Params
    adam: AdamState
    rng_state: dict
    step: int
    class_ids: list[int] = field(default_factory=list)


def _seed_streams(seed: int) -> tuple[int, np.random.Generator]:
    init_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    return int(init_seed.generate_state(1, np.uint64)[0]), T.rng(sample_seed)


def new_checkpoint(tcfg: TrainConfig, manifest: DatasetManifest, mcfg: ModelConfig | None = None) -> Checkpoint:
    class_ids = manifest.class_ids("train")
    mcfg = mcfg or ModelConfig(input_size=manifest.size, num_classes=len(class_ids))
    init_seed, gen = _seed_streams(tcfg.seed)
    params = init_params(mcfg, init_seed)
    adam = AdamState.zeros_like(params, lr=tcfg.lr)
    return Checkpoint(mcfg, tcfg, params, adam, gen.bit_generator.state, 0, class_ids)


def episode_losses(params: Params, mcfg: ModelConfig, tcfg: TrainConfig, episode: Episode,
                   label_of: dict[int, int]) -> dict[str, T.Tensor]:
    """Forward pass over both groups; returns the active loss terms and the total."""
    groups = (episode.group_a, episode.group_b)
    feats = [encode(T.Tensor(g.images), params, mcfg) for g in groups]
    states = [group_forward(f[-1], params, tcfg.use_gam) for f in feats]
    sal = []
    for g, f, st in zip(groups, feats, states):
        logits = decode(st.f_out, f, params, mcfg)
        sal.append(soft_iou_loss(T.sigmoid(logits), g.masks))
    parts = {"sal": (sal[0] + sal[1]) * 0.5}
    if tcfg.use_gcm:
        plus, minus = gcm_cross(feats[0][-1], feats[1][-1], states[0].consensus, states[1].consensus)
        size = mcfg.input_size
        m_plus = gcm_predict(T.concat(plus), params, size)
        m_minus = gcm_predict(T.concat(minus), params, size)
        gt = np.concatenate([g.masks for g in groups])
        parts["ctm"] = gcm_loss(m_plus, m_minus, gt, tcfg.focal)
    if tcfg.use_acm:
        logits = classify(T.concat([f[-1] for f in feats]), params)
        labels = np.concatenate([[label_of[g.class_id]] * len(g.images) for g in groups])
        parts["cls"] = classification_loss(logits, labels)
    parts["total"] = total_loss(parts, tcfg.weights)
    return parts


LOSS_HEADER = "step,l_sal,l_ctm,l_cls,total"


def train(tcfg: TrainConfig, manifest: DatasetManifest, resume: Checkpoint | None = None,
          loss_csv: str | os.PathLike | None = None, max_steps: int | None = None,
          on_step: Callable[[int, dict[str, float]], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run (or continue) episode training.

    Stops after ``epochs * steps_per_epoch`` steps in total, or earlier at
    ``max_steps``.  A non-finite loss raises NonFiniteLoss with the last good
    checkpoint attached as ``.checkpoint``.
    """
    ck = resume if resume is not None else new_checkpoint(tcfg, manifest)
    tcfg = ck.train_config
    gen = T.rng(0)
    gen.bit_generator.state = ck.rng_state
    label_of = {c: i for i, c in enumerate(ck.class_ids)}
    total_steps = tcfg.epochs * tcfg.steps_per_epoch(manifest)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    history = []
    fh = None
    if loss_csv is not None:
        new = not Path(loss_csv).exists() or resume is None
        fh = open(loss_csv, "w" if new else "a")
        if new:
            fh.write(LOSS_HEADER + "\n")
    try:
        while ck.step < total_steps:
            episode = sample_episode(manifest, tcfg.k, gen)
            try:
                parts = episode_losses(ck.params, ck.model_config, tcfg, episode, label_of)
            except NonFiniteLoss as e:
                e.checkpoint = ck
                raise
            T.backward(parts["total"])
            grads = {k: p.grad for k, p in ck.params.items() if p.grad is not None}
            adam_step(ck.params, grads, ck.adam)
            for p in ck.params.values():
                p.grad = None
            ck.step += 1
            ck.rng_state = gen.bit_generator.state
            row = {"step": ck.step, **{k: float(v.data) for k, v in parts.items()}}
            row = {"step": ck.step, "l_sal": row.get("sal", 0.0), "l_ctm": row.get("ctm", 0.0),
                   "l_cls": row.get("cls", 0.0), "total": row["total"]}
            history.append(row)
            if fh:
                fh.write(f"{row['step']},{row['l_sal']:.8g},{row['l_ctm']:.8g},{row['l_cls']:.8g},{row['total']:.8g}\n")
            if on_step:
                on_step(ck.step, row)
            if ck.step % 50 == 0:
                log.info("step %d/%d total %.4f", ck.step, total_steps, row["total"])
    finally:
        if fh:
            fh.close()
    return ck, history


# ------------------------------------------------------------- checkpoints

def _rng_to_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        return v
    return conv(state)


def _rng_from_json(state: dict) -> dict:
    out = json.loads(json.dumps(state))
    inner = out["state"]
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    out["buffer"] = np.array(out["buffer"], dtype=np.uint64)
    return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "model_config": ck.model_config.to_dict(),
        "train_config": asdict(ck.train_config),
        "step": ck.step,
        "class_ids": list(ck.class_ids),
        "adam": {"t": ck.adam.t, "lr": ck.adam.lr, "beta1": ck.adam.beta1,
                 "beta2": ck.adam.beta2, "eps": ck.adam.eps},
        "rng": _rng_to_json(ck.rng_state),
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    named = [(k, p.data) for k, p in ck.params.items()]
    named += [(f"adam.m.{k}", a) for k, a in ck.adam.m.items()]
    named += [(f"adam.v.{k}", a) for k, a in ck.adam.v.items()]
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(named))]
    for name, arr in named:
        rec = dump_array(arr)
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(rec)), rec,
                struct.pack("<I", zlib.crc32(rec))]
    return b"".join(out)


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"corrupt or truncated checkpoint: {e}") from e


def _parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, blen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    pos = 12
    meta = json.loads(buf[pos:pos + blen])
    pos += blen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (rlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        rec = buf[pos:pos + rlen]
        if len(rec) != rlen or len(buf) < pos + rlen + 4:
            raise FormatError(f"truncated payload for tensor {name}")
        pos += rlen
        (crc,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if zlib.crc32(rec) != crc:
            raise FormatError(f"CRC mismatch for tensor {name}")
        arr, end = load_array(rec)
        if end != rlen:
            raise FormatError(f"length mismatch for tensor {name}")
        arrays[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")

    mcfg = ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    pnames = [k for k in arrays if not k.startswith("adam.")]
    params = {}
    for k in pnames:
        t = T.Tensor._wrap(arrays[k])
        t.requires_grad = True
        params[k] = t
    a = meta["adam"]
    adam = AdamState({k: arrays[f"adam.m.{k}"] for k in pnames}, {k: arrays[f"adam.v.{k}"] for k in pnames},
                     a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(mcfg, tcfg, params, adam, _rng_from_json(meta["rng"]), meta["step"], meta["class_ids"])


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def with_epochs(ck: Checkpoint, epochs: int) -> Checkpoint:
    """Same checkpoint with a different epoch budget (for extending a run)."""
    return replace(ck, train_config=replace(ck.train_config, epochs=epochs))


# --------------------------------------------------------------- consensus

@dataclass
class ConsensusExport:
    group_ids: list[int]
    sub_batch: list[int]
    vectors: np.ndarray     # rows × C
    d1: float               # mean intra-group pairwise cosine distance
    d2: float               # mean inter-group pairwise cosine distance

    @property
    def ratio(self) -> float:
        return self.d2 / self.d1 if self.d1 > 0 else math.inf

    def to_csv(self) -> str:
        c = self.vectors.shape[1]
        lines = ["group_id,sub_batch," + ",".join(f"c{i}" for i in range(c))]
        for g, s, v in zip(self.group_ids, self.sub_batch, self.vectors):
            lines.append(f"{g},{s}," + ",".join(f"{x:.8g}" for x in v))
        lines.append(f"# d1={self.d1:.8g},d2={self.d2:.8g},ratio={self.ratio:.8g}")
        return "\n".join(lines) + "\n"


def cosine_distances(x: np.ndarray) -> np.ndarray:
    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return 1.0 - unit @ unit.T


def separability(vectors: np.ndarray, group_ids) -> tuple[float, float]:
    """(d1, d2): mean cosine distance over same-group and cross-group pairs."""
    gid = np.asarray(group_ids)
    dist = cosine_distances(np.asarray(vectors, dtype=np.float64))
    same = gid[:, None] == gid[None, :]
    off = ~np.eye(len(gid), dtype=bool)
    if not (same & off).any():
        raise ValueError("every group needs at least two sub-batches")
    if not (~same).any():
        raise ValueError("need at least two groups")
    return float(dist[same & off].mean()), float(dist[~same].mean())


def export_consensus(ck: Checkpoint, manifest: DatasetManifest, split: str = "eval",
                     sub_batch: int | None = None, seed: int = 0) -> ConsensusExport:
    """Consensus vectors of disjoint sub-batches of every ``split`` group.

    Each class is shuffled (seeded) and cut into sub-batches of ``sub_batch``
    images (default: the training K), and each sub-batch's consensus is computed
    as at inference.
    """
    from .inference import group_consensus

    ids = manifest.class_ids(split)
    if len(ids) < 2:
        raise ValueError(f"export_consensus needs at least two {split} groups, found {len(ids)}")
    size = sub_batch or ck.train_config.k
    gen = T.rng(seed)
    gids, subs, vecs = [], [], []
    for cid in ids:
        images, _ = manifest.load_class(cid)
        order = gen.permutation(len(images))
        n_sub = len(images) // size
        if n_sub < 2 or size < 2:
            raise ValueError(f"class {cid} has too few images for two sub-batches of {size}")
        for s in range(n_sub):
            _, e, _ = group_consensus(ck.params, ck.model_config, images[np.sort(order[s * size:(s + 1) * size])],
                                      ck.train_config.use_gam)
            gids.append(cid)
            subs.append(s)
            vecs.append(e.ravel().astype(np.float64))
    vectors = np.stack(vecs)
    d1, d2 = separability(vectors, gids)
    return ConsensusExport(gids, subs, vectors, d1, d2)
