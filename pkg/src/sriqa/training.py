"""Adam training loop with restartable checkpoints.

Shuffling and dropout draw from generators keyed by (seed, epoch) and
(seed, step), so any step's randomness can be replayed without the
history that led to it. Combined with float64 parameter and moment
storage in checkpoints, a resumed run is bit-identical to one that was
never interrupted.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, NumericError, StateError
from .imaging import extract_patches, load_image
from .metrics import plcc, srcc
from .model import (
    HR_PATCH,
    LR_PATCH,
    ModelParams,
    model_backward,
    model_forward,
    named_arrays,
    predict_patches,
    read_weights_blob,
    weights_blob,
)
from .tensor import AdamState, adam_apply, adam_init, loss_mse_l2


@dataclass
class TrainConfig:
    eta: float = 1e-4
    lam: float = 5e-4
    batch_size: int = 4
    max_steps: int = 0
    seed: int = 0
    checkpoint_every: int = 0  # steps between checkpoints, 0 disables
    eval_every: int = 0        # steps between eval passes, 0 disables

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.eta <= 0 or self.lam < 0:
            raise ConfigError(f"bad eta/lam: {self.eta}/{self.lam}")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def to_dict(self):
        return {"losses": self.losses, "evals": self.evals}

    @classmethod
    def from_dict(cls, d):
        return cls(losses=list(d["losses"]), evals=list(d["evals"]))


@dataclass
class ResumeState:
    adam: AdamState
    log: TrainLog


class PatchSource:
    """Decodes manifest images into patch tensors, cached in memory.

    Patch tensors for the acceptance-scale datasets fit comfortably in
    RAM; a giant corpus would want an LRU here instead.
    """

    def __init__(self, base_dir):
        self.base = Path(base_dir)
        self._cache = {}

    def _patches(self, rel_path, size):
        key = (rel_path, size)
        if key not in self._cache:
            self._cache[key] = extract_patches(load_image(self.base / rel_path), size)
        return self._cache[key]

    def __call__(self, rec, need_lr=True):
        hr = self._patches(rec.hr_path, HR_PATCH)
        lr = self._patches(rec.lr_path, LR_PATCH) if need_lr else None
        return hr, lr


def _epoch_perm(seed, epoch, n):
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def _step_rng(seed, step):
    return np.random.default_rng([seed, 1, step])


def train(model: ModelParams, records, cfg: TrainConfig, patches,
          eval_records=(), checkpoint_path=None, state: ResumeState = None):
    """Train in place until cfg.max_steps total steps. Returns (model, log).

    `patches` maps a record to its (hr, lr) patch tensors; `state`, when
    given, continues a checkpointed run (its Adam step counts as the
    global step). A batch is batch_size images; each image contributes
    one prediction from all of its patches.
    """
    if not records:
        raise ConfigError("no training records")
    unlabeled = [r.sample_id for r in records if r.imos is None]
    if unlabeled:
        raise ManifestError(f"unlabeled training records: {unlabeled[:3]}")

    arrays = named_arrays(model)
    if state is not None:
        adam, log = state.adam, state.log
        if set(adam.m) != set(arrays):
            raise StateError("checkpoint optimizer state does not match this model")
    else:
        adam, log = adam_init(arrays, eta=cfg.eta), TrainLog()
    l2_weights = [arr for name, arr in arrays.items() if name.endswith(".w")]
    need_lr = model.config.use_lr_reference
    n = len(records)
    steps_per_epoch = max(1, n // cfg.batch_size)

    for step in range(adam.step, cfg.max_steps):
        epoch, offset = divmod(step, steps_per_epoch)
        perm = _epoch_perm(cfg.seed, epoch, n)
        idx = perm[offset * cfg.batch_size:offset * cfg.batch_size + cfg.batch_size]
        rng = _step_rng(cfg.seed, step)
        try:
            preds, caches = [], []
            for i in idx:
                hr, lr = patches(records[i], need_lr=need_lr)
                pred, cache = model_forward(model, hr, lr, training=True, rng=rng)
                preds.append(pred)
                caches.append(cache)
            targets = [records[i].imos for i in idx]
            loss, grad_preds = loss_mse_l2(preds, targets, l2_weights, cfg.lam)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss")
            grads = None
            for cache, gp in zip(caches, grad_preds):
                g = model_backward(model, cache, gp)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            for name in grads:
                if name.endswith(".w"):
                    grads[name] += 2.0 * cfg.lam * arrays[name]
            adam_apply(adam, arrays, grads)
        except NumericError as e:
            raise NumericError(f"training aborted at step {step}: {e}") from e
        log.losses.append(loss)

        done = adam.step
        if cfg.eval_every and done % cfg.eval_every == 0 and len(eval_records) >= 2:
            log.evals.append(_eval_entry(model, eval_records, patches, need_lr, done))
        if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, adam, log, cfg)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, adam, log, cfg)
    return model, log


def _eval_entry(model, records, patches, need_lr, step):
    preds = [predict_patches(model, *patches(r, need_lr=need_lr)) for r in records]
    labels = [r.imos for r in records]
    entry = {"step": step, "n": len(records)}
    try:
        entry["plcc"] = plcc(preds, labels)
        entry["srcc"] = srcc(preds, labels)
    except Exception:
        entry["plcc"] = entry["srcc"] = None  # degenerate eval slice
    return entry


# ---------------------------------------------------------------------------
# checkpoints: weight container + optimizer section + 64-bit checksum

def checkpoint_blob(model, adam: AdamState, log: TrainLog, cfg: TrainConfig) -> bytes:
    body = bytearray(weights_blob(model, dtype="f64"))
    names = list(adam.m)
    header = {
        "eta": adam.eta, "beta1": adam.beta1, "beta2": adam.beta2,
        "epsilon": adam.epsilon, "step": adam.step,
        "arrays": [{"name": k, "shape": list(adam.m[k].shape)} for k in names],
        "log": log.to_dict(),
        "train_config": asdict(cfg),
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(hdr))
    body += hdr
    for k in names:
        body += np.ascontiguousarray(adam.m[k], dtype="<f8").tobytes()
        body += np.ascontiguousarray(adam.v[k], dtype="<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()[:8]
    return bytes(body)


def save_checkpoint(path, model, adam, log, cfg):
    data = checkpoint_blob(model, adam, log, cfg)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, ResumeState, TrainConfig)."""
    data = Path(path).read_bytes()
    if len(data) < 8 or hashlib.sha256(data[:-8]).digest()[:8] != data[-8:]:
        raise StateError(f"{path}: checkpoint checksum mismatch")
    model, offset = read_weights_blob(data)
    (hlen,) = struct.unpack("<I", data[offset:offset + 4])
    header = json.loads(data[offset + 4:offset + 4 + hlen].decode("utf-8"))
    adam = AdamState(eta=header["eta"], beta1=header["beta1"], beta2=header["beta2"],
                     epsilon=header["epsilon"], step=header["step"])
    pos = offset + 4 + hlen
    for m in header["arrays"]:
        shape = tuple(m["shape"])
        count = int(np.prod(shape)) if shape else 1
        for dest in (adam.m, adam.v):
            chunk = data[pos:pos + count * 8]
            if len(chunk) != count * 8:
                raise StateError(f"{path}: checkpoint truncated in optimizer state")
            dest[m["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
            pos += count * 8
    if pos + 8 != len(data):
        raise StateError(f"{path}: checkpoint has trailing bytes")
    cfg = TrainConfig(**header["train_config"])
    return model, ResumeState(adam=adam, log=TrainLog.from_dict(header["log"])), cfg
