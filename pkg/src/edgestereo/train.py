"""Alternating discriminator/generator optimisation, run logs and checkpoints."""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import imageops
from .data import Batch
from .errors import CheckpointVersionError, ConfigError, ContractError, CorruptDataError, MissingFileError
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_d,
    adversarial_g,
    cycle_loss,
    reconstruction_loss,
    total_discriminator_loss,
    total_generator_loss,
    warp_loss,
)
from .model import NetConfig, StereoTranslator, init_model

CHECKPOINT_MAGIC = b"ESCKPT\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    use_edges: bool = True
    use_warp: bool = True
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    disparity_sign: int = 1
    crop: tuple[int, int] | None = None
    workers: int = 0

    def problems(self) -> list[str]:
        out = []
        for name in ("epochs", "batch_size", "checkpoint_every", "log_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                out.append(f"train.{name} must be an integer >= 1, got {v!r}")
        if not isinstance(self.lr, (int, float)) or not self.lr > 0 or not math.isfinite(self.lr):
            out.append(f"train.lr must be a positive number, got {self.lr!r}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 <= v < 1:
                out.append(f"train.{name} must lie in [0, 1), got {v!r}")
        if self.disparity_sign not in (1, -1):
            out.append(f"train.disparity_sign must be +1 or -1, got {self.disparity_sign!r}")
        if not isinstance(self.workers, int) or self.workers < 0:
            out.append(f"train.workers must be an integer >= 0, got {self.workers!r}")
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) < 1):
            out.append(f"train.crop must be two positive integers, got {self.crop!r}")
        try:
            self.weights.validate()
        except ConfigError as exc:
            out.extend(f"train.{p}" for p in exc.problems)
        return out

    def validate(self) -> None:
        bad = self.problems()
        if bad:
            raise ConfigError(bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop) if self.crop else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"train.{k} is not a recognised field" for k in unknown])
        w = d.pop("weights", None) or {}
        wknown = {f.name for f in fields(LossWeights)}
        wbad = sorted(set(w) - wknown)
        if wbad:
            raise ConfigError([f"train.weights.{k} is not a recognised field" for k in wbad])
        if d.get("crop") is not None:
            d["crop"] = tuple(d["crop"])
        return cls(weights=LossWeights(**w), **d)


@dataclass
class StepRecord:
    step: int
    losses: LossBreakdown
    wall_ms: float = 0.0
    grad_norm_g: float = 0.0
    grad_norm_d: float = 0.0

    def log_entry(self) -> dict:
        """The deterministic part of the record (no wall time)."""
        return {"step": self.step, **self.losses.to_dict(), "grad_norm_g": self.grad_norm_g, "grad_norm_d": self.grad_norm_d}


def _grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().to(torch.float64).pow(2).sum())
    return math.sqrt(sq)


class Trainer:
    """Owns the model, both optimisers and the step counter."""

    def __init__(self, model: StereoTranslator, cfg: TrainConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.step = 0
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=betas)
        self._style_snapshot = (model.style_a.clone(), model.style_b.clone())

    @classmethod
    def create(cls, net: NetConfig, cfg: TrainConfig) -> "Trainer":
        return cls(init_model(net, cfg.seed), cfg)

    def styles_frozen(self) -> bool:
        a, b = self._style_snapshot
        return torch.equal(a, self.model.style_a) and torch.equal(b, self.model.style_b)

    def _encode_fused(self, imgs, edges):
        enc = self.model.encoder
        content = enc(imgs)
        if not self.cfg.use_edges:
            return content
        return content + enc(edges.expand(-1, imgs.shape[1], -1, -1))

    def _decode(self, codes, domains):
        styles = torch.stack([self.model.style_a, self.model.style_b])[domains]
        return self.model.decoder(codes, styles[:, 0], styles[:, 1])

    def forward_generator(self, batch: Batch) -> dict:
        """All generator paths of one step, keyed by output name."""
        n = batch.left.shape[0]
        x_a = torch.cat([batch.left, batch.right])
        e_a = torch.cat([batch.edges_left, batch.edges_right])
        x_b = batch.real
        na, nb = x_a.shape[0], x_b.shape[0]

        ce = self._encode_fused(torch.cat([x_a, x_b]), torch.cat([e_a, batch.edges_real]))
        ce_a, ce_b = ce[:na], ce[na:]
        a, b = 0, 1
        domains = torch.tensor([a] * na + [b] * na + [a] * nb + [b] * nb)
        out = self._decode(torch.cat([ce_a, ce_a, ce_b, ce_b]), domains)
        x_aa, x_ab, x_ba, x_bb = torch.split(out, [na, na, nb, nb])

        # cycle-back pass re-derives edges from the (detached) translations
        fakes = torch.cat([x_ab, x_ba])
        fake_edges = imageops.sobel_edges(fakes.detach())
        ce2 = self._encode_fused(fakes, fake_edges)
        back = self._decode(ce2, torch.tensor([a] * na + [b] * nb))
        x_aba, x_bab = torch.split(back, [na, nb])
        return {
            "x_a": x_a,
            "x_b": x_b,
            "x_aa": x_aa,
            "x_ab": x_ab,
            "x_ba": x_ba,
            "x_bb": x_bb,
            "x_aba": x_aba,
            "x_bab": x_bab,
            "left_ab": x_ab[:n],
            "right_ab": x_ab[n:],
        }

    def train_step(self, batch: Batch) -> StepRecord:
        t0 = time.perf_counter()
        model, cfg = self.model, self.cfg
        model.train()
        gen = self.forward_generator(batch)

        # discriminator update on detached fakes
        d_parts = {
            "adv_d_a": adversarial_d(model.disc_a(gen["x_a"]), model.disc_a(gen["x_ba"].detach())),
            "adv_d_b": adversarial_d(model.disc_b(gen["x_b"]), model.disc_b(gen["x_ab"].detach())),
        }
        total_d = total_discriminator_loss(d_parts)
        self.opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        grad_d = _grad_norm(model.discriminator_parameters())
        self.opt_d.step()

        # generator update
        parts = {
            "rec_aa": reconstruction_loss(gen["x_a"], gen["x_aa"]),
            "rec_bb": reconstruction_loss(gen["x_b"], gen["x_bb"]),
            "cyc_aba": cycle_loss(gen["x_a"], gen["x_aba"]),
            "cyc_bab": cycle_loss(gen["x_b"], gen["x_bab"]),
            "adv_a": adversarial_g(model.disc_a(gen["x_ba"])),
            "adv_b": adversarial_g(model.disc_b(gen["x_ab"])),
        }
        if cfg.use_warp:
            parts["warp"] = warp_loss(gen["left_ab"], gen["right_ab"], batch.disparity, cfg.weights, cfg.disparity_sign)
        else:
            parts["warp"] = torch.zeros((), dtype=torch.float64)
        total_g = total_generator_loss(parts, cfg.weights)
        self.opt_g.zero_grad(set_to_none=True)
        total_g.backward()
        grad_g = _grad_norm(model.generator_parameters())
        self.opt_g.step()
        for p in model.discriminator_parameters():
            p.grad = None

        self.step += 1
        losses = LossBreakdown(
            **{k: float(v.detach()) for k, v in parts.items()},
            total_g=float(total_g.detach()),
            total_d=float(total_d.detach()),
        )
        wall = (time.perf_counter() - t0) * 1000
        return StepRecord(self.step, losses, wall, grad_g, grad_d)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", cfg: TrainConfig | None = None) -> "Trainer":
        cfg = cfg or ckpt.train
        if cfg is None:
            raise ConfigError("checkpoint carries no training config; pass one explicitly")
        trainer = cls(ckpt.model, cfg)
        trainer.step = ckpt.step
        if ckpt.optimizer:
            _load_adam(trainer.opt_g, ckpt.optimizer, "opt_g")
            _load_adam(trainer.opt_d, ckpt.optimizer, "opt_d")
        return trainer


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: StereoTranslator
    train: TrainConfig | None
    step: int
    optimizer: dict  # flattened Adam state, name -> tensor


def _adam_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict:
    out = {}
    for i, p in enumerate(opt.param_groups[0]["params"]):
        state = opt.state.get(p)
        if not state:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            t = state[key]
            out[f"{prefix}.{i}.{key}"] = t if torch.is_tensor(t) else torch.tensor(float(t))
    return out


def _load_adam(opt: torch.optim.Optimizer, tensors: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state = {}
    for i in range(len(opt.param_groups[0]["params"])):
        key = f"{prefix}.{i}."
        if key + "step" in tensors:
            state[i] = {k: tensors[key + k].clone() for k in ("step", "exp_avg", "exp_avg_sq")}
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(obj, path) -> None:
    """Write a model (or a Trainer, including optimiser moments) atomically.

    Layout: 8-byte magic, u32 version, u64 header length, JSON header
    (configs, step, seed, tensor index), then little-endian float32 payload.
    """
    if isinstance(obj, Trainer):
        model, train, step = obj.model, obj.cfg.to_dict(), obj.step
        tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
        tensors.update(_adam_tensors(obj.opt_g, "opt_g"))
        tensors.update(_adam_tensors(obj.opt_d, "opt_d"))
    else:
        model, train, step = obj, None, 0
        tensors = {f"model.{k}": v for k, v in model.state_dict().items()}

    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        blob = t.detach().to(torch.float32).contiguous().cpu().numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"net": model.cfg.to_dict(), "train": train, "step": step, "seed": model.seed, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"no such checkpoint: {path}") from None
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CorruptDataError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 20 + hlen:
        raise CorruptDataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[20 : 20 + hlen])
    except ValueError:
        raise CorruptDataError(f"{path}: unreadable checkpoint header") from None
    payload = raw[20 + hlen :]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CorruptDataError(f"{path}: payload holds {len(payload)} bytes, index expects {expected}")

    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))

    model = StereoTranslator(NetConfig.from_dict(header["net"]), header["seed"])
    state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptDataError(f"{path}: checkpoint does not match its config: {exc}") from None
    train = TrainConfig.from_dict(header["train"]) if header["train"] else None
    optimizer = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return Checkpoint(model, train, header["step"], optimizer)


# ------------------------------------------------------------------------ fit


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in kept))


def fit(trainer: Trainer, stream, run_dir=None, stop_after: int | None = None) -> list[StepRecord]:
    """Run the remaining steps of ``epochs x steps_per_epoch``.

    Resumes from ``trainer.step``. With a ``run_dir`` the deterministic run log
    goes to ``log.jsonl``, wall times to ``timing.jsonl`` and checkpoints to
    ``checkpoints/``. ``stop_after`` halts once that many total steps are done.
    """
    cfg = trainer.cfg
    spe = stream.steps_per_epoch
    total = cfg.epochs * spe
    if stop_after is not None:
        total = min(total, stop_after)
    run_dir = Path(run_dir) if run_dir else None
    log_path = timing_path = ckpt_dir = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = run_dir / "checkpoints"
        log_path, timing_path = run_dir / "log.jsonl", run_dir / "timing.jsonl"
        _truncate_log(log_path, trainer.step)
        _truncate_log(timing_path, trainer.step)

    def checkpoint():
        if not trainer.styles_frozen():
            raise ContractError("style codes changed during training")
        if ckpt_dir:
            save_checkpoint(trainer, ckpt_dir / f"step_{trainer.step:08d}.ckpt")
            save_checkpoint(trainer, ckpt_dir / "latest.ckpt")

    records = []
    epoch = trainer.step // spe
    while trainer.step < total:
        skip = trainer.step - epoch * spe
        for i, batch in enumerate(stream.epoch(epoch)):
            if i < skip:
                continue
            if trainer.step >= total:
                break
            rec = trainer.train_step(batch)
            records.append(rec)
            if log_path and (rec.step % cfg.log_every == 0 or rec.step == total):
                with log_path.open("a") as fh:
                    fh.write(json.dumps(rec.log_entry()) + "\n")
                with timing_path.open("a") as fh:
                    fh.write(json.dumps({"step": rec.step, "wall_ms": round(rec.wall_ms, 3)}) + "\n")
            if rec.step % cfg.checkpoint_every == 0:
                checkpoint()
        epoch += 1
    if not records or records[-1].step % cfg.checkpoint_every != 0:
        checkpoint()
    return records


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]
