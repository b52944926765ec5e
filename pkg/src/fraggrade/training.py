"""Decoupled (pretrain -> freeze -> finetune) and joint training, plus checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .data import DatasetSplit, ImageSample, estimate_embryo_mask
from .losses import LossWeights, batch_reg_loss, consistency_loss, seg_loss, total_loss
from .model import GROUPS, FragmentNet, ModelConfig, arrays_digest

log = logging.getLogger(__name__)

PHASES = ("phase1", "phase2", "full_mtl")
PHASE2_GROUPS = frozenset({"reg_branch", "injection"})


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    phase: str = "phase1"
    trainable_groups: frozenset = frozenset(GROUPS)
    learning_rate: float = 1e-4
    epochs: int = 40
    weights: LossWeights = field(default_factory=lambda: LossWeights(beta=0.0))
    seed: int = 0
    batch_size: int = 8
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: Optional[int] = None
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        unknown = self.trainable_groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.phase == "phase1":
            if self.weights.beta != 0:
                raise ValueError("phase1 trains vision only: weights.beta must be 0")
            if not {"backbone", "seg_branch"} <= self.trainable_groups:
                raise ValueError("phase1 must train backbone and seg_branch")
        elif self.phase == "phase2":
            if not self.trainable_groups or not self.trainable_groups <= PHASE2_GROUPS:
                raise ValueError("phase2 may only train reg_branch and injection")
            if "reg_branch" not in self.trainable_groups:
                raise ValueError("phase2 must train reg_branch")
        elif self.trainable_groups != frozenset(GROUPS):
            raise ValueError("full_mtl trains every group")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")

    @classmethod
    def phase1(cls, **kw) -> "PhaseConfig":
        kw.setdefault("weights", LossWeights(beta=0.0))
        kw.setdefault("trainable_groups", frozenset(GROUPS))
        return cls(phase="phase1",
                   learning_rate=kw.pop("learning_rate", 1e-4), epochs=kw.pop("epochs", 40), **kw)

    @classmethod
    def phase2(cls, **kw) -> "PhaseConfig":
        kw.setdefault("weights", LossWeights(alpha=0.0))
        kw.setdefault("trainable_groups", PHASE2_GROUPS)
        return cls(phase="phase2", learning_rate=kw.pop("learning_rate", 1e-5),
                   epochs=kw.pop("epochs", 20), **kw)

    @classmethod
    def full_mtl(cls, **kw) -> "PhaseConfig":
        kw.setdefault("weights", LossWeights())
        kw.setdefault("trainable_groups", frozenset(GROUPS))
        return cls(phase="full_mtl",
                   learning_rate=kw.pop("learning_rate", 1e-4), epochs=kw.pop("epochs", 60), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_groups"] = sorted(self.trainable_groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "trainable_groups" in d:
            d["trainable_groups"] = frozenset(d["trainable_groups"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def canonical_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- checkpoints -------------------------------------------------------------

_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _npy_load(b: bytes) -> np.ndarray:
    return np.lib.format.read_array(io.BytesIO(b), allow_pickle=False)


@dataclass
class Checkpoint:
    """Named parameter/buffer arrays plus lineage metadata and optimizer state.

    The archive is a zip with fixed timestamps and sorted entries, so equal
    content always serializes to equal bytes.
    """

    arrays: dict[str, np.ndarray]
    phase: str
    epoch: int
    model_config: dict
    phase_config: dict = field(default_factory=dict)
    parent_digest: Optional[str] = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: dict = field(default_factory=dict)
    rng_state: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    @property
    def digest(self) -> str:
        return arrays_digest(self.arrays)

    @property
    def config_digest(self) -> str:
        return canonical_digest({"model": self.model_config, "phase": self.phase_config})

    def group_digest(self, group: str) -> str:
        return arrays_digest({k: v for k, v in self.arrays.items() if k.split(".", 1)[0] == group})

    def metadata(self) -> dict:
        return {
            "format": "fraggrade-checkpoint/1",
            "phase": self.phase,
            "epoch": self.epoch,
            "digest": self.digest,
            "config_digest": self.config_digest,
            "parent_digest": self.parent_digest,
            "model_config": self.model_config,
            "phase_config": self.phase_config,
            "optimizer_meta": self.optimizer_meta,
            "history": self.history,
        }

    def to_bytes(self) -> bytes:
        entries = {"metadata.json": json.dumps(self.metadata(), sort_keys=True, indent=1).encode()}
        for name, a in self.arrays.items():
            entries[f"params/{name}.npy"] = _npy_bytes(a)
        for name, a in self.optimizer.items():
            entries[f"optim/{name}.npy"] = _npy_bytes(a)
        if self.rng_state is not None:
            entries["rng_state.npy"] = _npy_bytes(self.rng_state)
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(entries):
                info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
                info.external_attr = 0o644 << 16
                zf.writestr(info, entries[name])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                meta = json.loads(zf.read("metadata.json"))
                arrays, optim, rng = {}, {}, None
                for name in zf.namelist():
                    if name.startswith("params/"):
                        arrays[name[len("params/"):-4]] = _npy_load(zf.read(name))
                    elif name.startswith("optim/"):
                        optim[name[len("optim/"):-4]] = _npy_load(zf.read(name))
                    elif name == "rng_state.npy":
                        rng = _npy_load(zf.read(name))
        except (zipfile.BadZipFile, KeyError, ValueError) as e:
            raise TrainingError(f"corrupt checkpoint: {e}") from e
        ckpt = cls(arrays, meta["phase"], meta["epoch"], meta["model_config"], meta["phase_config"],
                   meta["parent_digest"], optim, meta["optimizer_meta"], rng, meta["history"])
        if ckpt.digest != meta["digest"]:
            raise TrainingError("checkpoint parameter digest does not match its metadata")
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def build_model(config: ModelConfig | None = None, seed: int = 0) -> FragmentNet:
    torch.manual_seed(seed)
    return FragmentNet(config or ModelConfig())


def load_weights(model: FragmentNet, ckpt: Checkpoint) -> FragmentNet:
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.arrays.items()}
    model.load_state_dict(state, strict=True)
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> FragmentNet:
    model = FragmentNet(ModelConfig.from_dict(ckpt.model_config))
    return load_weights(model, ckpt)


# -- freezing -----------------------------------------------------------------

def freeze_backbone(model: FragmentNet, groups: Iterable[str] = ("backbone",)) -> FragmentNet:
    """Mark the listed groups non-trainable and every other present group trainable."""
    frozen = set(groups)
    unknown = frozen - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    for name, p in model.named_parameters():
        p.requires_grad_(model.group_of(name) not in frozen)
    model.frozen_groups = frozen & set(model.present_groups())
    return model


def trainable_named_parameters(model: FragmentNet):
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def _set_mode(model: FragmentNet, training: bool) -> None:
    model.train(training)
    # frozen groups keep BN running statistics untouched
    for g in getattr(model, "frozen_groups", ()):
        model.group(g).eval()


# -- data -----------------------------------------------------------------------

@dataclass
class _Batchable:
    images: torch.Tensor  # (N, H, W) float32
    masks: list  # (H, W) float tensors or None
    areas: torch.Tensor  # (N,) float64 embryo area in pixels
    ratios: list
    grades: list

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample]) -> "_Batchable":
        images = torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float32) for s in samples]))
        masks, areas = [], []
        for s in samples:
            if s.fragment_mask is not None:
                masks.append(torch.from_numpy(np.asarray(s.fragment_mask, dtype=np.float32)))
                areas.append(float(np.sum(s.embryo_mask)))
            else:
                masks.append(None)
                areas.append(float(max(estimate_embryo_mask(s.image).sum(), 1)))
        return cls(images, masks, torch.tensor(areas, dtype=torch.float64),
                   [s.ratio for s in samples], [s.grade for s in samples])

    def __len__(self):
        return self.images.shape[0]


class _FrozenCache:
    """Per-sample outputs of the frozen trunk.

    Frozen groups run in eval mode with fixed weights, so their outputs are a pure
    function of the image and can be computed once per phase instead of per step.
    """

    def __init__(self, model: FragmentNet, data: _Batchable, channels: int, dtype, chunk: int = 8):
        self.f3 = self.f4 = self.f_dec = None
        n = len(data)
        with torch.no_grad():
            for start in range(0, n, chunk):
                x = data.images[start:start + chunk].unsqueeze(1).expand(-1, channels, -1, -1).to(dtype)
                feats = model.shared_features(x)[:3]
                if start == 0:  # preallocate; the trunk outputs dominate memory
                    self.f3, self.f4, self.f_dec = (
                        None if f is None else f.new_empty((n, *f.shape[1:])) for f in feats)
                for dst, f in zip((self.f3, self.f4, self.f_dec), feats):
                    if f is not None:
                        dst[start:start + f.shape[0]] = f

    @staticmethod
    def applies(model: FragmentNet) -> bool:
        frozen = set(getattr(model, "frozen_groups", ()))
        return "backbone" in frozen and (model.seg_branch is None or "seg_branch" in frozen)

    def outputs(self, model: FragmentNet, idx, out_size):
        f_dec = self.f_dec[idx] if self.f_dec is not None else None
        return model.heads(self.f3[idx], self.f4[idx], f_dec, None, out_size)


def _batch_losses(model, out, batch: _Batchable, idx, w: LossWeights):
    """Loss parts available for this batch, honouring zero weights lazily."""
    parts = {}
    logits, y_hat = out.mask_logits, out.y_hat
    if logits is not None and w.alpha > 0:
        paired = [k for k, i in enumerate(idx) if batch.masks[i] is not None]
        if paired:
            gt = torch.stack([batch.masks[idx[k]] for k in paired]).unsqueeze(1).to(logits.dtype)
            parts["seg"] = seg_loss(logits[paired], gt, w)
    if y_hat is not None and w.beta > 0:
        parts["reg"] = batch_reg_loss(y_hat, [batch.ratios[i] for i in idx],
                                      [batch.grades[i] for i in idx])
    if y_hat is not None and logits is not None and w.gamma > 0:
        areas = batch.areas[idx].to(logits.dtype)
        parts["cons"] = consistency_loss(y_hat, logits[:, 0], areas)
    return parts


def _optimizer_state(opt, names):
    arrays, meta = {}, {"param_groups": []}
    sd = opt.state_dict()
    for group in sd["param_groups"]:
        g = {k: v for k, v in group.items() if k != "params"}
        g["params"] = [names[i] for i in group["params"]]
        meta["param_groups"].append(g)
    for i, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{names[i]}.{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return arrays, meta


def restore_optimizer(opt: torch.optim.Optimizer, model: FragmentNet, ckpt: Checkpoint) -> None:
    names = [n for n, _ in trainable_named_parameters(model)]
    if ckpt.optimizer_meta.get("param_groups"):
        saved = ckpt.optimizer_meta["param_groups"][0]["params"]
        if saved != names:
            raise TrainingError("optimizer state does not match the trainable parameters")
    state = {}
    for i, n in enumerate(names):
        st = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            arr = ckpt.optimizer.get(f"{n}.{key}")
            if arr is not None:
                st[key] = torch.from_numpy(np.array(arr))
        if st:
            state[i] = st
    groups = opt.state_dict()["param_groups"]
    opt.load_state_dict({"state": state, "param_groups": groups})


# called after every epoch with the model in eval mode; returned metrics join the history
EpochHook = Callable[[int, FragmentNet], Optional[dict]]


def _run(model: FragmentNet, samples: Sequence[ImageSample], cfg: PhaseConfig,
         parent: Optional[Checkpoint] = None, on_epoch: Optional[EpochHook] = None) -> Checkpoint:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    present = set(model.present_groups())
    trainable = cfg.trainable_groups & present
    freeze_backbone(model, present - trainable)
    named = trainable_named_parameters(model)
    if not named:
        raise TrainingError("no trainable parameters")
    names = [n for n, _ in named]
    opt = torch.optim.AdamW([p for _, p in named], lr=cfg.learning_rate, betas=cfg.betas,
                            eps=cfg.eps, weight_decay=cfg.weight_decay)
    data = _Batchable.from_samples(samples)
    channels = model.config.input_channels
    dtype = next(model.parameters()).dtype
    w = cfg.weights
    out_size = tuple(data.images.shape[-2:])
    cache = None
    if _FrozenCache.applies(model):
        _set_mode(model, True)
        cache = _FrozenCache(model, data, channels, dtype)

    history, step, epoch = [], 0, 0
    for epoch in range(1, cfg.epochs + 1):
        _set_mode(model, True)
        perm = torch.randperm(len(data), generator=gen).tolist()
        sums, counts = defaultdict(float), defaultdict(int)
        for start in range(0, len(perm), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2 and len(perm) > 1:
                continue  # BatchNorm needs more than one sample
            if cache is not None:
                out = cache.outputs(model, idx, out_size)
            else:
                x = data.images[idx].unsqueeze(1).expand(-1, channels, -1, -1).to(dtype)
                out = model(x)
            parts = _batch_losses(model, out, data, idx, w)
            if not parts:
                continue
            loss = total_loss(parts, w)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            for k, v in parts.items():
                sums[k] += float(v.detach())
                counts[k] += 1
            sums["total"] += float(loss.detach())
            counts["total"] += 1
        record = {"epoch": epoch, "steps": step}
        record.update({k: sums[k] / counts[k] for k in counts})
        if on_epoch is not None:
            _set_mode(model, False)
            with torch.no_grad():
                record.update(on_epoch(epoch, model) or {})
        history.append(record)
        log.info("%s epoch %d: %s", cfg.phase, epoch,
                 ", ".join(f"{k}={v:.4f}" for k, v in record.items() if isinstance(v, float)))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    _set_mode(model, False)

    opt_arrays, opt_meta = _optimizer_state(opt, names)
    return Checkpoint(
        arrays=model.named_arrays(),
        phase=cfg.phase,
        epoch=epoch,
        model_config=model.config.to_dict(),
        phase_config=cfg.to_dict(),
        parent_digest=parent.digest if parent is not None else None,
        optimizer=opt_arrays,
        optimizer_meta=opt_meta,
        rng_state=torch.get_rng_state().numpy().copy(),
        history=history,
    )


def train_phase1(split: DatasetSplit, model: FragmentNet, cfg: PhaseConfig,
                 on_epoch: Optional[EpochHook] = None) -> Checkpoint:
    """Vision pre-training on paired data: alpha*L_seg + gamma*L_cons (beta = 0)."""
    if cfg.phase != "phase1":
        raise ValueError(f"train_phase1 needs a phase1 config, got {cfg.phase}")
    if not split.paired:
        raise TrainingError("Phase 1 requires pixel supervision: the paired set is empty")
    if model.seg_branch is None:
        raise TrainingError("Phase 1 needs a segmentation branch")
    return _run(model, split.paired, cfg, on_epoch=on_epoch)


def train_phase2(split: DatasetSplit, model: FragmentNet, phase1_ckpt: Optional[Checkpoint],
                 cfg: PhaseConfig, on_epoch: Optional[EpochHook] = None) -> Checkpoint:
    """Frozen-backbone finetuning of the regression head and injection layers."""
    if cfg.phase != "phase2":
        raise ValueError(f"train_phase2 needs a phase2 config, got {cfg.phase}")
    if phase1_ckpt is None:
        raise TrainingError("Phase 2 requires a phase-1 checkpoint")
    if phase1_ckpt.phase != "phase1":
        raise TrainingError(f"Phase 2 parent must be a phase1 checkpoint, got {phase1_ckpt.phase}")
    if model.reg_branch is None:
        raise TrainingError("Phase 2 needs a regression branch")
    load_weights(model, phase1_ckpt)
    samples = list(split.paired) + list(split.weak)
    if not samples:
        raise TrainingError("Phase 2 needs paired or weak samples")
    return _run(model, samples, cfg, parent=phase1_ckpt, on_epoch=on_epoch)


def train_full_mtl(split: DatasetSplit, model: FragmentNet, cfg: PhaseConfig,
                   use_weak: bool = True, on_epoch: Optional[EpochHook] = None) -> Checkpoint:
    """Joint optimisation of every present group on paired (and weak) data."""
    if cfg.phase != "full_mtl":
        raise ValueError(f"train_full_mtl needs a full_mtl config, got {cfg.phase}")
    samples = list(split.paired) + (list(split.weak) if use_weak else [])
    if not samples:
        raise TrainingError("no training samples")
    return _run(model, samples, cfg, on_epoch=on_epoch)


def train_decoupled(split: DatasetSplit, model: FragmentNet, cfg1: PhaseConfig,
                    cfg2: PhaseConfig) -> tuple[Checkpoint, Checkpoint]:
    ck1 = train_phase1(split, model, cfg1)
    ck2 = train_phase2(split, model, ck1, cfg2)
    return ck1, ck2


__all__ = [
    "Checkpoint", "PhaseConfig", "TrainingError", "build_model", "freeze_backbone", "load_weights",
    "model_from_checkpoint", "restore_optimizer", "train_decoupled", "train_full_mtl",
    "train_phase1", "train_phase2", "trainable_named_parameters",
]
