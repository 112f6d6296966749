"""Generator pretraining, adversarial training, checkpoints and loss/PSNR curves."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import archive
from .data import (AugmentSpec, VideoSequence, draw_training_sample, split_corpus, to_tensor)
from .errors import ArchiveError, TrainingDiverged
from .evaluation import evaluate_triplets, evaluation_triplets
from .losses import (Discriminator, DiscriminatorConfig, FeatureExtractorSpec, LossWeights,
                     build_feature_extractor, feature_loss, gan_losses, pixel_loss,
                     temporal_tv_loss, total_objective, transitive_loss)
from .model import Generator, GeneratorConfig, downsample_pyramid

log = logging.getLogger(__name__)

VARIANTS = ("predicted", "observed", "off", "tv", "weighted_tv")
CURVE_COLUMNS = ("epoch", "split", "psnr", "ssim", "loss_total", "loss_pix", "loss_feat", "loss_gan", "loss_tran")
CHECKPOINT_FORMAT = "framesynth-checkpoint/1"


@dataclass
class TrainConfig:
    # optimizer / schedule
    beta1: float = 0.9
    beta2: float = 0.999
    lr0: float = 1e-4
    batch: int = 8
    patch: int = 128
    iters_per_epoch: int = 200
    epochs_pretrain: int = 10
    epochs_adv: int = 0
    decay_factor: float = 0.5
    decay_every: int = 50
    seed: int = 0
    # objective
    transitive_variant: str = "observed"
    adversarial: bool = True
    lambda_feat: float = 2e-5
    lambda_gan: float = 5e-2
    lambda_tran: float = 0.2
    off_pixel_weight: float = 1.4
    detach_predicted: bool = False
    per_level_loss: bool = False
    saturating_gan: bool = False
    # generator
    pyramid_levels: int = 4
    blocks_per_subnet: int = 9
    filters: int = 64
    kernel: int = 5
    head_mode: str = "direct"
    # discriminator
    disc_layers: int = 5
    disc_filters: int = 64
    # feature network
    feature_mode: str = "fixed_random"
    feature_layer: str = "relu2_2"
    feature_path: str = ""
    feature_width_divisor: int = 8
    # data
    max_gap: int = 3
    var_threshold: float = 0.005
    noise_sigma: float = 0.1
    rotate: bool = True
    flip: bool = True
    val_fraction: float = 0.1
    val_interval: int = 1
    val_max_triplets: int = 64
    eval_every: int = 1
    memory_budget: int = 8 * 256 * 256
    deterministic: bool = True

    def __post_init__(self):
        if self.transitive_variant not in VARIANTS:
            raise ValueError(f"transitive_variant must be one of {VARIANTS}, got {self.transitive_variant!r}")
        for name in ("lr0", "batch", "patch", "iters_per_epoch", "decay_factor", "decay_every",
                     "max_gap", "eval_every", "beta1", "beta2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs_pretrain < 0 or self.epochs_adv < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch * self.patch ** 2 > self.memory_budget:
            raise ValueError(f"batch*patch^2 = {self.batch * self.patch ** 2} exceeds memory_budget {self.memory_budget}")
        if self.patch % 2 ** (self.pyramid_levels - 1):
            raise ValueError(f"patch {self.patch} must be a multiple of 2^(S-1) = {2 ** (self.pyramid_levels - 1)}")
        self.generator_config()  # validates the generator fields

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.pyramid_levels, self.blocks_per_subnet, self.filters, self.kernel, self.head_mode)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.disc_layers, self.disc_filters)

    def loss_weights(self) -> LossWeights:
        lt = 0.0 if self.transitive_variant == "off" else self.lambda_tran
        return LossWeights(self.lambda_feat, self.lambda_gan if self.adversarial else 0.0, lt)

    def pixel_weight(self) -> float:
        return self.off_pixel_weight if self.transitive_variant == "off" else 1.0

    def feature_spec(self) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(self.feature_mode, self.feature_layer, self.seed,
                                    self.feature_path or None, self.feature_width_divisor)

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(rotations=(0, 90, 180, 270) if self.rotate else (0,),
                           hflip=self.flip, vflip=self.flip, crop=self.patch, noise_sigma=self.noise_sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: TrainConfig
    generator: dict[str, torch.Tensor]
    discriminator: dict[str, torch.Tensor] | None
    opt_g: dict | None
    opt_d: dict | None
    epoch: int = 0
    iteration: int = 0
    phase: str = "pretrain"
    adv_epoch: int = 0
    curves: list[dict] = field(default_factory=list)

    def build_generator(self) -> Generator:
        g = Generator(self.config.generator_config(), seed=None)
        g.load_state_dict(self.generator)
        return g


# ---------------------------------------------------------------------------
# checkpoint I/O


def _flatten_opt(prefix: str, state: dict, tensors: dict) -> dict:
    per_param = {}
    for pid, st in state["state"].items():
        entry = {}
        for key, value in st.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}/{pid}/{key}"] = value
            else:
                entry[key] = value
        per_param[str(pid)] = entry
    return {"param_groups": state["param_groups"], "scalars": per_param}


def _unflatten_opt(prefix: str, meta: dict, tensors: dict) -> dict:
    state: dict[int, dict] = {}
    for pid, entry in meta["scalars"].items():
        state[int(pid)] = dict(entry)
    for name, value in tensors.items():
        if name.startswith(prefix + "/"):
            _, pid, key = name.split("/", 2)
            state.setdefault(int(pid), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}


def checkpoint_to_archive(ckpt: Checkpoint) -> tuple[dict, dict]:
    tensors: dict[str, torch.Tensor] = {}
    for k, v in ckpt.generator.items():
        tensors[f"generator/{k}"] = v
    for k, v in (ckpt.discriminator or {}).items():
        tensors[f"discriminator/{k}"] = v
    meta: dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "generator_config": ckpt.config.generator_config().to_dict(),
        "seed": ckpt.config.seed,
        "epoch": ckpt.epoch,
        "iteration": ckpt.iteration,
        "phase": ckpt.phase,
        "adv_epoch": ckpt.adv_epoch,
        "curves": ckpt.curves,
        "has_discriminator": ckpt.discriminator is not None,
    }
    for name in ("opt_g", "opt_d"):
        state = getattr(ckpt, name)
        meta[name] = None if state is None else _flatten_opt(name, state, tensors)
    return tensors, meta


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, meta = checkpoint_to_archive(ckpt)
    archive.save(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = archive.load(path)
    if not isinstance(meta, dict) or meta.get("format") != CHECKPOINT_FORMAT:
        raise ArchiveError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")

    def group(prefix):
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}

    return Checkpoint(
        config=TrainConfig.from_dict(meta["config"]),
        generator=group("generator"),
        discriminator=group("discriminator") if meta["has_discriminator"] else None,
        opt_g=None if meta["opt_g"] is None else _unflatten_opt("opt_g", meta["opt_g"], tensors),
        opt_d=None if meta["opt_d"] is None else _unflatten_opt("opt_d", meta["opt_d"], tensors),
        epoch=meta["epoch"],
        iteration=meta["iteration"],
        phase=meta["phase"],
        adv_epoch=meta["adv_epoch"],
        curves=meta["curves"],
    )


def write_curves(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in CURVE_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return v


# ---------------------------------------------------------------------------
# trainer


@dataclass
class Batch:
    x1: torch.Tensor
    xp: torch.Tensor
    x2: torch.Tensor
    t1: torch.Tensor
    tp: torch.Tensor
    t2: torch.Tensor

    @property
    def ratio(self) -> torch.Tensor:
        return ((self.tp - self.t1) / (self.t2 - self.t1)).float()


class Trainer:
    """Owns the generator/discriminator parameters and their optimizers (single writer)."""

    def __init__(self, cfg: TrainConfig, train_videos: Sequence[VideoSequence],
                 val_videos: Sequence[VideoSequence] = (), checkpoint: Checkpoint | None = None):
        if not train_videos:
            raise ValueError("training corpus is empty")
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.cfg = cfg
        self.train_videos = list(train_videos)
        self.val_videos = list(val_videos)
        self.weights = cfg.loss_weights()
        self.generator = Generator(cfg.generator_config(), seed=cfg.seed)
        self.discriminator = Discriminator(cfg.discriminator_config(), seed=cfg.seed + 1) if cfg.adversarial else None
        self.phi = build_feature_extractor(cfg.feature_spec()) if cfg.lambda_feat > 0 else None
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr0, betas=betas)
        self.opt_d = (torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr0, betas=betas)
                      if self.discriminator is not None else None)
        self.epoch = 0
        self.adv_epoch = 0
        self.iteration = 0
        self.phase = "pretrain"
        self.curves: list[dict] = []
        self._val_triplets = None
        if checkpoint is not None:
            self._restore(checkpoint)

    # -- state ------------------------------------------------------------

    def _restore(self, ckpt: Checkpoint):
        self.generator.load_state_dict(ckpt.generator)
        self.opt_g.load_state_dict(ckpt.opt_g)
        if self.discriminator is not None and ckpt.discriminator is not None:
            self.discriminator.load_state_dict(ckpt.discriminator)
            if ckpt.opt_d is not None:
                self.opt_d.load_state_dict(ckpt.opt_d)
        self.epoch, self.iteration = ckpt.epoch, ckpt.iteration
        self.phase, self.adv_epoch = ckpt.phase, ckpt.adv_epoch
        self.curves = [dict(r) for r in ckpt.curves]

    def checkpoint(self) -> Checkpoint:
        def clone(sd):
            return {k: v.detach().clone() for k, v in sd.items()}
        return Checkpoint(
            config=self.cfg,
            generator=clone(self.generator.state_dict()),
            discriminator=clone(self.discriminator.state_dict()) if self.discriminator is not None else None,
            opt_g=_clone_opt(self.opt_g.state_dict()),
            opt_d=_clone_opt(self.opt_d.state_dict()) if self.opt_d is not None else None,
            epoch=self.epoch, iteration=self.iteration, phase=self.phase, adv_epoch=self.adv_epoch,
            curves=[dict(r) for r in self.curves],
        )

    # -- data -------------------------------------------------------------

    def make_batch(self, iteration: int) -> Batch:
        cfg = self.cfg
        spec = cfg.augment_spec()
        samples = [draw_training_sample(self.train_videos, cfg.seed, iteration * cfg.batch + k,
                                        cfg.max_gap, spec, cfg.var_threshold)
                   for k in range(cfg.batch)]
        stack = lambda name: to_tensor(np.stack([getattr(s, name) for s in samples]))
        times = lambda name: torch.tensor([getattr(s, name) for s in samples], dtype=torch.float64)
        return Batch(stack("x1"), stack("xp"), stack("x2"), times("t1"), times("tp"), times("t2"))

    # -- objectives -------------------------------------------------------

    def generator_losses(self, b: Batch, use_gan: bool) -> dict[str, torch.Tensor]:
        cfg, G = self.cfg, self.generator
        outs = G(b.x1, b.x2, b.ratio, return_levels=True)
        y = outs[-1]
        l_pix = pixel_loss(y, b.xp)
        if cfg.per_level_loss:
            targets = downsample_pyramid(b.xp, len(outs))
            l_pix = l_pix + sum(pixel_loss(o, t) for o, t in zip(outs[:-1], targets[:-1]))
        zero = y.new_zeros(())
        l_feat = feature_loss(y, b.xp, self.phi) if self.phi is not None else zero
        variant = cfg.transitive_variant
        if variant in ("predicted", "observed"):
            l_tran = transitive_loss(lambda a, c, r: G(a, c, r.float()), b.x1, b.x2, b.xp,
                                     b.t1, b.t2, b.tp, variant=variant, y=y, detach=cfg.detach_predicted)
        elif variant in ("tv", "weighted_tv"):
            l_tran = temporal_tv_loss(y, b.x1, b.x2, b.t1, b.t2, b.tp, weighted=variant == "weighted_tv")
        else:
            l_tran = zero
        parts = {"y": y, "loss_pix": l_pix, "loss_feat": l_feat, "loss_gan": zero, "loss_tran": l_tran}
        if use_gan:
            self.add_gan_term(parts)
        return self._compose(parts)

    def add_gan_term(self, parts: dict) -> None:
        if self.weights.lambda_gan > 0:
            _, parts["loss_gan"] = gan_losses(parts["y"].new_zeros(()), self.discriminator(parts["y"]),
                                              saturating=self.cfg.saturating_gan)

    def _compose(self, parts: dict) -> dict:
        parts["loss_total"] = total_objective(parts["loss_pix"], parts["loss_feat"], parts["loss_gan"],
                                              parts["loss_tran"], self.weights, self.cfg.pixel_weight())
        return parts

    def _check_finite(self, value: torch.Tensor, what: str):
        if not torch.isfinite(value):
            raise TrainingDiverged(f"{what} became non-finite at iteration {self.iteration}")

    def pretrain_step(self, b: Batch) -> dict[str, float]:
        self.generator.train()
        parts = self.generator_losses(b, use_gan=False)
        self._check_finite(parts["loss_total"], "generator loss")
        self.opt_g.zero_grad(set_to_none=True)
        parts["loss_total"].backward()
        self.opt_g.step()
        return _scalars(parts, b)

    def adversarial_step(self, b: Batch, train_generator: bool = True) -> dict[str, float]:
        """One discriminator update followed by one generator update."""
        D = self.discriminator
        with torch.no_grad() if not train_generator else torch.enable_grad():
            parts = self.generator_losses(b, use_gan=False)
        y = parts["y"]
        loss_d, _ = gan_losses(D(b.xp), D(y.detach()), saturating=self.cfg.saturating_gan)
        self._check_finite(loss_d, "discriminator loss")
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()
        if train_generator:
            self.add_gan_term(parts)
            self._compose(parts)
            self._check_finite(parts["loss_total"], "generator loss")
            self.opt_g.zero_grad(set_to_none=True)
            parts["loss_total"].backward()
            self.opt_g.step()
        out = _scalars(parts, b)
        out["loss_d"] = float(loss_d.detach())
        return out

    def adversarial_lr(self) -> float:
        return self.cfg.lr0 * self.cfg.decay_factor ** (self.adv_epoch // self.cfg.decay_every)

    # -- loops ------------------------------------------------------------

    def run_epoch(self, adversarial: bool, train_generator: bool = True) -> dict[str, float]:
        cfg = self.cfg
        if adversarial:
            lr = self.adversarial_lr()
            for opt in (self.opt_g, self.opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
        acc: dict[str, list[float]] = {}
        for _ in range(cfg.iters_per_epoch):
            b = self.make_batch(self.iteration)
            stats = self.adversarial_step(b, train_generator) if adversarial else self.pretrain_step(b)
            self.iteration += 1
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
        self.epoch += 1
        if adversarial:
            self.adv_epoch += 1
        means = {k: float(np.mean(v)) for k, v in acc.items()}
        self.curves.append({"epoch": self.epoch, "split": "train", "psnr": means.get("psnr"), "ssim": None,
                            **{k: means.get(k) for k in CURVE_COLUMNS[4:]}})
        if self.val_videos and self.epoch % cfg.eval_every == 0:
            p, s = self.validate()
            self.curves.append({"epoch": self.epoch, "split": "val", "psnr": p, "ssim": s})
            log.info("epoch %d (%s): train loss %.5f, val PSNR %.3f dB", self.epoch,
                     "adv" if adversarial else "pretrain", means["loss_total"], p)
        return means

    def val_triplets(self):
        if self._val_triplets is None:
            trips = [t for v in self.val_videos for t in evaluation_triplets(v, self.cfg.val_interval)]
            m = self.cfg.val_max_triplets
            if m and len(trips) > m:
                idx = np.linspace(0, len(trips) - 1, m).round().astype(int)
                trips = [trips[i] for i in idx]
            self._val_triplets = trips
        return self._val_triplets

    def validate(self) -> tuple[float, float]:
        self.generator.eval()
        return evaluate_triplets(self.generator, self.val_triplets())

    def pretrain(self, epochs: int | None = None):
        epochs = self.cfg.epochs_pretrain if epochs is None else epochs
        for _ in range(epochs):
            self.run_epoch(adversarial=False)
        return self

    def adversarial(self, epochs: int | None = None, train_generator: bool = True):
        if self.discriminator is None:
            raise ValueError("adversarial training requested but cfg.adversarial is False")
        self.phase = "adversarial"
        epochs = self.cfg.epochs_adv if epochs is None else epochs
        for _ in range(epochs):
            self.run_epoch(adversarial=True, train_generator=train_generator)
        return self


def _clone_opt(sd: dict) -> dict:
    return {
        "state": {k: {n: (v.detach().clone() if torch.is_tensor(v) else v) for n, v in st.items()}
                  for k, st in sd["state"].items()},
        "param_groups": [dict(g, params=list(g["params"]), betas=list(g["betas"])) for g in sd["param_groups"]],
    }


def _batch_psnr(y: torch.Tensor, target: torch.Tensor) -> float:
    mse = ((y.detach().double() - target.double()) ** 2).flatten(1).mean(1)
    return float((10 * torch.log10(1.0 / mse.clamp_min(1e-20))).mean())


def _scalars(parts: dict, b: Batch) -> dict[str, float]:
    out = {k: float(v.detach()) for k, v in parts.items() if k.startswith("loss_")}
    out["psnr"] = _batch_psnr(parts["y"], b.xp)
    return out


# ---------------------------------------------------------------------------
# top-level entry points


def pretrain_generator(corpus: Sequence[VideoSequence], cfg: TrainConfig, val: Sequence[VideoSequence] | None = None):
    """Generator-only optimization (no adversarial term).  Returns ``(checkpoint, curves)``."""
    if not corpus:
        raise ValueError("corpus is empty")
    if val is None:
        corpus, val = split_corpus(list(corpus), cfg.seed, cfg.val_fraction)
    trainer = Trainer(cfg, corpus, val).pretrain()
    ckpt = trainer.checkpoint()
    return ckpt, ckpt.curves


def adversarial_train(ckpt: Checkpoint, corpus: Sequence[VideoSequence], cfg: TrainConfig | None = None,
                      val: Sequence[VideoSequence] | None = None, train_generator: bool = True):
    """Continue from a pretrain checkpoint with alternating D/G updates.  Returns ``(checkpoint, curves)``."""
    cfg = cfg or ckpt.config
    if val is None:
        corpus, val = split_corpus(list(corpus), cfg.seed, cfg.val_fraction)
    trainer = Trainer(cfg, corpus, val, checkpoint=ckpt)
    trainer.adversarial(train_generator=train_generator)
    out = trainer.checkpoint()
    return out, out.curves
