"""Alternating end-to-end optimisation of {coarse generator, booster} against D.

A cycle is ``generator_steps`` generator updates on fresh batches followed by
``discriminator_steps`` discriminator updates.  Discriminator updates reuse
the images generated by the last generator update, detached.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .booster import Booster, boost_forward, parameter_audit
from .discriminator import Discriminator, DiscriminatorConfig
from .facedata import DatasetManifest, load_manifest, make_batch, sample_seed
from .generator import CoarseGenerator, GeneratorConfig, coarse_forward_quadruple, describe, images_to_tensor
from .identity import IdentityExtractor, load_frozen, train_standin
from .losses import (GeneratedSet, LossWeights, adv_d_loss, generator_components,
                     total_generator_loss, TrainingFault)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = "runs/boostgan"
    batch_size: int = 4
    generator_steps: int = 2
    discriminator_steps: int = 1
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    total_steps: int = 1000
    checkpoint_every: int = 0
    seed: int = 0
    mode: str = "keypoint"
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    extractor: Optional[str] = None
    extractor_epochs: int = 20
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.generator_steps < 1:
            raise ConfigError("generator_steps: must be >= 1")
        if self.discriminator_steps < 1:
            raise ConfigError("discriminator_steps: must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps: must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be >= 0")
        if self.mode not in ("keypoint", "random"):
            raise ConfigError(f"mode: expected 'keypoint' or 'random', got {self.mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: expected one of {sorted(DTYPES)}, got {self.dtype!r}")
        for name in ("lr_g", "lr_d"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if self.generator.image_size != self.discriminator.image_size:
            raise ConfigError("generator.image_size and discriminator.image_size differ")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["betas"] = list(self.betas)
        d["weights"] = self.weights.as_dict()
        d["generator"] = self.generator.to_json()
        d["discriminator"] = self.discriminator.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            if "weights" in d:
                d["weights"] = _strict(LossWeights, d["weights"], "weights")
            if "generator" in d:
                d["generator"] = GeneratorConfig.from_json(_checked(GeneratorConfig, d["generator"], "generator"))
            if "discriminator" in d:
                d["discriminator"] = DiscriminatorConfig.from_json(
                    _checked(DiscriminatorConfig, d["discriminator"], "discriminator"))
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_json(data)


def _checked(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    merged = {**defaults, **d}
    if "widths" in merged:
        merged["widths"] = list(merged["widths"])
    return merged


def _strict(cls, d, where):
    _checked(cls, d, where)
    try:
        return cls(**d)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class Models:
    generator: CoarseGenerator
    booster: Booster
    discriminator: Discriminator
    extractor: IdentityExtractor

    def generate(self, quads: torch.Tensor) -> GeneratedSet:
        """``quads`` is (4, N, 3, H, W)."""
        coarse = coarse_forward_quadruple(self.generator, quads)
        boosted = boost_forward(self.booster, [c.full for c in coarse])
        return GeneratedSet(coarse, boosted)

    def g_params(self):
        return list(self.generator.parameters()) + list(self.booster.parameters())


@dataclass
class TrainState:
    config: TrainConfig
    models: Models
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    manifest: DatasetManifest
    step: int = 0
    cursor: int = 0


def build_models(config: TrainConfig, extractor: IdentityExtractor) -> Models:
    torch.manual_seed(config.seed)
    dtype = config.torch_dtype
    gen = CoarseGenerator(config.generator).to(dtype)
    boost = Booster(config.generator.image_size).to(dtype)
    disc = Discriminator(config.discriminator).to(dtype)
    return Models(gen, boost, disc, extractor.to(dtype).freeze())


def _optimizers(config: TrainConfig, models: Models):
    opt_g = torch.optim.Adam(models.g_params(), lr=config.lr_g, betas=tuple(config.betas))
    opt_d = torch.optim.Adam(models.discriminator.parameters(), lr=config.lr_d, betas=tuple(config.betas))
    return opt_g, opt_d


def init_state(config: TrainConfig, manifest: DatasetManifest = None,
               extractor: IdentityExtractor = None) -> TrainState:
    if manifest is None:
        manifest = load_manifest(config.manifest)
    if len(manifest) == 0:
        raise ConfigError("manifest: no records")
    if extractor is None:
        extractor = (load_extractor(config.extractor) if config.extractor
                     else train_standin(manifest, config.extractor_epochs, config.seed))
    if not extractor.frozen:
        raise ConfigError("extractor: must be frozen before training")
    models = build_models(config, extractor)
    opt_g, opt_d = _optimizers(config, models)
    return TrainState(config, models, opt_g, opt_d, manifest)


# ------------------------------------------------------------------ data order

def next_indices(state: TrainState, count: int) -> Tuple[List[int], int]:
    """Advance the data cursor by ``count`` samples of a per-epoch seeded shuffle.

    Returns the indices and the epoch of the first sample (used to seed masks).
    """
    n = len(state.manifest)
    out = []
    epoch0 = state.cursor // n
    for _ in range(count):
        epoch, pos = divmod(state.cursor, n)
        perm = np.random.default_rng([state.config.seed, epoch]).permutation(n)
        out.append(int(perm[pos]))
        state.cursor += 1
    return out, epoch0


def fetch_batch(state: TrainState):
    """Next training batch as tensors: (quads (4, N, 3, H, W), gt (N, 3, H, W))."""
    indices, epoch = next_indices(state, state.config.batch_size)
    pairs = make_batch(state.manifest, indices, state.config.mode,
                       sample_seed(state.config.seed, epoch))
    return batch_tensors(pairs, state.config.torch_dtype)


def batch_tensors(pairs, dtype=torch.float32):
    quads = torch.stack([images_to_tensor(q.images, dtype) for q, _ in pairs], dim=1)
    gt = images_to_tensor([s.frontal_gt for _, s in pairs], dtype)
    return quads, gt


# ------------------------------------------------------------------ updates

def generator_step(state: TrainState, quads, gt) -> Tuple[dict, GeneratedSet]:
    m = state.models
    m.generator.train()
    m.booster.train()
    m.discriminator.requires_grad_(False)
    try:
        gen = m.generate(quads)
        comps = generator_components(m.discriminator, m.extractor, gen, gt)
        total, breakdown = total_generator_loss(state.config.weights, comps)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
    finally:
        m.discriminator.requires_grad_(True)
    return breakdown, gen.detach()


def discriminator_step(state: TrainState, gt, gen: GeneratedSet) -> dict:
    loss = adv_d_loss(state.models.discriminator, gt, gen)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingFault(f"loss component 'adv_d' is not finite ({value})")
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    return {"adv_d": value, "total": value}


def train_cycle(state: TrainState, batches: Optional[Sequence] = None) -> List[dict]:
    """One alternation: generator updates then discriminator updates.

    ``batches`` supplies one (quads, gt) pair per generator update; by default
    they come from the seeded data order.  Returns one log record per update.
    """
    cfg = state.config
    records = []
    gen = gt = None
    for k in range(cfg.generator_steps):
        quads, gt = batches[k] if batches is not None else fetch_batch(state)
        breakdown, gen = generator_step(state, quads, gt)
        records.append({"step": state.step, "phase": "g", "update": k, **breakdown})
    for k in range(cfg.discriminator_steps):
        records.append({"step": state.step, "phase": "d", "update": k,
                        **discriminator_step(state, gt, gen)})
    state.step += 1
    return records


# ------------------------------------------------------------------ checkpoints

def save_state(state: TrainState, path) -> None:
    m = state.models
    namespaces = {
        "generator": ckpt.module_entry(m.generator, m.generator.config.to_json(), describe(m.generator)),
        "booster": ckpt.module_entry(m.booster, {"image_size": m.booster.image_size},
                                     parameter_audit(m.booster)),
        "discriminator": ckpt.module_entry(m.discriminator, m.discriminator.config.to_json()),
        "extractor": ckpt.module_entry(m.extractor, m.extractor.descriptor()),
        "optim_g": {"state": state.opt_g.state_dict()},
        "optim_d": {"state": state.opt_d.state_dict()},
    }
    meta = {"step": state.step, "cursor": state.cursor, "config": state.config.to_json()}
    ckpt.save_container(path, namespaces, meta)


def load_state(path, config: Optional[TrainConfig] = None,
               manifest: Optional[DatasetManifest] = None) -> TrainState:
    """Rebuild a training state from a checkpoint.

    If ``config`` is given its architecture must match the checkpoint.  Nothing
    is mutated unless the whole checkpoint loads.
    """
    blob = ckpt.load_container(path)
    meta = blob.get("meta", {})
    try:
        stored = TrainConfig.from_json(meta["config"])
        step, cursor = int(meta["step"]), int(meta["cursor"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise ckpt.CheckpointError(f"{path}: bad training metadata ({exc})") from None
    if config is None:
        config = stored
    elif (config.generator != stored.generator or config.discriminator != stored.discriminator
          or config.dtype != stored.dtype):
        raise ckpt.CheckpointError(f"{path}: checkpoint architecture does not match the config")
    ext_entry = ckpt.namespace(blob, "extractor", path)
    try:
        extractor = load_frozen(ext_entry["config"], ext_entry["state"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise ckpt.CheckpointError(f"{path}: bad extractor entry ({exc})") from None
    models = build_models(config, extractor)
    restore_models(blob, models, path)
    opt_g, opt_d = _optimizers(config, models)
    try:
        opt_g.load_state_dict(ckpt.namespace(blob, "optim_g", path)["state"])
        opt_d.load_state_dict(ckpt.namespace(blob, "optim_d", path)["state"])
    except (KeyError, ValueError, RuntimeError) as exc:
        raise ckpt.CheckpointError(f"{path}: bad optimizer state ({exc})") from None
    if manifest is None:
        manifest = load_manifest(config.manifest)
    return TrainState(config, models, opt_g, opt_d, manifest, step, cursor)


def restore_models(blob: dict, models: Models, path="checkpoint") -> None:
    ckpt.restore_module(models.generator, ckpt.namespace(blob, "generator", path),
                        describe(models.generator), "generator")
    ckpt.restore_module(models.booster, ckpt.namespace(blob, "booster", path),
                        parameter_audit(models.booster), "booster")
    ckpt.restore_module(models.discriminator, ckpt.namespace(blob, "discriminator", path),
                        name="discriminator")


def load_generators(path, dtype=torch.float32) -> Tuple[CoarseGenerator, Booster]:
    """Generator and booster from a training checkpoint, in inference mode."""
    blob = ckpt.load_container(path)
    g_entry = ckpt.namespace(blob, "generator", path)
    b_entry = ckpt.namespace(blob, "booster", path)
    try:
        gen = CoarseGenerator(GeneratorConfig.from_json(g_entry["config"])).to(dtype)
        boost = Booster(int(b_entry["config"]["image_size"])).to(dtype)
    except (KeyError, TypeError, ValueError) as exc:
        raise ckpt.CheckpointError(f"{path}: bad generator config ({exc})") from None
    ckpt.restore_module(gen, g_entry, describe(gen), "generator")
    ckpt.restore_module(boost, b_entry, parameter_audit(boost), "booster")
    return gen.eval(), boost.eval()


def save_extractor(extractor: IdentityExtractor, path) -> None:
    ckpt.save_container(path, {"extractor": ckpt.module_entry(extractor, extractor.descriptor())})


def load_extractor(path, dtype=None) -> IdentityExtractor:
    blob = ckpt.load_container(path)
    entry = ckpt.namespace(blob, "extractor", path)
    try:
        return load_frozen(entry["config"], entry["state"], dtype)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise ckpt.CheckpointError(f"{path}: bad extractor entry ({exc})") from None


# ------------------------------------------------------------------ driver

def train(config: TrainConfig, state: Optional[TrainState] = None, progress=None) -> Path:
    """Run cycles up to ``config.total_steps``; returns the final checkpoint path.

    With ``total_steps == 0`` only the initial checkpoint is written.

    Writes ``metrics.jsonl`` (one line per update) and checkpoints into
    ``config.out_dir``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = init_state(config)
    metrics = out / "metrics.jsonl"
    if state.step == 0:
        save_state(state, out / "ckpt_000000.pt")
        metrics.write_text("")
        if config.total_steps == 0:
            return out / "ckpt_000000.pt"
    t0 = time.time()
    with open(metrics, "a") as fh:
        while state.step < config.total_steps:
            records = train_cycle(state)
            for r in records:
                fh.write(json.dumps(r) + "\n")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(state, out / f"ckpt_{state.step:06d}.pt")
            if progress is not None:
                progress(state, records)
            elif state.step % 50 == 0:
                log.info("cycle %d  pix %.4f  total %.3f  (%.1fs)", state.step,
                         records[0]["pix"], records[0]["total"], time.time() - t0)
    final = out / "final.pt"
    save_state(state, final)
    return final
