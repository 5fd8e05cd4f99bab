"""Three-stage training: conditioned diffusion, alignment, finetune.

Stage I trains the denoiser, conditioning branch, and one feature
extractor jointly on the noise-prediction loss, conditioned either on the
target background crop (stage1_bg) or on the panorama thumbnail
(stage1_env). Stage II (align) freezes everything and trains only the
alignment network with an elementwise L1 between aligned background
features and environment features. Assembly fuses the env-trained
denoiser with the bg extractor and the alignment net without touching
weights. The finetune stage updates only the denoiser on a mix of
light-stage and synthesized pairs.

Configuration is a nested-dict YAML file; every field has a default and
the full effective config is dumpable. Checkpoints are self-describing
torch archives: stage tag, config, schedule, per-module state dicts,
step counter, seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import dataset
from .conditioning import (
    AlignmentNet,
    ConditionedDenoiser,
    ConditioningBranch,
    ExtractorConfig,
    FeatureExtractor,
)
from .diffusion import DenoiserConfig, NoiseSchedule, UNet, make_schedule, q_sample
from .simulate import DataConfig

CKPT_FORMAT = "lightblend-ckpt-1"
STAGES = ("stage1_bg", "stage1_env", "align", "final", "finetuned")

# Freeze-set descriptor per stage: which module groups stay untouched.
STAGE_FREEZE = {
    "stage1_bg": "none",
    "stage1_env": "none",
    "align": "all-except-align",
    "finetune": "all-except-unet",
}


def default_config() -> dict:
    """The full default configuration; also the documented schema."""
    return {
        "data": {
            "size": 64,
            "env_height": 64,
            "n_subjects": 10,
            "n_envs": 20,
            "fov_min_deg": 45.0,
            "fov_max_deg": 75.0,
            "pitch_max": 0.25,
            "allow_specular": True,
            "kinds": ["sphere", "capsule", "bust"],
            "min_blobs": 1,
            "max_blobs": 3,
        },
        "model": {
            "base_width": 32,
            "channel_mults": [1, 2, 2, 4],
            "blocks_per_level": 1,
            "emb_dim": 64,
            "feature_channels": 64,
            "extractor_hidden": 32,
        },
        "schedule": {"T": 1000, "kind": "linear"},
        "train": {
            "steps": 2000,
            "batch_size": 4,
            "lr": 5.0e-5,
            "seed": 0,
            "log_every": 10,
            "ckpt_every": 500,
            "holdout_frac": 0.1,
            "mix_ratio": 2.0,
        },
        "sample": {"steps": 20, "mode": "ddim", "seed": 0},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        full = f"{path}.{key}" if path else key
        if key not in out:
            raise KeyError(f"unknown config key: {full}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ValueError(f"config key {full} must be a mapping")
            out[key] = _merge(out[key], val, full)
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, overlaid by the YAML file, overlaid by ``overrides``."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config root must be a mapping in {path}")
        cfg = _merge(cfg, loaded)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def data_config(cfg: dict) -> DataConfig:
    d = cfg["data"]
    return DataConfig(
        size=d["size"],
        env_height=d["env_height"],
        n_subjects=d["n_subjects"],
        n_envs=d["n_envs"],
        fov_min_deg=d["fov_min_deg"],
        fov_max_deg=d["fov_max_deg"],
        pitch_max=d["pitch_max"],
        allow_specular=d["allow_specular"],
        kinds=tuple(d["kinds"]),
        min_blobs=d["min_blobs"],
        max_blobs=d["max_blobs"],
    )


def denoiser_config(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(
        size=cfg["data"]["size"],
        base_width=m["base_width"],
        channel_mults=tuple(m["channel_mults"]),
        blocks_per_level=m["blocks_per_level"],
        emb_dim=m["emb_dim"],
        feature_channels=m["feature_channels"],
    )


def extractor_config(cfg: dict) -> ExtractorConfig:
    return ExtractorConfig(
        size=cfg["data"]["size"],
        channels=cfg["model"]["feature_channels"],
        hidden=cfg["model"]["extractor_hidden"],
    )


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    return make_schedule(cfg["schedule"]["T"], cfg["schedule"]["kind"])


@dataclass
class StageConfig:
    """Resolved per-stage settings; freeze set is fixed by the stage."""

    stage: str
    dataset: str
    steps: int
    batch_size: int
    lr: float
    seed: int
    freeze: str
    extra_dataset: str | None = None  # finetune: synthesized data directory

    def __post_init__(self):
        if self.stage not in STAGE_FREEZE:
            raise ValueError(f"unknown training stage {self.stage!r}")
        if self.freeze != STAGE_FREEZE[self.stage]:
            raise ValueError(
                f"freeze set {self.freeze!r} inconsistent with stage {self.stage!r}"
            )


def stage_config(cfg: dict, stage: str, dataset_dir: str, extra: str | None = None) -> StageConfig:
    t = cfg["train"]
    return StageConfig(
        stage=stage,
        dataset=str(dataset_dir),
        steps=t["steps"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        seed=t["seed"],
        freeze=STAGE_FREEZE[stage],
        extra_dataset=str(extra) if extra else None,
    )


@dataclass
class LossRecord:
    step: int
    loss: float
    seconds: float


def write_loss_records(path: str | Path, records: list[LossRecord], append: bool = False) -> None:
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as f:
        if mode == "w":
            f.write("step\tloss\tseconds\n")
        for r in records:
            f.write(f"{r.step}\t{r.loss:.8f}\t{r.seconds:.3f}\n")


def read_loss_records(path: str | Path) -> list[LossRecord]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        step, loss, seconds = line.split("\t")
        out.append(LossRecord(int(step), float(loss), float(seconds)))
    return out


@dataclass
class Checkpoint:
    """Self-describing training artifact."""

    stage: str
    config: dict
    step: int
    seed: int
    weights: dict[str, dict]
    optimizer: dict | None = None
    rng_state: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown checkpoint stage {self.stage!r}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "weights": ckpt.weights,
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a recognized checkpoint: {path}")
    return Checkpoint(
        stage=payload["stage"],
        config=payload["config"],
        step=payload["step"],
        seed=payload["seed"],
        weights=payload["weights"],
        optimizer=payload.get("optimizer"),
        rng_state=payload.get("rng_state"),
        meta=payload.get("meta", {}),
    )


def checkpoint_file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def build_stage1_models(cfg: dict) -> dict[str, torch.nn.Module]:
    return {
        "unet": UNet(denoiser_config(cfg)),
        "branch": ConditioningBranch(denoiser_config(cfg)),
        "extractor": FeatureExtractor(extractor_config(cfg)),
    }


def build_align_model(cfg: dict) -> AlignmentNet:
    return AlignmentNet(cfg["model"]["feature_channels"])


@dataclass
class Tensors:
    """Dataset in model space: x0/x_a in [-1, 1], cond images in [0, 1]."""

    x0: torch.Tensor
    x_a: torch.Tensor
    mask: torch.Tensor
    y_b: torch.Tensor
    z_thumb: torch.Tensor

    def __len__(self) -> int:
        return self.x0.shape[0]


def dataset_tensors(root: str | Path) -> Tensors:
    arr = dataset.load_arrays(root)

    def chw(a: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))

    return Tensors(
        x0=chw(arr.x_b) * 2.0 - 1.0,
        x_a=chw(arr.x_a) * 2.0 - 1.0,
        mask=torch.from_numpy(arr.mask).unsqueeze(1),
        y_b=chw(arr.y_b),
        z_thumb=chw(arr.z_thumb),
    )


def diffusion_loss(
    unet: torch.nn.Module,
    branch: torch.nn.Module,
    extractor: torch.nn.Module,
    sched: NoiseSchedule,
    x0: torch.Tensor,
    x_a: torch.Tensor,
    m: torch.Tensor,
    cond: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Noise-prediction objective for the conditioned denoiser.

    Mean squared error between the true noise and the prediction from the
    noisy target, the input composite, the mask, and the lighting feature
    extracted from ``cond``.
    """
    x_t = q_sample(x0, t, eps, sched)
    f = extractor(cond)
    residuals = branch(f, x_t, t)
    eps_hat = unet(x_t, t, x_a, m, residuals)
    return torch.mean((eps_hat - eps) ** 2)


def _adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr)


def _abort_if_nan(loss: torch.Tensor, step: int, lr: float) -> None:
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss at step {step} (lr {lr:g})")


def train_stage1(
    dataset_dir: str | Path,
    cond_source: str,
    cfg: dict,
    out_path: str | Path,
    resume: str | Path | None = None,
) -> tuple[Checkpoint, list[LossRecord]]:
    """Stage I: jointly train denoiser, branch, and one extractor.

    ``cond_source`` is "bg" (condition on the target background crop) or
    "env" (condition on the panorama thumbnail). Emits an append-only
    loss TSV next to the checkpoint and periodic resumable checkpoints.
    """
    if cond_source not in ("bg", "env"):
        raise ValueError(f"cond_source must be 'bg' or 'env', got {cond_source!r}")
    stage = f"stage1_{cond_source}"
    sc = stage_config(cfg, stage, dataset_dir)
    data = dataset_tensors(dataset_dir)
    cond_all = data.y_b if cond_source == "bg" else data.z_thumb
    sched = schedule_from_config(cfg)
    torch.manual_seed(sc.seed)  # weight init; same seed, same run
    models = build_stage1_models(cfg)
    gen = torch.Generator().manual_seed(sc.seed)
    start_step = 0
    params = [p for mdl in models.values() for p in mdl.parameters()]
    opt = _adam(params, sc.lr)
    if resume is not None:
        prev = load_checkpoint(resume)
        if prev.stage != stage:
            raise ValueError(f"resume checkpoint stage {prev.stage!r} != {stage!r}")
        for name, mdl in models.items():
            mdl.load_state_dict(prev.weights[name])
        if prev.optimizer is not None:
            opt.load_state_dict(prev.optimizer)
        if prev.rng_state is not None:
            gen.set_state(prev.rng_state)
        start_step = prev.step

    records: list[LossRecord] = []
    t0 = time.perf_counter()
    loss_path = Path(str(out_path) + ".loss.tsv")

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            stage=stage,
            config=cfg,
            step=step,
            seed=sc.seed,
            weights={n: m.state_dict() for n, m in models.items()},
            optimizer=opt.state_dict(),
            rng_state=gen.get_state(),
            meta={"cond_source": cond_source, "dataset": str(dataset_dir)},
        )

    n = len(data)
    for step in range(start_step + 1, sc.steps + 1):
        idx = torch.randint(n, (sc.batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (sc.batch_size,), generator=gen)
        eps = torch.randn((sc.batch_size, 3, data.x0.shape[2], data.x0.shape[3]), generator=gen)
        loss = diffusion_loss(
            models["unet"],
            models["branch"],
            models["extractor"],
            sched,
            data.x0[idx],
            data.x_a[idx],
            data.mask[idx],
            cond_all[idx],
            t,
            eps,
        )
        _abort_if_nan(loss, step, sc.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(LossRecord(step, float(loss.detach()), time.perf_counter() - t0))
        if step % cfg["train"]["ckpt_every"] == 0 and step < sc.steps:
            save_checkpoint(snapshot(step), out_path)
            write_loss_records(loss_path, records, append=start_step > 0)
            start_step = step  # records already flushed up to here
            records = []

    ckpt = snapshot(sc.steps)
    save_checkpoint(ckpt, out_path)
    write_loss_records(loss_path, records, append=start_step > 0)
    return ckpt, read_loss_records(loss_path)


def _restore_stage1(ckpt: Checkpoint) -> dict[str, torch.nn.Module]:
    models = build_stage1_models(ckpt.config)
    for name, mdl in models.items():
        mdl.load_state_dict(ckpt.weights[name])
    return models


def train_align(
    dataset_dir: str | Path,
    bg_ckpt_path: str | Path,
    env_ckpt_path: str | Path,
    cfg: dict,
    out_path: str | Path,
) -> tuple[Checkpoint, list[LossRecord]]:
    """Stage II: train only the alignment net on frozen feature pairs.

    Background features come from the stage1_bg extractor, environment
    features from the stage1_env extractor; both are precomputed with
    gradients disabled, so the frozen networks cannot move. A held-out
    split reports mean L1 of the aligned features against the identity
    baseline L1(f_bg, f_env); both go into checkpoint meta.
    """
    bg_ckpt = load_checkpoint(bg_ckpt_path)
    env_ckpt = load_checkpoint(env_ckpt_path)
    if bg_ckpt.stage != "stage1_bg":
        raise ValueError(f"expected a stage1_bg checkpoint, got {bg_ckpt.stage!r}")
    if env_ckpt.stage != "stage1_env":
        raise ValueError(f"expected a stage1_env checkpoint, got {env_ckpt.stage!r}")
    sc = stage_config(cfg, "align", dataset_dir)
    data = dataset_tensors(dataset_dir)
    f_bg_net = FeatureExtractor(extractor_config(bg_ckpt.config))
    f_bg_net.load_state_dict(bg_ckpt.weights["extractor"])
    f_env_net = FeatureExtractor(extractor_config(env_ckpt.config))
    f_env_net.load_state_dict(env_ckpt.weights["extractor"])
    f_bg_net.eval()
    f_env_net.eval()
    with torch.no_grad():
        f_bg = torch.cat(
            [f_bg_net(data.y_b[i : i + 64]) for i in range(0, len(data), 64)]
        )
        f_env = torch.cat(
            [f_env_net(data.z_thumb[i : i + 64]) for i in range(0, len(data), 64)]
        )

    rng = np.random.Generator(np.random.PCG64(sc.seed))
    perm = rng.permutation(len(data))
    n_hold = max(1, int(len(data) * cfg["train"]["holdout_frac"]))
    hold_idx = torch.from_numpy(perm[:n_hold].copy())
    train_idx = torch.from_numpy(perm[n_hold:].copy())

    torch.manual_seed(sc.seed)  # weight init; same seed, same run
    align = AlignmentNet(cfg["model"]["feature_channels"])
    gen = torch.Generator().manual_seed(sc.seed)
    opt = _adam(align.parameters(), sc.lr)
    records: list[LossRecord] = []
    t0 = time.perf_counter()
    for step in range(1, sc.steps + 1):
        pick = train_idx[torch.randint(len(train_idx), (sc.batch_size,), generator=gen)]
        loss = torch.mean(torch.abs(align(f_bg[pick]) - f_env[pick]))
        _abort_if_nan(loss, step, sc.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(LossRecord(step, float(loss.detach()), time.perf_counter() - t0))

    align.eval()
    with torch.no_grad():
        holdout_l1 = float(torch.mean(torch.abs(align(f_bg[hold_idx]) - f_env[hold_idx])))
        baseline_l1 = float(torch.mean(torch.abs(f_bg[hold_idx] - f_env[hold_idx])))
    ckpt = Checkpoint(
        stage="align",
        config=cfg,
        step=sc.steps,
        seed=sc.seed,
        weights={"align": align.state_dict()},
        meta={
            "holdout_l1": holdout_l1,
            "baseline_l1": baseline_l1,
            "bg_ckpt": checkpoint_file_hash(bg_ckpt_path),
            "env_ckpt": checkpoint_file_hash(env_ckpt_path),
        },
    )
    save_checkpoint(ckpt, out_path)
    write_loss_records(Path(str(out_path) + ".loss.tsv"), records)
    return ckpt, records


def assemble_final(
    env_ckpt_path: str | Path,
    bg_ckpt_path: str | Path,
    align_ckpt_path: str | Path,
    out_path: str | Path,
) -> Checkpoint:
    """Fuse env-trained denoiser+branch, bg extractor, and alignment net.

    Pure repackaging: every weight is copied bit for bit. Raises on stage
    or architecture mismatch between the three checkpoints.
    """
    env_ckpt = load_checkpoint(env_ckpt_path)
    bg_ckpt = load_checkpoint(bg_ckpt_path)
    align_ckpt = load_checkpoint(align_ckpt_path)
    if env_ckpt.stage != "stage1_env":
        raise ValueError(f"expected a stage1_env checkpoint, got {env_ckpt.stage!r}")
    if bg_ckpt.stage != "stage1_bg":
        raise ValueError(f"expected a stage1_bg checkpoint, got {bg_ckpt.stage!r}")
    if align_ckpt.stage != "align":
        raise ValueError(f"expected an align checkpoint, got {align_ckpt.stage!r}")
    for other in (bg_ckpt, align_ckpt):
        if other.config["model"] != env_ckpt.config["model"]:
            raise ValueError("checkpoint config mismatch: model sections differ")
        if other.config["data"]["size"] != env_ckpt.config["data"]["size"]:
            raise ValueError("checkpoint config mismatch: image size differs")
    ckpt = Checkpoint(
        stage="final",
        config=env_ckpt.config,
        step=env_ckpt.step,
        seed=env_ckpt.seed,
        weights={
            "unet": env_ckpt.weights["unet"],
            "branch": env_ckpt.weights["branch"],
            "extractor": bg_ckpt.weights["extractor"],
            "align": align_ckpt.weights["align"],
        },
        meta={
            "env_ckpt": checkpoint_file_hash(env_ckpt_path),
            "bg_ckpt": checkpoint_file_hash(bg_ckpt_path),
            "align_ckpt": checkpoint_file_hash(align_ckpt_path),
        },
    )
    save_checkpoint(ckpt, out_path)
    return ckpt


def build_final_models(ckpt: Checkpoint) -> dict[str, torch.nn.Module]:
    """Instantiate the assembled (or finetuned) inference model."""
    if ckpt.stage not in ("final", "finetuned"):
        raise ValueError(f"expected a final/finetuned checkpoint, got {ckpt.stage!r}")
    models = build_stage1_models(ckpt.config)
    models["align"] = build_align_model(ckpt.config)
    for name, mdl in models.items():
        mdl.load_state_dict(ckpt.weights[name])
    return models


def train_finetune(
    light_dir: str | Path,
    synth_dir: str | Path,
    final_ckpt_path: str | Path,
    cfg: dict,
    out_path: str | Path,
) -> tuple[Checkpoint, list[LossRecord]]:
    """Stage III finetune: only the denoiser trains.

    Batches mix light-stage and synthesized tuples; each element is drawn
    from the light-stage set with probability ratio/(ratio+1) (default
    2:1). The lighting path (extractor, align, branch) is frozen: those
    parameters are excluded from the optimizer and their bytes must not
    change.
    """
    final_ckpt = load_checkpoint(final_ckpt_path)
    if final_ckpt.stage != "final":
        raise ValueError(f"expected a final checkpoint, got {final_ckpt.stage!r}")
    sc = stage_config(cfg, "finetune", light_dir, extra=synth_dir)
    models = build_final_models(final_ckpt)
    for name in ("branch", "extractor", "align"):
        for p in models[name].parameters():
            p.requires_grad_(False)
    models["branch"].eval()
    models["extractor"].eval()
    models["align"].eval()

    light = dataset_tensors(light_dir)
    synth = dataset_tensors(synth_dir)
    sched = schedule_from_config(cfg)
    gen = torch.Generator().manual_seed(sc.seed)
    opt = _adam(models["unet"].parameters(), sc.lr)
    ratio = float(cfg["train"]["mix_ratio"])
    p_light = ratio / (ratio + 1.0)
    records: list[LossRecord] = []
    t0 = time.perf_counter()
    mix_counts = [0, 0]
    for step in range(1, sc.steps + 1):
        take_light = torch.rand((sc.batch_size,), generator=gen) < p_light
        li = torch.randint(len(light), (sc.batch_size,), generator=gen)
        si = torch.randint(len(synth), (sc.batch_size,), generator=gen)

        def mixed(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
            sel = take_light.view(-1, *([1] * (a.dim() - 1)))
            return torch.where(sel, a[li], b[si])

        x0 = mixed(light.x0, synth.x0)
        x_a = mixed(light.x_a, synth.x_a)
        m = mixed(light.mask, synth.mask)
        y_b = mixed(light.y_b, synth.y_b)
        mix_counts[0] += int(take_light.sum())
        mix_counts[1] += int((~take_light).sum())

        t = torch.randint(1, sched.T + 1, (sc.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, sched)
        with torch.no_grad():
            f = models["align"](models["extractor"](y_b))
            residuals = models["branch"](f, x_t, t)
        eps_hat = models["unet"](x_t, t, x_a, m, [r.detach() for r in residuals])
        loss = torch.mean((eps_hat - eps) ** 2)
        _abort_if_nan(loss, step, sc.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(LossRecord(step, float(loss.detach()), time.perf_counter() - t0))

    ckpt = Checkpoint(
        stage="finetuned",
        config=cfg,
        step=sc.steps,
        seed=sc.seed,
        weights={n: m.state_dict() for n, m in models.items()},
        meta={
            "final_ckpt": checkpoint_file_hash(final_ckpt_path),
            "mix_counts": mix_counts,
        },
    )
    save_checkpoint(ckpt, out_path)
    write_loss_records(Path(str(out_path) + ".loss.tsv"), records)
    return ckpt, records


def conditioned_model(models: dict[str, torch.nn.Module]) -> ConditionedDenoiser:
    return ConditionedDenoiser(models["unet"], models["branch"])
