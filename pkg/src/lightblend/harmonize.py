"""Inference pipeline, metric reports, and lighting-direction probes.

``harmonize`` composites a foreground over a new background and runs the
assembled diffusion model so the subject's lighting matches the
background. ``evaluate`` scores a checkpoint over a rendered test set,
dispatching the conditioning image on the checkpoint stage (background
crop for bg-conditioned and assembled models, panorama thumbnail for the
env-conditioned ablation). The azimuth probe reads the apparent light
direction off a shaded sphere; its sign flip under horizontally flipped
backgrounds is the Fig.-style directionality check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset, imgio, metrics, training
from .diffusion import sample
from .imgio import composite
from .simulate import SubjectSpec

EVAL_COLUMNS = ["sample_id", "mse", "psnr_db", "ssim", "lpips", "mse_fg", "psnr_fg_db"]


@dataclass(frozen=True)
class HarmonizeRequest:
    """One harmonization job; images are float arrays in [0, 1]."""

    fg: np.ndarray
    mask: np.ndarray
    bg: np.ndarray
    ckpt: str
    seed: int = 0
    steps: int = 20
    mode: str = "ddim"

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValueError("alpha mask must lie in [0, 1]")


class InferenceModel:
    """A loaded checkpoint plus its sampling machinery."""

    def __init__(self, ckpt: training.Checkpoint):
        self.ckpt = ckpt
        self.stage = ckpt.stage
        self.config = ckpt.config
        self.size = ckpt.config["data"]["size"]
        self.sched = training.schedule_from_config(ckpt.config)
        if ckpt.stage in ("final", "finetuned"):
            self.models = training.build_final_models(ckpt)
        elif ckpt.stage in ("stage1_bg", "stage1_env"):
            self.models = training._restore_stage1(ckpt)
        else:
            raise ValueError(f"checkpoint stage {ckpt.stage!r} is not runnable")
        for mdl in self.models.values():
            mdl.eval()
        self.denoiser = training.conditioned_model(self.models)

    @classmethod
    def load(cls, path: str | Path) -> "InferenceModel":
        return cls(training.load_checkpoint(path))

    def features(self, cond01: torch.Tensor) -> torch.Tensor:
        """Lighting feature for a batch of [0, 1] conditioning images."""
        with torch.no_grad():
            f = self.models["extractor"](cond01)
            if self.stage in ("final", "finetuned"):
                f = self.models["align"](f)
        return f

    def predict(
        self,
        x_a: np.ndarray,
        mask: np.ndarray,
        cond: np.ndarray,
        steps: int = 20,
        seed: int = 0,
        mode: str = "ddim",
        chunk: int = 32,
    ) -> np.ndarray:
        """Sample harmonized images for [0, 1] inputs, batched or single."""
        single = x_a.ndim == 3
        if single:
            x_a, mask, cond = x_a[None], mask[None], cond[None]

        def chw(a: np.ndarray) -> torch.Tensor:
            return torch.from_numpy(
                np.ascontiguousarray(a.transpose(0, 3, 1, 2), dtype=np.float32)
            )

        outs = []
        for i in range(0, x_a.shape[0], chunk):
            xa_t = chw(x_a[i : i + chunk]) * 2.0 - 1.0
            m_t = torch.from_numpy(mask[i : i + chunk].astype(np.float32)).unsqueeze(1)
            f = self.features(chw(cond[i : i + chunk]))
            x = sample(
                self.denoiser, self.sched, xa_t, m_t, f,
                steps=steps, seed=seed + i, mode=mode,
            )
            outs.append(((x + 1.0) / 2.0).clamp(0.0, 1.0).numpy().transpose(0, 2, 3, 1))
        out = np.concatenate(outs)
        return out[0] if single else out


def harmonize(req: HarmonizeRequest) -> np.ndarray:
    """Relight a composited foreground to match the target background.

    Only assembled checkpoints run here (stage final or finetuned): they
    condition on the background alone. Stage-1 env checkpoints need an
    environment map and are refused; use evaluate() or assemble a final
    model. All inputs are resized to the trained resolution.
    """
    model = InferenceModel.load(req.ckpt)
    if model.stage not in ("final", "finetuned"):
        raise ValueError(
            f"checkpoint stage {model.stage!r} cannot harmonize from a background "
            "(stage1_env requires an environment map; assemble a final checkpoint)"
        )
    s = model.size
    fg = imgio.resize_image(np.asarray(req.fg, dtype=np.float32), s)
    mask = imgio.resize_image(np.asarray(req.mask, dtype=np.float32), s)
    bg = imgio.resize_image(np.asarray(req.bg, dtype=np.float32), s)
    x_a = composite(fg, mask, bg)
    return model.predict(x_a, mask, bg, steps=req.steps, seed=req.seed, mode=req.mode)


@dataclass
class EvalReport:
    """Per-sample metric rows plus aggregate mean/std."""

    rows: list[dict]
    mean: dict[str, float]
    std: dict[str, float]
    stage: str
    config_hash: str

    @property
    def n(self) -> int:
        return len(self.rows)

    def to_tsv(self, path: str | Path) -> None:
        lines = ["\t".join(EVAL_COLUMNS)]
        for row in self.rows:
            lines.append(
                "\t".join(
                    row[c] if isinstance(row[c], str) else f"{row[c]:.6f}"
                    for c in EVAL_COLUMNS
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_text(self) -> str:
        lines = [
            f"samples: {self.n}   stage: {self.stage}   config: {self.config_hash}",
            f"{'metric':<10}{'mean':>12}{'std':>12}",
        ]
        for key in ("mse", "psnr_db", "ssim", "mse_fg", "psnr_fg_db"):
            lines.append(f"{key:<10}{self.mean[key]:>12.4f}{self.std[key]:>12.4f}")
        return "\n".join(lines)


def _masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    sel = mask > 0.5
    if not sel.any():
        return float("nan")
    diff = (a[sel].astype(np.float64) - b[sel].astype(np.float64)) ** 2
    return float(diff.mean())


def eval_condition(stage: str, tup: dataset.LoadedTuple) -> np.ndarray:
    """The conditioning image a checkpoint of this stage expects."""
    return tup.z_thumb if stage == "stage1_env" else tup.y_b


def evaluate(
    ckpt_path: str | Path | None,
    testset: str | Path,
    steps: int = 20,
    seed: int = 0,
    mode: str = "ddim",
    out_tsv: str | Path | None = None,
    predict_fn=None,
    model: InferenceModel | None = None,
) -> EvalReport:
    """Score a checkpoint on a test set; one metrics row per tuple.

    Predictions are compared against the rendered target x_b with
    full-image MSE/PSNR/SSIM plus foreground-only MSE/PSNR over the mask
    support (the metric crop the tables leave unspecified). ``predict_fn``
    overrides the model: it receives (x_a, mask, cond) stacks in [0, 1]
    and returns predictions, which lets tests score ground truth directly.
    """
    records = dataset.read_manifest(testset)
    tuples = [dataset.load_tuple(testset, r) for r in records]
    if predict_fn is None:
        if model is None:
            model = InferenceModel.load(ckpt_path)
        stage = model.stage
        cfg_hash = training.config_hash(model.config)
        x_a = np.stack([t.x_a for t in tuples])
        mask = np.stack([t.mask for t in tuples])
        cond = np.stack([eval_condition(stage, t) for t in tuples])
        preds = model.predict(x_a, mask, cond, steps=steps, seed=seed, mode=mode)
    else:
        stage = "external"
        cfg_hash = "-"
        x_a = np.stack([t.x_a for t in tuples])
        mask = np.stack([t.mask for t in tuples])
        cond = np.stack([t.y_b for t in tuples])
        preds = predict_fn(x_a, mask, cond)

    rows = []
    for tup, pred in zip(tuples, preds):
        err = metrics.mse(pred, tup.x_b)
        err_fg = _masked_mse(pred, tup.x_b, tup.mask)
        rows.append(
            {
                "sample_id": tup.record.id,
                "mse": err,
                "psnr_db": metrics.psnr(pred, tup.x_b),
                "ssim": metrics.ssim(pred, tup.x_b),
                "lpips": "n/a",
                "mse_fg": err_fg,
                "psnr_fg_db": metrics.PSNR_CAP_DB
                if err_fg < 1e-10
                else 10.0 * math.log10(1.0 / err_fg),
            }
        )
    numeric = [c for c in EVAL_COLUMNS if c not in ("sample_id", "lpips")]
    mean = {c: float(np.mean([r[c] for r in rows])) for c in numeric}
    std = {c: float(np.std([r[c] for r in rows])) for c in numeric}
    report = EvalReport(rows=rows, mean=mean, std=std, stage=stage, config_hash=cfg_hash)
    if out_tsv is not None:
        report.to_tsv(out_tsv)
    return report


@dataclass(frozen=True)
class ProbeResult:
    """Estimated light azimuth in camera frame; 0 means frontal light."""

    azimuth: float
    directional: bool
    strength: float


# Interior pixels only: the antialiased rim dims brightness and would
# register as a spurious gradient on uniformly lit spheres.
_PROBE_INTERIOR = 0.99
_PROBE_MIN_STRENGTH = 0.05


def light_azimuth_probe(image: np.ndarray, mask: np.ndarray) -> ProbeResult:
    """Estimate the dominant light azimuth from a shaded sphere.

    Fits the sphere from the mask support, computes surface normals from
    the known geometry, and takes the brightness-weighted mean normal.
    The azimuth is measured about the view axis: atan2(x, depth), so a
    frontally lit sphere probes 0 and horizontal flips negate the sign.
    Nearly uniform brightness (relative spread below 5%) is flagged
    non-directional; the azimuth is then meaningless.
    """
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if m.max() <= 0.0:
        raise ValueError("mask empty")
    ys, xs = np.nonzero(m > _PROBE_INTERIOR)
    if ys.size < 16:
        raise ValueError("mask support too small for the sphere probe")
    cx, cy = xs.mean(), ys.mean()
    area = float((m > 0.5).sum())
    r = math.sqrt(area / math.pi)
    brightness = img.mean(axis=2)[ys, xs]
    mean_b = brightness.mean()
    spread = brightness.std() / (mean_b + 1e-12)
    if spread < _PROBE_MIN_STRENGTH:
        return ProbeResult(azimuth=0.0, directional=False, strength=float(spread))

    ox = (xs - cx) / r
    oy = (ys - cy) / r
    rho2 = np.clip(ox * ox + oy * oy, 0.0, 1.0)
    nz = -np.sqrt(1.0 - rho2)  # camera looks toward +z; visible side faces it
    w = brightness - brightness.min()
    total = w.sum()
    if total <= 0.0:
        return ProbeResult(azimuth=0.0, directional=False, strength=float(spread))
    nx_bar = float((w * ox).sum() / total)
    nz_bar = float((w * nz).sum() / total)
    azimuth = math.atan2(nx_bar, -nz_bar)
    return ProbeResult(azimuth=azimuth, directional=True, strength=float(spread))


@dataclass
class FlipCase:
    sample_id: str
    azimuth: float
    azimuth_flipped: float
    target_azimuth: float
    flipped: bool


@dataclass
class FlipReport:
    cases: list[FlipCase] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.cases)

    @property
    def n_flipped(self) -> int:
        return sum(c.flipped for c in self.cases)

    @property
    def fraction(self) -> float:
        return self.n_flipped / self.n if self.n else float("nan")

    def to_tsv(self, path: str | Path) -> None:
        lines = ["sample_id\tazimuth\tazimuth_flipped\ttarget_azimuth\tflipped"]
        for c in self.cases:
            lines.append(
                f"{c.sample_id}\t{c.azimuth:.4f}\t{c.azimuth_flipped:.4f}"
                f"\t{c.target_azimuth:.4f}\t{int(c.flipped)}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_text(self) -> str:
        return (
            f"directional cases: {self.n}, sign flipped: {self.n_flipped} "
            f"({100.0 * self.fraction:.1f}%)"
        )


# A case counts as strongly directional when the ground-truth render
# probes off-axis by at least this margin (radians) on a sphere subject.
_FLIP_MIN_AZIMUTH = 0.3
_FLIP_MAX_AZIMUTH = math.pi - 0.3


def flip_consistency(
    model: InferenceModel,
    testset: str | Path,
    steps: int = 20,
    seed: int = 0,
    max_cases: int | None = None,
) -> FlipReport:
    """Probe azimuth sign flip under horizontally flipped backgrounds.

    Uses sphere-subject tuples whose rendered target is strongly
    directional (probe clearly off frontal). Each case harmonizes the
    input against the target background and against its mirror image; a
    case passes when the probed azimuth changes sign.
    """
    records = dataset.read_manifest(testset)
    report = FlipReport()
    for rec in records:
        if SubjectSpec.from_json(rec.subject).kind != "sphere":
            continue
        tup = dataset.load_tuple(testset, rec)
        try:
            gt = light_azimuth_probe(tup.x_b, tup.mask)
        except ValueError:
            continue  # subject too small to probe
        if not gt.directional or not (
            _FLIP_MIN_AZIMUTH < abs(gt.azimuth) < _FLIP_MAX_AZIMUTH
        ):
            continue
        bg = tup.y_b
        bg_flip = bg[:, ::-1].copy()
        x_a = composite(tup.x_a, tup.mask, bg)
        x_a_flip = composite(tup.x_a, tup.mask, bg_flip)
        pair_x = np.stack([x_a, x_a_flip])
        pair_m = np.stack([tup.mask, tup.mask])
        pair_c = np.stack([bg, bg_flip])
        out = model.predict(pair_x, pair_m, pair_c, steps=steps, seed=seed)
        p = light_azimuth_probe(out[0], tup.mask)
        p_flip = light_azimuth_probe(out[1], tup.mask)
        ok = (
            p.directional
            and p_flip.directional
            and np.sign(p.azimuth) != 0
            and np.sign(p.azimuth) == -np.sign(p_flip.azimuth)
        )
        report.cases.append(
            FlipCase(
                sample_id=rec.id,
                azimuth=p.azimuth,
                azimuth_flipped=p_flip.azimuth,
                target_azimuth=gt.azimuth,
                flipped=bool(ok),
            )
        )
        if max_cases is not None and report.n >= max_cases:
            break
    return report
