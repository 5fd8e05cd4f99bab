"""Pair synthesis for the finetune stage: real targets, relit inputs.

A "scene" dataset (built with DataConfig.paired = False) plays the role
of a natural-image collection: each tuple is a single consistent render,
and its target image is the untouched "real" photo. Synthesis keeps that
target byte for byte, re-renders the background without the subject, and
manufactures the pair's input by relighting the subject with the trained
model under a randomly drawn condition, composited back onto the clean
background. Targets therefore never pass through a neural network.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset, imgio
from .envmap import CropSpec, project_to_background, tonemap_ldr
from .harmonize import InferenceModel
from .imgio import composite
from .simulate import envmap_from_params, random_envmap_params
from .training import checkpoint_file_hash

# Minimum mean absolute foreground difference between a synthesized
# input and its target; pairs below carry no relighting signal.
MIN_FG_DIFF = 0.02
MAX_RESAMPLES = 10


def _scene_crop(rec: dataset.TupleRecord) -> CropSpec:
    return CropSpec(
        fov_deg=rec.fov_deg,
        yaw=rec.yaw,
        pitch=rec.pitch,
        out_w=rec.size,
        out_h=rec.size,
    )


def make_clean_background(scene_root: str | Path, rec: dataset.TupleRecord) -> np.ndarray:
    """Background of the scene with the subject absent.

    At desk scale the inpainting step reduces to re-projecting the
    scene's stored panorama through the scene's crop, which is exact
    everywhere, including pixels the subject occluded.
    """
    path = Path(scene_root) / rec.z_env
    if not path.exists():
        raise FileNotFoundError(f"missing scene metadata: {path}")
    env = dataset.load_tuple_env(scene_root, rec)
    return tonemap_ldr(project_to_background(env, _scene_crop(rec)))


@dataclass
class RelightModels:
    """Checkpoints usable as relighting conditions.

    ``env`` is a stage1_env model driven by panorama thumbnails, ``final``
    an assembled model driven by background crops. When both are present
    the condition type is drawn 50/50.
    """

    env: InferenceModel | None = None
    final: InferenceModel | None = None

    def __post_init__(self):
        if self.env is None and self.final is None:
            raise ValueError("need at least one relighting checkpoint")
        if self.env is not None and self.env.stage != "stage1_env":
            raise ValueError(f"env relighter has stage {self.env.stage!r}")
        if self.final is not None and self.final.stage not in ("final", "finetuned"):
            raise ValueError(f"background relighter has stage {self.final.stage!r}")

    def kinds(self) -> list[str]:
        out = []
        if self.env is not None:
            out.append("env")
        if self.final is not None:
            out.append("bg")
        return out


def _draw_condition(
    models: RelightModels,
    rec: dataset.TupleRecord,
    rng: np.random.Generator,
) -> tuple[InferenceModel, np.ndarray, str]:
    kinds = models.kinds()
    kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
    if kind == "env":
        model = models.env
        height = model.config["data"]["env_height"]
        params = random_envmap_params(rng)
        env = envmap_from_params(params, height)
        cond = imgio.resize_image(tonemap_ldr(env.pixels), rec.size)
    else:
        model = models.final
        params = random_envmap_params(rng)
        env = envmap_from_params(params, model.config["data"]["env_height"])
        cond = tonemap_ldr(project_to_background(env, _scene_crop(rec)))
    return model, cond, kind


def relight_input(
    scene_root: str | Path,
    rec: dataset.TupleRecord,
    models: RelightModels,
    rng: np.random.Generator,
    steps: int = 20,
) -> tuple[np.ndarray, str]:
    """Model-relit input for one scene; the target stays untouched.

    Draws a random condition, runs the model on the real image, and
    composites the result onto the clean background so the background
    region matches the target exactly. Conditions whose output is nearly
    identical to the target in the mask region (mean abs diff <= 0.02)
    are rejected and redrawn, up to 10 times.
    """
    tup = dataset.load_tuple(scene_root, rec)
    clean_bg = make_clean_background(scene_root, rec)
    fg_sel = tup.mask > 0.5
    if not fg_sel.any():
        raise ValueError(f"scene {rec.id} has an empty mask")
    for _ in range(MAX_RESAMPLES):
        model, cond, kind = _draw_condition(models, rec, rng)
        seed = int(rng.integers(2**31))
        out = model.predict(tup.x_b, tup.mask, cond, steps=steps, seed=seed, mode="ddim")
        relit = composite(out, tup.mask, clean_bg)
        diff = float(np.abs(relit[fg_sel] - tup.x_b[fg_sel]).mean())
        if diff > MIN_FG_DIFF:
            provenance = f"scene={rec.id};cond={kind}:{seed}"
            return relit, provenance
    raise RuntimeError(
        f"relighting scene {rec.id} rejected {MAX_RESAMPLES} times "
        f"(foreground difference <= {MIN_FG_DIFF})"
    )


def build_synth_dataset(
    scenes_dir: str | Path,
    out_dir: str | Path,
    n: int,
    seed: int,
    env_ckpt: str | Path | None = None,
    final_ckpt: str | Path | None = None,
    steps: int = 20,
) -> list[dataset.TupleRecord]:
    """Materialize n synthesized pairs in the shared dataset layout.

    Scenes are consumed round-robin. The mask, background, target, and
    panorama files are byte-copied from the scene; only the input image
    is new. Deterministic given (seed, checkpoints): the manifest and
    all files hash identically across runs.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    scene_records = dataset.read_manifest(scenes_dir)
    bad = [r.id for r in scene_records if r.env_a != r.env_b or r.rot_a != r.rot_b]
    if bad:
        raise ValueError(
            f"not a scene dataset: tuples {bad[:3]} were rendered as relit pairs"
        )
    models = RelightModels(
        env=InferenceModel.load(env_ckpt) if env_ckpt else None,
        final=InferenceModel.load(final_ckpt) if final_ckpt else None,
    )
    hashes = []
    if env_ckpt:
        hashes.append(f"env:{checkpoint_file_hash(env_ckpt)}")
    if final_ckpt:
        hashes.append(f"final:{checkpoint_file_hash(final_ckpt)}")
    ckpt_tag = ",".join(hashes)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_root = Path(scenes_dir)
    rng = np.random.Generator(np.random.PCG64(seed))
    records: list[dataset.TupleRecord] = []
    for k in range(n):
        rec = scene_records[k % len(scene_records)]
        relit, provenance = relight_input(scene_root, rec, models, rng, steps=steps)
        tid = f"{k:06d}"
        names = {
            "x_a": f"{tid}_xa.png",
            "mask": f"{tid}_m.png",
            "y_b": f"{tid}_yb.png",
            "x_b": f"{tid}_xb.png",
            "z_thumb": f"{tid}_zb.png",
            "z_env": f"{tid}_zb.envm",
        }
        imgio.save_image(relit, out / names["x_a"])
        for key in ("mask", "y_b", "x_b", "z_thumb", "z_env"):
            shutil.copyfile(scene_root / getattr(rec, key), out / names[key])
        records.append(
            dataset.TupleRecord(
                id=tid,
                subject_id=rec.subject_id,
                subject=rec.subject,
                env_a=rec.env_a,
                env_b=rec.env_b,
                rot_a=rec.rot_a,
                rot_b=rec.rot_b,
                fov_deg=rec.fov_deg,
                yaw=rec.yaw,
                pitch=rec.pitch,
                size=rec.size,
                seed=rec.seed,
                provenance=f"{provenance};ckpt={ckpt_tag}",
                **names,
            )
        )
    dataset.write_manifest(out, records)
    return records
