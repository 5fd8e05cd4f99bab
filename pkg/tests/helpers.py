"""Shared fixtures-in-spirit: tiny configs and untrained checkpoints."""

import copy

import torch

from lightblend import training

TINY_OVERRIDES = {
    "data": {"size": 16, "env_height": 16, "n_subjects": 3, "n_envs": 4},
    "model": {
        "base_width": 8,
        "channel_mults": [1, 1, 2, 2],
        "emb_dim": 16,
        "feature_channels": 12,
        "extractor_hidden": 8,
    },
    "schedule": {"T": 50},
    "train": {"steps": 5, "batch_size": 2},
    "sample": {"steps": 4},
}


def tiny_config(**train_overrides):
    cfg = training.load_config(overrides=copy.deepcopy(TINY_OVERRIDES))
    cfg["train"].update(train_overrides)
    return cfg


def fake_checkpoint(path, stage, seed=0):
    """Persist an untrained checkpoint of the given stage at tiny scale."""
    cfg = tiny_config()
    torch.manual_seed(seed)
    models = training.build_stage1_models(cfg)
    weights = {n: m.state_dict() for n, m in models.items()}
    if stage in ("final", "finetuned"):
        weights["align"] = training.build_align_model(cfg).state_dict()
    elif stage == "align":
        weights = {"align": training.build_align_model(cfg).state_dict()}
    ckpt = training.Checkpoint(stage=stage, config=cfg, step=0, seed=seed, weights=weights)
    training.save_checkpoint(ckpt, path)
    return path
