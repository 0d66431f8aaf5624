"""Python bindings for the tsinet C++ core.

Array arguments are numpy arrays. Configs may be dicts or paths to JSON files.
"""

import json
import os

from . import _core
from ._core import (
    ConfigError,
    IoError,
    NumericalError,
    ShapeError,
    cross_perception_integrate,
    cti_forward,
    load_tensor,
    pyramidal_motion,
    saliency_align,
    sme_forward,
)

__all__ = [
    "ConfigError",
    "IoError",
    "NumericalError",
    "ShapeError",
    "build_dataset",
    "cross_perception_integrate",
    "cti_forward",
    "evaluate",
    "generate_clip",
    "gradcheck",
    "load_tensor",
    "predict",
    "profile",
    "pyramidal_motion",
    "saliency_align",
    "save_tensor",
    "sme_forward",
    "train",
]


def _config(cfg):
    """Returns (json text, base dir) for a dict or a path."""
    if isinstance(cfg, (str, os.PathLike)):
        path = os.fspath(cfg)
        with open(path, encoding="utf-8") as f:
            return f.read(), os.path.dirname(os.path.abspath(path))
    return json.dumps(cfg), ""


def profile(model, frames=None, size=224):
    """MAC/FLOP report of a model spec; frames defaults to the spec's own."""
    text, base = _config(model)
    spec = json.loads(text)
    if frames is None:
        frames = spec.get("frames", 8)
    return json.loads(_core.profile(text, frames, size, size))


def generate_clip(spec, seed=0):
    """Renders one clip as a float32 array [T, 3, H, W]."""
    return _core.generate_clip(_config(spec)[0], seed)


def build_dataset(config, out_dir):
    return json.loads(_core.build_dataset(_config(config)[0], os.fspath(out_dir)))


def gradcheck(module="all", seed=0):
    return json.loads(_core.gradcheck(module, seed))


def train(config, data_dir="", out_dir="", **overrides):
    text, base = _config(config)
    if overrides:
        cfg = json.loads(text)
        cfg.update(overrides)
        text = json.dumps(cfg)
    return json.loads(_core.train(text, base, os.fspath(data_dir), os.fspath(out_dir)))


def evaluate(checkpoint, data_dir, split="val"):
    return json.loads(_core.evaluate(os.fspath(checkpoint), os.fspath(data_dir), split))


def predict(checkpoint, clips):
    """Class scores [N, K] for clips [N, T, 3, H, W]."""
    return _core.predict(os.fspath(checkpoint), clips)


def save_tensor(path, array):
    if getattr(array, "dtype", None) == "float32":
        _core.save_tensor_f32(os.fspath(path), array)
    else:
        _core.save_tensor(os.fspath(path), array)
