"""Experiment configuration: JSON with ``//`` and ``/* */`` comments allowed.

Unknown keys are rejected at every level. :func:`resolve` fills defaults so
that the stored copy of a run's configuration is complete.
"""

import copy
import json
import re

from .errors import ConfigError
from .inference import SOLUTION_SET, theory_tau
from .training import TrainConfig

_TOKEN = re.compile(r'"(?:\\.|[^"\\])*"|//[^\n]*|/\*.*?\*/', re.S)

DEFAULTS = {
    "problem": {
        "shape": [16, 16],
        "manifold": {"d": 6, "lo": -10.0, "hi": 10.0, "atoms": "cosine", "seed": 0},
        "operator": {"kind": "masked-dft", "mask": "random-2d", "fraction": 0.25, "R": 4, "seed": 0},
        "sizes": {"train": 64, "val": 0, "test": 16},
        "noise_levels": [0.025],
        "seed": 1,
    },
    "train": TrainConfig().as_dict() | {"epochs": 40, "icnn_bias_scale": 10.0, "ablation": True},
    "infer": {
        "tau": 2.0,
        "theory_strict": True,
        "f_star": "solution-set",
        "f_star_samples": 256,
        "f_star_steps": 500,
        "refine": False,
        "refine_steps": 20,
        "refine_lr": 0.5,
        "max_extra_iterations": 30,
    },
    "output": "runs/smoke",
}

MASK_KINDS = ("uniform-1d", "uniform-2d", "random-1d", "random-2d", "full")


def strip_comments(text):
    return _TOKEN.sub(lambda m: m.group(0) if m.group(0).startswith('"') else "", text)


def parse(text):
    try:
        return json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None


def _merge(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict):
            out[k] = _merge(defaults[k], v, f"{where}.{k}".lstrip("."))
        else:
            out[k] = v
    return out


def resolve(raw=None, seed=None, out=None):
    cfg = _merge(DEFAULTS, raw or {}, "")
    if seed is not None:
        cfg["problem"]["seed"] = int(seed)
        cfg["train"]["seed"] = int(seed)
    if out is not None:
        cfg["output"] = str(out)
    validate(cfg)
    return cfg


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg):
    p = cfg["problem"]
    _need(isinstance(p["shape"], list) and len(p["shape"]) in (1, 2)
          and all(isinstance(s, int) and s > 0 for s in p["shape"]), "problem.shape must be 1 or 2 positive integers")
    m = p["manifold"]
    _need(isinstance(m["d"], int) and m["d"] >= 1, "problem.manifold.d must be a positive integer")
    _need(_number(m["lo"]) and _number(m["hi"]) and m["lo"] < m["hi"], "problem.manifold needs lo < hi")
    _need(m["atoms"] in ("cosine", "random"), "problem.manifold.atoms must be 'cosine' or 'random'")
    o = p["operator"]
    _need(o["kind"] == "masked-dft", "problem.operator.kind must be 'masked-dft'")
    _need(o["mask"] in MASK_KINDS, f"problem.operator.mask must be one of {MASK_KINDS}")
    _need(_number(o["fraction"]) and 0 < o["fraction"] <= 1, "problem.operator.fraction must be in (0, 1]")
    _need(isinstance(o["R"], int) and o["R"] >= 1, "problem.operator.R must be a positive integer")
    for k, v in p["sizes"].items():
        _need(isinstance(v, int) and v >= 0, f"problem.sizes.{k} must be a non-negative integer")
    _need(isinstance(p["noise_levels"], list) and all(_number(v) and v >= 0 for v in p["noise_levels"]),
          "problem.noise_levels must be a list of non-negative numbers")
    i = cfg["infer"]
    _need(_number(i["tau"]) and i["tau"] > 0, "infer.tau must be positive")
    _need(i["f_star"] in ("measured", SOLUTION_SET) or (_number(i["f_star"]) and i["f_star"] >= 0),
          f"infer.f_star must be 'measured', '{SOLUTION_SET}' or a non-negative number")
    _need(isinstance(i["f_star_steps"], int) and i["f_star_steps"] >= 0, "infer.f_star_steps must be >= 0")
    _need(isinstance(i["max_extra_iterations"], int) and i["max_extra_iterations"] >= 0,
          "infer.max_extra_iterations must be a non-negative integer")
    _need(isinstance(i["refine_steps"], int) and i["refine_steps"] >= 0, "infer.refine_steps must be >= 0")
    train_config(cfg)  # raises ConfigError on bad values
    if i["theory_strict"]:
        bound = theory_tau(cfg["train"]["eta"])
        _need(i["tau"] > bound, f"infer.tau={i['tau']} must exceed {bound:.6g} in theory-strict mode")


def train_config(cfg):
    t = {k: v for k, v in cfg["train"].items() if k != "ablation"}
    try:
        return TrainConfig.from_dict(t)
    except TypeError as exc:
        raise ConfigError(f"bad train block: {exc}") from None


def load(path, seed=None, out=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return resolve(parse(text), seed=seed, out=out)
