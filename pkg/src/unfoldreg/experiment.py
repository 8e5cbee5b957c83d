"""Run orchestration: dataset generation, training, reconstruction, evaluation
and the theory verification bundle, all driven by a resolved config dict."""

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .diagnostics import (
    CurveSeries, check_monotone, check_theorem1, semi_convergent, speed_compare, step_gaps,
    stopping_case, trajectory_probes, write_curves_csv,
)
from .errors import ConfigError, InputError, StateError
from .inference import SOLUTION_SET, Refinement, StopRule, delta_sweep, reconstruct
from .linops import MaskedDFT, add_noise, load_mask_csv, make_mask, save_mask_csv
from .manifold import SyntheticManifold, uniqueness_certificate
from .metrics import metrics
from .penalty import load_penalty, save_penalty
from .storage import config_hash, prepare_dir, read_signals, sha256_file, write_json, write_signals
from .training import TrainData, TrainRecord, TrainState, train, validation_curve
from .unfolded import load_model, save_model

SPLITS = ("train", "val", "test")
MASK_ATTEMPTS = 10

# acceptance thresholds for the verification bundle
SPEARMAN_MIN = 0.8
PROBE_PROBLEMS = 50
MANIFOLD_PROBES = 100
STOP_SEEDS = 20
STOP_REQUIRED = 19
AUDIT_PROBLEMS = 20
AUDIT_ORACLE_STEPS = 2000
RESIDUAL_RATIO = 0.1
SWEEP_LEVELS = (0.04, 0.02, 0.01, 0.005)
SWEEP_SEEDS = 5
SWEEP_RATIO = 0.5
SPEED_LAYERS = (2, 3, 4, 5)
SPEED_RATIO = 0.7
QUALITY_RATIO = 0.25


def sub_seed(*parts):
    """A 32-bit seed derived deterministically from integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- problem -----------------------------------------------------------------


def build_manifold(cfg):
    p = cfg["problem"]
    m = p["manifold"]
    return SyntheticManifold.create(tuple(p["shape"]), m["d"], m["lo"], m["hi"], m["atoms"], m["seed"])


def build_operator(cfg, manifold):
    """Sampling operator; random masks are redrawn until A is injective on span(M)."""
    o = cfg["problem"]["operator"]
    shape = tuple(cfg["problem"]["shape"])
    seed = o["seed"]
    for attempt in range(MASK_ATTEMPTS):
        mask = make_mask(o["mask"], shape, o["fraction"], o["R"], seed + attempt)
        op = MaskedDFT(mask)
        cert = uniqueness_certificate(manifold, op)
        if cert.passed:
            return op, cert
        if not o["mask"].startswith("random"):
            break
    raise ConfigError(
        f"sampling operator is not injective on the manifold span (smallest Gram eigenvalue "
        f"{cert.min_eig:.3g}); increase the sampling fraction"
    )


def generate(cfg, out, force=False):
    """Write train/val/test splits, the mask and noisy test measurements."""
    out = Path(out)
    data = prepare_dir(out / "data", force)
    manifold = build_manifold(cfg)
    op, cert = build_operator(cfg, manifold)
    save_mask_csv(data / "mask.csv", op.mask.astype(np.int8))
    seed = cfg["problem"]["seed"]
    entries, files = [], {}
    for i, split in enumerate(SPLITS):
        n = cfg["problem"]["sizes"][split]
        xs = manifold.sample(n, seed=sub_seed(seed, i))
        ys = op.apply(xs) if n else np.zeros((0,) + op.output_shape, dtype=np.complex128)
        files[f"{split}_x"] = write_signals(data / f"{split}_x", xs.reshape((n,) + manifold.shape), {"split": split})
        files[f"{split}_y"] = write_signals(data / f"{split}_y", ys, {"split": split})
        entries += [{"split": split, "index": j} for j in range(n)]
    ntest = cfg["problem"]["sizes"]["test"]
    if ntest:
        ys = read_signals(data / "test_y")[0]
        for j, level in enumerate(cfg["problem"]["noise_levels"]):
            noisy = [add_noise(y, level=level, seed=sub_seed(seed, 100 + j, n)) for n, y in enumerate(ys)]
            name = f"test_noisy_{j}"
            files[name] = write_signals(
                data / name, np.stack([m.y_delta for m in noisy]),
                {"split": "test", "level": level, "delta": [m.delta for m in noisy]},
            )
    manifest = {
        "config_hash": config_hash(cfg),
        "entries": entries,
        "counts": {s: cfg["problem"]["sizes"][s] for s in SPLITS},
        "certificate": {"min_eig": cert.min_eig, "max_eig": cert.max_eig},
        "files": files,
    }
    write_json(data / "manifest.json", manifest)
    write_json(out / "config.json", cfg)
    return manifest


class Run:
    """Handle on a run directory."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = config_hash(cfg)

    @property
    def data_dir(self):
        return self.out / "data"

    @property
    def ckpt_dir(self):
        return self.out / "checkpoints"

    def manifold(self):
        return build_manifold(self.cfg)

    def operator(self):
        return MaskedDFT(load_mask_csv(self.data_dir / "mask.csv"))

    def split(self, name, op=None):
        if not (self.data_dir / "manifest.json").exists():
            raise StateError(f"no dataset in {self.data_dir}; run 'generate' first")
        op = op or self.operator()
        xs = read_signals(self.data_dir / f"{name}_x")[0]
        ys = read_signals(self.data_dir / f"{name}_y")[0]
        return TrainData(op, xs.reshape((len(xs),) + op.input_shape), ys)

    def trained(self, ablation=False):
        name = "ablation_model" if ablation else "model"
        model = load_model(self.ckpt_dir / name)
        f = load_penalty(self.ckpt_dir / "penalty")
        return model, f

    def f_star(self, f):
        """A number, or SOLUTION_SET for the per-measurement constrained minimum."""
        spec = self.cfg["infer"]["f_star"]
        if spec == SOLUTION_SET:
            return spec
        if spec != "measured":
            return float(spec)
        return measure_f_star(f, self.manifold(), self.cfg["infer"]["f_star_samples"],
                              sub_seed(self.cfg["problem"]["seed"], 999))

    def refinement(self):
        i = self.cfg["infer"]
        return Refinement(i["refine_steps"], i["refine_lr"]) if i["refine"] else None

    def max_steps(self, model, delta):
        if delta == 0:
            return model.K
        return model.K + self.cfg["infer"]["max_extra_iterations"]


def measure_f_star(f, manifold, count, seed):
    """Smallest penalty value over fresh clean samples (never below 0)."""
    return max(float(np.min(f.values(manifold.sample(count, seed=seed)))), 0.0)


# -- training ------------------------------------------------------------------


def train_run(cfg, out, resume=False, log=None):
    """Train the configured model (and the last-layer-only ablation if enabled)."""
    run = Run(cfg, out)
    tcfg = config_mod.train_config(cfg)
    data = run.split("train")
    val = run.split("test") if cfg["problem"]["sizes"]["test"] else None
    ckpt = run.ckpt_dir
    ckpt.mkdir(parents=True, exist_ok=True)
    timings, hashes = {}, {}

    def checkpoint(state, record, name="state"):
        state.save(ckpt / f"{name}_t{state.t}")
        state.save(ckpt / name)
        record.write_csv(run.out / f"{name}_record.csv", run.hash)

    def one(tc, tag):
        state = record = None
        if resume and (ckpt / f"{tag}.json").exists():
            state = TrainState.load(ckpt / tag, tc)
            record = TrainRecord.read_csv(run.out / f"{tag}_record.csv")
            record.rows = [r for r in record.rows if r["t"] < state.t]
        t0 = time.perf_counter()
        model, f, record = train(tc, data, val, state, record,
                                 checkpoint=lambda s, r: checkpoint(s, r, tag), log=log)
        timings[tag] = time.perf_counter() - t0
        record.state.save(ckpt / tag)
        record.write_csv(run.out / f"{tag}_record.csv", run.hash)
        return model, f

    model, f = one(tcfg, "state")
    hashes["model"] = save_model(ckpt / "model", model)
    hashes["penalty"] = save_penalty(ckpt / "penalty", f)
    if cfg["train"]["ablation"] and tcfg.mode != "pgdnet":
        abl = config_mod.TrainConfig.from_dict(tcfg.as_dict() | {"mode": "pgdnet"})
        amodel, _ = one(abl, "ablation_state")
        hashes["ablation_model"] = save_model(ckpt / "ablation_model", amodel)
    record = {
        "run_id": f"{run.hash}-{tcfg.seed}",
        "config_hash": run.hash,
        "checkpoints": hashes,
        "csv": sorted(p.name for p in run.out.glob("*_record.csv")),
        "timings_s": timings,
    }
    write_json(run.out / "run.json", record)
    write_json(run.out / "config.json", cfg)
    return record


# -- reconstruction ---------------------------------------------------------------


def reconstruct_file(cfg, out, measurement, dest, tau=None):
    """Reconstruct every measurement in a signal file; ``delta`` comes from its metadata."""
    run = Run(cfg, out)
    model, f = run.trained()
    op = run.operator()
    ys, meta = read_signals(measurement)
    deltas = meta.get("delta", 0.0)
    deltas = [float(deltas)] * len(ys) if np.isscalar(deltas) else [float(d) for d in deltas]
    if len(deltas) != len(ys):
        raise InputError("measurement metadata has the wrong number of delta values")
    f_star = run.f_star(f)
    tau = cfg["infer"]["tau"] if tau is None else tau
    strict = model.eta if cfg["infer"]["theory_strict"] and np.isfinite(tau) else None
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    xs, summary = [], []
    for n, (y, d) in enumerate(zip(ys, deltas)):
        rule = StopRule(tau, d, f_star, strict, cfg["infer"]["f_star_steps"])
        res = reconstruct(model, f, op, y, rule, run.refinement(), run.max_steps(model, d))
        xs.append(res.x_out)
        with open(dest / f"trace_{n}.csv", "w", newline="") as fh:
            fh.write(f"# config_hash: {run.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "residual", "penalty", "criterion", "threshold"])
            for e, c in zip(res.trace, res.criteria):
                w.writerow([e.k, repr(e.residual), repr(e.penalty), repr(float(c)), repr(res.threshold)])
        summary.append({"index": n, "k_star": res.k_star, "stopped_early": res.stopped_early, "delta": d,
                        "f_star": res.f_star})
    write_signals(dest / "x_out", np.stack(xs), {"source": str(measurement)})
    result = {"config_hash": run.hash, "tau": tau, "f_star": f_star, "results": summary}
    write_json(dest / "summary.json", result)
    return result


# -- evaluation ---------------------------------------------------------------------


def evaluate(cfg, out):
    run = Run(cfg, out)
    test = run.split("test")
    if len(test) == 0:
        raise InputError("test split is empty")
    model, f = run.trained()
    dest = run.out / "eval"
    dest.mkdir(exist_ok=True)
    curves = [CurveSeries.from_values("model", validation_curve(model, test))]
    if (run.ckpt_dir / "ablation_model.json").exists():
        curves.append(CurveSeries.from_values("ablation", validation_curve(run.trained(True)[0], test)))
    write_curves_csv(dest / "layer_nmse.csv", curves, run.hash)
    final = model.forward_batch(test.op, test.ys)[-1]
    reports = [metrics(x, xt) for x, xt in zip(final, test.xs)]
    zero = [metrics(test.op.pseudo_inverse(y), xt) for y, xt in zip(test.ys, test.xs)]
    with open(dest / "metrics.csv", "w", newline="") as fh:
        fh.write(f"# config_hash: {run.hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "method", "nmse", "psnr", "ssim"])
        for n, (r, z) in enumerate(zip(reports, zero)):
            w.writerow([n, "model", repr(r.nmse), repr(r.psnr), repr(r.ssim)])
            w.writerow([n, "zero_filled", repr(z.nmse), repr(z.psnr), repr(z.ssim)])
    summary = {
        "config_hash": run.hash,
        "model": {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("nmse", "psnr", "ssim")},
        "zero_filled": {k: float(np.mean([getattr(r, k) for r in zero])) for k in ("nmse", "psnr", "ssim")},
        "layer_nmse": {c.label: c.values for c in curves},
    }
    write_json(dest / "summary.json", summary)
    return summary


# -- verification ---------------------------------------------------------------------


def _fresh_problems(run, op, count, tag):
    xs = run.manifold().sample(count, seed=sub_seed(run.cfg["problem"]["seed"], tag))
    return xs, op.apply(xs)


def verify(cfg, out, threads=1):
    """Run the theory checks on trained checkpoints; returns the report dict."""
    run = Run(cfg, out)
    test = run.split("test")
    if len(test) == 0:
        raise InputError("test split is empty")
    model, f = run.trained()
    op = test.op
    manifold = run.manifold()
    f_star = run.f_star(f)
    tau = cfg["infer"]["tau"]
    dest = run.out / "verify"
    dest.mkdir(exist_ok=True)
    checks = {}

    # penalty vs distance
    pxs, pys = _fresh_problems(run, op, PROBE_PROBLEMS, 501)
    probes = trajectory_probes(model, op, pys)
    on_m = manifold.sample(MANIFOLD_PROBES, seed=sub_seed(cfg["problem"]["seed"], 502))
    t1 = check_theorem1(f, manifold, probes, on_m)
    checks["theorem1"] = t1.as_dict() | {
        "passed": bool(not t1.degenerate and t1.spearman >= SPEARMAN_MIN
                       and t1.mean_f_on_manifold <= t1.f_percentile20),
    }

    # finite stopping
    level = 0.025
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        cases = list(pool.map(
            lambda s: stopping_case(model, f, op, test.xs[s % len(test)], test.ys[s % len(test)],
                                    level, tau, f_star, s, run.max_steps(model, 1.0)),
            range(STOP_SEEDS),
        ))
    stopped = sum(c.stopped for c in cases)
    within = sum(c.within for c in cases)
    checks["finite_stopping"] = {
        "level": level, "tau": tau, "f_star": f_star,
        "k_star": [c.k_star for c in cases], "k_min": [c.k_min for c in cases],
        "semi_convergent": [semi_convergent(c.nmse_curve, c.k_min) for c in cases],
        "stopped": stopped, "within3": within,
        "passed": bool(stopped >= STOP_REQUIRED and within >= STOP_REQUIRED),
    }
    with open(dest / "stopping.csv", "w", newline="") as fh:
        fh.write(f"# config_hash: {run.hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "k", "criterion", "nmse"])
        for c in cases:
            for k, (cv, nv) in enumerate(zip(c.criteria, c.nmse_curve)):
                w.writerow([c.seed, k, repr(float(cv)), repr(float(nv))])

    # descent audit on clean data
    axs, ays = _fresh_problems(run, op, AUDIT_PROBLEMS, 503)
    traces = [model.unfold_forward(op, y, f=f) for y in ays]
    n_viol, n_beyond, max_excess, ratios = 0, 0, -np.inf, []
    for x, tr in zip(axs, traces):
        eps = step_gaps(f, tr, AUDIT_ORACLE_STEPS)
        rep = check_monotone(tr, f, x, eps, model.eta)
        n_viol += rep.n_violations
        n_beyond += rep.n_beyond_slack()
        max_excess = max(max_excess, rep.max_excess)
        r0, rK = rep.residuals[0], rep.residuals[-1]
        ratios.append(float(rK / r0) if r0 > 0 else (0.0 if rK == 0 else float("inf")))
    checks["monotone"] = {
        "violations": n_viol, "max_excess": float(max_excess),
        "violations_beyond_prox_slack": n_beyond,
        "residual_k0": [float(t.residuals[0]) for t in traces],
        "residual_kK": [float(t.residuals[-1]) for t in traces],
        "passed_inequality": n_viol == 0,
        "passed_residual": bool(all(r <= RESIDUAL_RATIO for r in ratios)),
    }
    checks["monotone"]["passed"] = checks["monotone"]["passed_inequality"] and checks["monotone"]["passed_residual"]

    # noise sweep
    rows = []
    for s in range(SWEEP_SEEDS):
        y = test.ys[s % len(test)]
        x = test.xs[s % len(test)]
        deltas = [lv * float(np.linalg.norm(y)) for lv in SWEEP_LEVELS]
        for r in delta_sweep(model, f, op, x, y, deltas, StopRule(tau, 1.0, f_star), [s], run.refinement()):
            rows.append(r | {"level": SWEEP_LEVELS[deltas.index(r["delta"])], "problem": s % len(test)})
    by_level = {}
    for r in rows:
        by_level.setdefault(r["level"], []).append(r["error"])
    med = [float(np.median(by_level[lv])) for lv in SWEEP_LEVELS]
    checks["regularity"] = {
        "levels": list(SWEEP_LEVELS), "median_error": med,
        "passed": bool(all(b <= a for a, b in zip(med, med[1:])) and med[-1] <= SWEEP_RATIO * med[0]),
    }

    # convergence speed and quality
    if (run.ckpt_dir / "ablation_model.json").exists():
        ca, cb = speed_compare(model, run.trained(True)[0], test)
        write_curves_csv(dest / "speed.csv", [ca, cb], run.hash)
        checks["speed"] = {
            "model": ca.values, "ablation": cb.values,
            "passed": bool(all(ca[k] <= cb[k] for k in SPEED_LAYERS) and ca[3] <= SPEED_RATIO * cb[3]),
        }
    else:
        ca = CurveSeries.from_values("model", validation_curve(model, test))
        checks["speed"] = {"model": ca.values, "passed": False, "reason": "no ablation checkpoint"}
    checks["quality"] = {
        "zero_filled_nmse": ca[0], "layer_K_nmse": ca[model.K],
        "passed": bool(ca[model.K] <= QUALITY_RATIO * ca[0]),
    }

    report = {
        "config_hash": run.hash,
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
    }
    with open(dest / "verify.json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def checkpoint_digests(out):
    """sha256 of every checkpoint blob and CSV in a run, for reproducibility checks."""
    out = Path(out)
    files = sorted(list((out / "checkpoints").glob("*.bin")) + list(out.glob("*.csv")))
    return {p.relative_to(out).as_posix(): sha256_file(p) for p in files}
