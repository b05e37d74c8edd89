"""Experiment harness: run configuration, training with periodic zero-shot
evaluation across shift suites, the ablation matrix, the gradient-check
verification gate, and metrics/summary persistence.

Artifacts per run directory: config.json (resolved), metrics.csv
(incremental), summary.json, checkpoints/step_*/ in the tensor-dir format.
"""

from __future__ import annotations

import dataclasses
import json
import os
import subprocess
import sys
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import normlayers as nl
from .agent import (
    Adam,
    AgentConfig,
    N_ACTIONS,
    QNet,
    ReplayBuffer,
    act,
    build_qnet,
    clone_qnet,
    epsilon_at,
    qnet_forward,
    random_shift,
    soft_update,
    td_update,
)
from .checkpoint import load_arrays, save_arrays
from .encoder import ConvSpec, EncoderConfig, Mode, build_encoder, encode, encode_backward, sample_active_mask
from .errors import ConfigError, NumericError, VerificationError
from .numcore import Prng, conv2d, conv2d_backward, grad_check, linear, linear_backward, precision, relu, relu_backward
from . import pixelworld as pw

VARIANTS = ("base", "cn", "sn", "cnsn", "cnsn_nocrop", "bn")
ABLATION_VARIANTS = ("base", "cn", "sn", "cnsn", "cnsn_nocrop")
_VARIANT_NORM = {
    "base": "none",
    "cn": "cn_only",
    "sn": "sn_only",
    "cnsn": "cnsn",
    "cnsn_nocrop": "cnsn",
    "bn": "bn",
}

METRICS_COLUMNS = ("step", "suite", "seed", "variant", "mean_return", "std_return", "episodes")
METRICS_HEADER = ",".join(METRICS_COLUMNS)

# rng stream tags within one run
_S_INIT, _S_ENV, _S_EXPLORE, _S_UPDATE, _S_REPLAY, _S_EVAL = 1, 2, 3, 4, 5, 6


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "cnsn"
    total_steps: int = 50_000
    eval_interval: int = 2_500
    eval_episodes: int = 50
    suites: tuple[str, ...] = pw.SUITE_NAMES
    checkpoint_interval: int = 5_000
    encoder_channels: int = 16
    feature_dim: int = 128
    k_active: int = 4
    crop_frac_range: tuple[float, float] = (0.5, 1.0)
    pairing_mode: str = "matching"
    debug_frames: bool = False  # dump a PNG per step under <out>/frames/
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        for s in self.suites:
            pw.shift_suite(s)
        if self.total_steps < 0 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("total_steps must be >= 0; eval_interval and eval_episodes >= 1")
        enc = self.encoder_config()
        n_cn = len(enc.cn_layers())
        if n_cn and self.agent.batch < 2:
            raise ConfigError("CrossNorm pairing needs a training batch of at least 2")
        if n_cn and enc.k_active == n_cn and self.agent.batch < 4:
            warnings.warn("all CrossNorm layers active with batch < 4; training may diverge", stacklevel=2)

    def encoder_config(self) -> EncoderConfig:
        cn_cfg = nl.CrossNormConfig(
            crop_enabled=(self.variant != "cnsn_nocrop"),
            crop_frac_range=tuple(self.crop_frac_range),
            pairing_mode=self.pairing_mode,
        )
        norm = _VARIANT_NORM[self.variant]
        k = self.k_active if norm in ("cnsn", "cn_only") else 0
        return EncoderConfig.desk(
            channels=self.encoder_channels,
            norm=norm,
            k_active=k,
            feature_dim=self.feature_dim,
            crossnorm=cn_cfg,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["suites"] = list(self.suites)
        d["crop_frac_range"] = list(self.crop_frac_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "agent" in d and isinstance(d["agent"], dict):
            d["agent"] = AgentConfig.from_dict(d["agent"])
        if "suites" in d:
            d["suites"] = tuple(d["suites"])
        if "crop_frac_range" in d:
            d["crop_frac_range"] = tuple(d["crop_frac_range"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Metrics


def append_metrics(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r['step']},{r['suite']},{r['seed']},{r['variant']},"
                f"{r['mean_return']:.6f},{r['std_return']:.6f},{r['episodes']}\n"
            )


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no metrics.csv at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"{path} is empty")
    header = lines[0].split(",")
    for col in METRICS_COLUMNS:
        if col not in header:
            raise ConfigError(f"metrics schema error: missing column {col!r} in {path}")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        vals = dict(zip(header, line.split(",")))
        rows.append(
            {
                "step": int(vals["step"]),
                "suite": vals["suite"],
                "seed": int(vals["seed"]),
                "variant": vals["variant"],
                "mean_return": float(vals["mean_return"]),
                "std_return": float(vals["std_return"]),
                "episodes": int(vals["episodes"]),
            }
        )
    if not rows:
        raise ConfigError(f"metrics schema error: {path} has a header but no rows")
    return rows


def summary_from_metrics(rows: list[dict]) -> dict:
    """Final-step per-suite results and test/train generalization ratios."""
    final = max(r["step"] for r in rows)
    suites = {}
    for r in rows:
        if r["step"] == final:
            suites[r["suite"]] = {
                "mean_return": r["mean_return"],
                "std_return": r["std_return"],
                "episodes": r["episodes"],
            }
    ratios = {}
    train_mean = suites.get("train", {}).get("mean_return")
    if train_mean is not None and train_mean > 0:
        for name, cell in suites.items():
            if name != "train":
                ratios[name] = cell["mean_return"] / train_mean
    return {"final_step": final, "suites": suites, "ratios": ratios}


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(qnet: QNet, suite: str, episodes: int, rng: Prng, policy_fn=None) -> tuple[float, float]:
    """Greedy zero-shot evaluation: `episodes` full episodes on one suite.

    Episode i draws its world from rng.split(i), so the seed stream is
    independent of the policy being evaluated. Environments run in lockstep
    as one batch. policy_fn is a test hook mapping WorldState to an action,
    bypassing the network.
    """
    spec = pw.shift_suite(suite)
    states = []
    obs = []
    for i in range(episodes):
        st, ob = pw.reset(rng.split(i), spec)
        states.append(st)
        obs.append(ob)
    returns = np.zeros(episodes)
    active = list(range(episodes))
    dtype = qnet.w.dtype
    while active:
        if policy_fn is None:
            batch = np.stack([obs[i] for i in active]).astype(dtype, copy=False)
            q, _ = qnet_forward(qnet, batch, None, Mode.EVAL)
            actions = np.argmax(q, axis=1)
        else:
            actions = [policy_fn(states[i]) for i in active]
        still = []
        for j, i in enumerate(active):
            st, ob, r, done = pw.step(states[i], int(actions[j]))
            states[i] = st
            obs[i] = ob
            returns[i] += r
            if not done:
                still.append(i)
        active = still
    return float(np.mean(returns)), float(np.std(returns))


# ---------------------------------------------------------------------------
# Training


def _save_checkpoint(out: Path, step: int, qnet: QNet, target: QNet, adam: Adam, cfg: RunConfig) -> None:
    arrays = {}
    arrays.update(qnet.named_params())
    arrays.update({f"buf.{k}": v for k, v in qnet.named_buffers().items()})
    arrays.update({f"target.{k}": v for k, v in target.named_params().items()})
    arrays.update({f"target.buf.{k}": v for k, v in target.named_buffers().items()})
    arrays.update(adam.state_arrays())
    meta = {"step": step, "adam_t": adam.t, "seed": cfg.seed, "variant": cfg.variant}
    save_arrays(out / "checkpoints" / f"step_{step:07d}", arrays, meta)


def load_run(run_dir, step: int | None = None) -> tuple[RunConfig, QNet, dict]:
    """Rebuild a run's Q-network from its config and a saved checkpoint."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    ckpts = sorted((run_dir / "checkpoints").glob("step_*"))
    if not ckpts:
        raise ConfigError(f"no checkpoints under {run_dir}")
    if step is None:
        chosen = ckpts[-1]
    else:
        chosen = run_dir / "checkpoints" / f"step_{step:07d}"
    arrays, meta = load_arrays(chosen)
    qnet = build_qnet(cfg.encoder_config(), Prng(cfg.seed).split(_S_INIT))
    for name, arr in qnet.named_params().items():
        arr[...] = arrays[name]
    for name, arr in qnet.named_buffers().items():
        arr[...] = arrays[f"buf.{name}"]
    return cfg, qnet, meta


def _eval_all_suites(cfg: RunConfig, qnet: QNet, step: int, root: Prng, metrics_path: Path) -> list[dict]:
    snapshot = clone_qnet(qnet)
    rows = []
    for si, suite in enumerate(cfg.suites):
        mean, std = evaluate(snapshot, suite, cfg.eval_episodes, root.split(_S_EVAL, step, si))
        rows.append(
            {
                "step": step, "suite": suite, "seed": cfg.seed, "variant": cfg.variant,
                "mean_return": mean, "std_return": std, "episodes": cfg.eval_episodes,
            }
        )
    append_metrics(metrics_path, rows)
    return rows


def train_run(cfg: RunConfig, out_dir, resume: bool = False, log=None) -> Path:
    """Train on the train suite, evaluating all configured suites periodically.

    Writes metrics.csv incrementally, checkpoints every checkpoint_interval
    steps, and summary.json at the end. Numeric divergence marks the run
    failed in summary.json and keeps the last good checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    metrics_path = out / "metrics.csv"
    if metrics_path.exists() and not resume:
        metrics_path.unlink()

    root = Prng(cfg.seed)
    qnet = build_qnet(cfg.encoder_config(), root.split(_S_INIT))
    target = clone_qnet(qnet)
    adam = Adam(qnet.named_params(), cfg.agent.lr)
    buffer = ReplayBuffer(cfg.agent.buffer_capacity)
    explore_rng = root.split(_S_EXPLORE)
    update_rng = root.split(_S_UPDATE)
    replay_rng = root.split(_S_REPLAY)

    steps = 0
    if resume:
        _, qnet, meta = load_run(out)
        target = clone_qnet(qnet)  # buffer and streams restart; see README
        adam = Adam(qnet.named_params(), cfg.agent.lr)
        steps = int(meta["step"])

    train_spec = pw.shift_suite("train")
    episode_idx = 0
    state, obs = pw.reset(root.split(_S_ENV, episode_idx), train_spec)
    buffer.start_episode(state.frames[-1])
    if not resume:
        _eval_all_suites(cfg, qnet, 0, root, metrics_path)
    status = {"status": "ok"}
    t_start = time.time()

    def dump_frame(st: pw.WorldState) -> None:
        d = out / "frames" / f"ep{episode_idx:05d}"
        d.mkdir(parents=True, exist_ok=True)
        pw.write_png(d / f"t{st.t:03d}.png", st.frames[-1])

    if cfg.debug_frames:
        dump_frame(state)

    try:
        while steps < cfg.total_steps:
            eps = epsilon_at(steps, cfg.agent)
            action = act(obs, qnet, eps, explore_rng)
            state, obs, reward, done = pw.step(state, action)
            reached = state.agent == state.target
            buffer.add_step(state.frames[-1], action, reward, done, terminal=reached)
            if cfg.debug_frames:
                dump_frame(state)
            steps += 1
            if done:
                episode_idx += 1
                state, obs = pw.reset(root.split(_S_ENV, episode_idx), train_spec)
                buffer.start_episode(state.frames[-1])
                if cfg.debug_frames:
                    dump_frame(state)
            if steps % cfg.agent.update_every == 0 and len(buffer) >= cfg.agent.batch:
                batch = buffer.sample(replay_rng, cfg.agent.batch, dtype=qnet.w.dtype)
                loss, grads = td_update(batch, qnet, target, cfg.agent, update_rng)
                adam.step(qnet.named_params(), grads)
                soft_update(target, qnet, cfg.agent.tau)
            if steps % cfg.eval_interval == 0:
                _eval_all_suites(cfg, qnet, steps, root, metrics_path)
                if log:
                    log(f"[{cfg.variant} seed={cfg.seed}] step {steps}/{cfg.total_steps} "
                        f"({time.time() - t_start:.0f}s)")
            if cfg.checkpoint_interval and steps % cfg.checkpoint_interval == 0:
                _save_checkpoint(out, steps, qnet, target, adam, cfg)
    except NumericError as exc:
        status = {"status": "failed", "error": str(exc), "failed_at_step": steps}

    if status["status"] == "ok" and (cfg.total_steps == 0 or cfg.total_steps % cfg.checkpoint_interval != 0):
        _save_checkpoint(out, steps, qnet, target, adam, cfg)
    summary = dict(status)
    summary.update({"seed": cfg.seed, "variant": cfg.variant, "wall_seconds": round(time.time() - t_start, 1)})
    try:
        summary.update(summary_from_metrics(read_metrics(metrics_path)))
    except ConfigError:
        pass
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# Ablation and summary tables


@dataclass
class SummaryTable:
    variants: list[str]
    suites: list[str]
    cells: dict  # (suite, variant) -> {"mean":, "std":, "seeds":} or {"failed": True}
    ratios: dict  # (suite, variant) -> float, test suites only

    def cell_text(self, suite: str, variant: str) -> str:
        cell = self.cells.get((suite, variant))
        if cell is None:
            return "-"
        if cell.get("failed"):
            return "failed"
        return f"{cell['mean']:.3f}±{cell['std']:.3f}"

    def to_csv_text(self) -> str:
        lines = ["suite," + ",".join(self.variants)]
        for suite in self.suites:
            lines.append(suite + "," + ",".join(self.cell_text(suite, v) for v in self.variants))
        for suite in self.suites:
            if suite == "train":
                continue
            vals = []
            for v in self.variants:
                r = self.ratios.get((suite, v))
                vals.append("-" if r is None else f"{r:.3f}")
            lines.append(f"ratio:{suite}," + ",".join(vals))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        names = ["suite"] + list(self.variants)
        rows = [names]
        for suite in self.suites:
            rows.append([suite] + [self.cell_text(suite, v) for v in self.variants])
        for suite in self.suites:
            if suite == "train":
                continue
            row = [f"ratio:{suite}"]
            for v in self.variants:
                r = self.ratios.get((suite, v))
                row.append("-" if r is None else f"{r:.3f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(names))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def summarize_runs(run_dirs, variants: list[str] | None = None) -> SummaryTable:
    """Aggregate per-run summaries into a variant x suite table over seeds."""
    per = {}
    suites_seen = []
    variants_seen = []
    for d in map(Path, run_dirs):
        summ = json.loads((d / "summary.json").read_text())
        variant = summ["variant"]
        if variant not in variants_seen:
            variants_seen.append(variant)
        if summ.get("status") != "ok":
            per.setdefault(variant, {}).setdefault("__failed__", []).append(summ.get("seed"))
            continue
        for suite, cell in summ["suites"].items():
            if suite not in suites_seen:
                suites_seen.append(suite)
            per.setdefault(variant, {}).setdefault(suite, []).append(cell["mean_return"])
    if variants is None:
        variants = variants_seen
    order = [s for s in pw.SUITE_NAMES if s in suites_seen] or suites_seen
    cells = {}
    ratios = {}
    for v in variants:
        entry = per.get(v, {})
        failed = "__failed__" in entry
        for suite in order:
            vals = entry.get(suite)
            if vals:
                cells[(suite, v)] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "seeds": len(vals)}
            elif failed:
                cells[(suite, v)] = {"failed": True}
        train_cell = cells.get(("train", v))
        if train_cell and not train_cell.get("failed") and train_cell["mean"] > 0:
            for suite in order:
                if suite == "train":
                    continue
                c = cells.get((suite, v))
                if c and not c.get("failed"):
                    ratios[(suite, v)] = c["mean"] / train_cell["mean"]
    return SummaryTable(variants=list(variants), suites=order, cells=cells, ratios=ratios)


def run_batch(configs: list[tuple[RunConfig, Path]], workers: int = 1, log=None) -> None:
    """Execute training runs, either in-process or as parallel subprocesses."""
    if workers <= 1:
        for cfg, out in configs:
            train_run(cfg, out, log=log)
        return
    pending = list(configs)
    running: list[tuple[subprocess.Popen, Path]] = []
    while pending or running:
        while pending and len(running) < workers:
            cfg, out = pending.pop(0)
            out.mkdir(parents=True, exist_ok=True)
            cfg_path = out / "config.json"
            cfg_path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
            cmd = [sys.executable, "-m", "normrl.cli", "train", "--config", str(cfg_path), "--out", str(out)]
            env = dict(os.environ)
            env.setdefault("OMP_NUM_THREADS", "1")
            env.setdefault("OPENBLAS_NUM_THREADS", "1")
            proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, env=env)
            running.append((proc, out))
            if log:
                log(f"launched {out.name}")
        time.sleep(0.5)
        still = []
        for proc, out in running:
            code = proc.poll()
            if code is None:
                still.append((proc, out))
            else:
                if log:
                    log(f"finished {out.name} (exit {code})")
                if code not in (0, 3):  # 3 = numeric failure, recorded in summary.json
                    err = proc.stderr.read().decode() if proc.stderr else ""
                    raise ConfigError(f"worker for {out} exited {code}: {err[-500:]}")
        running = still


def ablate(base_cfg: RunConfig, seeds: list[int], out_dir, variants=ABLATION_VARIANTS,
           workers: int = 1, log=None) -> SummaryTable:
    """Run the variant x seed matrix with paired environment seeds and emit the table."""
    if len(seeds) < 2:
        raise ConfigError("ablate needs at least 2 seeds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    run_dirs = []
    for variant in variants:
        for seed in seeds:
            cfg = dataclasses.replace(base_cfg, variant=variant, seed=seed)
            d = out / f"{variant}_seed{seed}"
            run_dirs.append(d)
            if not (d / "summary.json").exists():
                jobs.append((cfg, d))
    run_batch(jobs, workers=workers, log=log)
    table = summarize_runs(run_dirs, variants=list(variants))
    (out / "ablation.csv").write_text(table.to_csv_text())
    (out / "ablation.txt").write_text(table.to_text())
    return table


# ---------------------------------------------------------------------------
# Gradient-check gate


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    suites: list[SuiteResult]
    passed: bool

    def to_text(self) -> str:
        lines = []
        for s in self.suites:
            lines.append(f"{'PASS' if s.passed else 'FAIL'} {s.name:<16} trials={s.trials} max_rel_err={s.max_rel_err:.3e}")
        lines.append(("all suites passed" if self.passed else "GRADCHECK FAILED"))
        return "\n".join(lines) + "\n"


_GC_THRESHOLD = 1e-4
_GC_MIN_GRAD = 1e-5  # below this, central differences are cancellation noise


def _fd(f, x, **kw):
    return grad_check(f, x, min_grad=_GC_MIN_GRAD, **kw)


def _tiny_encoder_cfg(rng: Prng, norm: str = "cnsn") -> EncoderConfig:
    c_in = int(rng.integers(1, 3))
    size = int(rng.integers(9, 13))
    ch = int(rng.integers(3, 6))
    return EncoderConfig(
        conv=[ConvSpec(ch, 3, 2, 0), ConvSpec(ch, 3, 1, 0)],
        norm=norm,
        k_active=2 if norm in ("cnsn", "cn_only") else 0,
        feature_dim=4,
        in_shape=(c_in, size, size),
    )


def run_gradcheck(corrupt: str | None = None, trials: int = 20, seed: int = 0) -> GradcheckReport:
    """Finite-difference verification of every backward pass, in double precision.

    `corrupt` scales one suite's analytic gradients by 1.01 to prove the
    checker can fail (used by the self-test).
    """
    results = []
    with precision("double"):
        master = Prng(seed)

        def scale_for(name):
            return 1.01 if corrupt == name else 1.0

        def run_suite(name, fn):
            rng = master.split(zlib.crc32(name.encode()))
            worst = 0.0
            for k in range(trials):
                worst = max(worst, fn(rng, k, scale_for(name)))
            results.append(SuiteResult(name, trials, worst, worst < _GC_THRESHOLD))

        run_suite("conv2d", _gc_conv)
        run_suite("linear", _gc_linear)
        run_suite("relu", _gc_relu)
        run_suite("crossnorm", lambda r, k, s: _gc_crossnorm(r, k, s, crop=False))
        run_suite("crossnorm_crop", lambda r, k, s: _gc_crossnorm(r, k, s, crop=True))
        run_suite("selfnorm", _gc_selfnorm)
        run_suite("batchnorm", _gc_batchnorm)
        run_suite("encoder", _gc_encoder)
        run_suite("td_loss", _gc_td_loss)
    return GradcheckReport(suites=results, passed=all(s.passed for s in results))


def _rand_nchw(rng: Prng, cmax=4, smax=7):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(1, cmax))
    h = int(rng.integers(3, smax))
    w = int(rng.integers(3, smax))
    return rng.normal(size=(n, c, h, w))


def _gc_conv(rng: Prng, k: int, scale: float) -> float:
    x = _rand_nchw(rng, cmax=4, smax=8)
    n, c, h, wd = x.shape
    kk = int(rng.integers(1, min(h, wd) + 1))
    o = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    w = rng.normal(size=(o, c, kk, kk))
    b = rng.normal(size=o)
    up_shape = conv2d(x, w, b, stride, pad).shape
    up = rng.normal(size=up_shape)

    def f_x(xx):
        y = conv2d(xx, w, b, stride, pad)
        gx, _, _ = conv2d_backward(xx, w, up, stride, pad)
        return (y * up).sum(), scale * gx

    def f_w(ww):
        y = conv2d(x, ww, b, stride, pad)
        _, gw, _ = conv2d_backward(x, ww, up, stride, pad)
        return (y * up).sum(), scale * gw

    return max(_fd(f_x, x), _fd(f_w, w))


def _gc_linear(rng: Prng, k: int, scale: float) -> float:
    n, d, m = (int(rng.integers(1, 6)) for _ in range(3))
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, m))
    b = rng.normal(size=m)
    up = rng.normal(size=(n, m))

    def f_x(xx):
        gx, _, _ = linear_backward(xx, w, up)
        return (linear(xx, w, b) * up).sum(), scale * gx

    def f_w(ww):
        _, gw, _ = linear_backward(x, ww, up)
        return (linear(x, ww, b) * up).sum(), scale * gw

    return max(_fd(f_x, x), _fd(f_w, w))


def _gc_relu(rng: Prng, k: int, scale: float) -> float:
    x = _rand_nchw(rng)
    x = np.where(np.abs(x) < 0.05, x + 0.2, x)  # keep away from the kink
    up = rng.normal(size=x.shape)

    def f(xx):
        return (relu(xx) * up).sum(), scale * relu_backward(xx, up)

    return _fd(f, x)


def _gc_crossnorm(rng: Prng, k: int, scale: float, crop: bool) -> float:
    n = int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(4, 8))
    w = int(rng.integers(4, 8))
    x = rng.normal(size=(n, c, h, w))
    cfg = nl.CrossNormConfig(crop_enabled=crop)
    pairing = nl.sample_pairing(rng, n)
    regions = [nl.sample_crop(rng, h, w, cfg) for _ in range(n)] if crop else None
    up = rng.normal(size=x.shape)

    def f(xx):
        y, cache = nl.crossnorm_forward(xx, pairing, regions, cfg)
        return (y * up).sum(), scale * nl.crossnorm_backward(cache, up)

    return _fd(f, x)


def _gc_selfnorm(rng: Prng, k: int, scale: float) -> float:
    x = _rand_nchw(rng)
    c = x.shape[1]
    params = nl.SelfNormParams.init(rng, c, 2, np.float64)
    # perturb so gate derivatives are not at their symmetric init point
    params.mean_w1 += rng.normal(0, 0.3, size=params.mean_w1.shape)
    params.std_w1 += rng.normal(0, 0.3, size=params.std_w1.shape)
    up = rng.normal(size=x.shape)

    def f_x(xx):
        y, cache = nl.selfnorm_forward(xx, nl.channel_stats(xx), params)
        g, _ = nl.selfnorm_backward(cache, up)
        return (y * up).sum(), scale * g

    worst = _fd(f_x, x)
    for pname in ("mean_w1", "mean_b1", "mean_w2", "mean_b2", "std_w1", "std_b1", "std_w2", "std_b2"):
        def f_p(arr, pname=pname):
            arrays = {kk: vv.copy() for kk, vv in params.arrays().items()}
            arrays[pname] = arr
            p2 = nl.SelfNormParams(**arrays)
            y, cache = nl.selfnorm_forward(x, nl.channel_stats(x), p2)
            _, gp = nl.selfnorm_backward(cache, up)
            return (y * up).sum(), scale * gp[pname]

        worst = max(worst, _fd(f_p, params.arrays()[pname].copy()))
    return worst


def _gc_batchnorm(rng: Prng, k: int, scale: float) -> float:
    x = _rand_nchw(rng)
    c = x.shape[1]
    gamma = rng.normal(1.0, 0.2, size=c)
    beta = rng.normal(0.0, 0.2, size=c)
    train = k % 3 != 2  # eval path every third trial
    up = rng.normal(size=x.shape)

    def make_state():
        st = nl.BatchNormState.init(c, np.float64)
        st.gamma = gamma.copy()
        st.beta = beta.copy()
        st.running_mean = np.full(c, 0.3)
        st.running_var = np.full(c, 1.7)
        return st

    def f_x(xx):
        y, cache = nl.batchnorm_forward(xx, make_state(), train)
        g, _, _ = nl.batchnorm_backward(cache, up)
        return (y * up).sum(), scale * g

    def f_gamma(gg):
        st = make_state()
        st.gamma = gg
        y, cache = nl.batchnorm_forward(x, st, train)
        _, dg, _ = nl.batchnorm_backward(cache, up)
        return (y * up).sum(), scale * dg

    return max(_fd(f_x, x), _fd(f_gamma, gamma.copy()))


_KINK_MARGIN = 5e-4  # pre-activations this close to a relu kink make FD meaningless


def _min_preact(cache) -> float:
    worst = min(float(np.abs(e["pre_act"]).min()) for e in cache["layers"])
    return min(worst, float(np.abs(cache["pre_features"]).min()))


def _gc_encoder(rng: Prng, k: int, scale: float) -> float:
    norm = ("cnsn", "cn_only", "sn_only", "bn", "none")[k % 5]
    cfg = _tiny_encoder_cfg(rng, norm)
    enc = build_encoder(cfg, rng)
    n = int(rng.integers(2, 4))
    mode = Mode.TRAIN if k % 2 == 0 else Mode.EVAL
    mask = sample_active_mask(rng, cfg) if mode is Mode.TRAIN else None
    for _ in range(200):  # reject draws whose relu inputs sit near the kink
        obs = rng.normal(size=(n, *cfg.in_shape))
        draw_seed = int(rng.integers(0, 1 << 31))
        _, probe = encode(obs, enc, mask, mode, Prng(draw_seed))
        if _min_preact(probe) > _KINK_MARGIN:
            break

    def f(o):
        feats, cache = encode(o, enc, mask, mode, Prng(draw_seed))
        gobs, _ = encode_backward(cache, np.ones_like(feats))
        return feats.sum(), scale * gobs

    worst = _fd(f, obs, max_coords=40, rng=rng)

    candidates = [p for p in ("conv0.w", "sn0.mean_w2", "head.w") if p in enc.named_params()]
    pname = candidates[k % len(candidates)]

    def f_p(arr):
        params = enc.named_params()
        saved = params[pname].copy()
        params[pname][...] = arr
        try:
            feats, cache = encode(obs, enc, mask, mode, Prng(draw_seed))
            _, grads = encode_backward(cache, np.ones_like(feats))
            return feats.sum(), scale * grads[pname]
        finally:
            params[pname][...] = saved

    worst = max(worst, _fd(f_p, enc.named_params()[pname].copy(), max_coords=30, rng=rng))
    return worst


def _gc_td_loss(rng: Prng, k: int, scale: float) -> float:
    cfg = _tiny_encoder_cfg(rng, "cnsn")
    qnet = build_qnet(cfg, rng)
    target = clone_qnet(qnet)
    agent_cfg = AgentConfig(batch=4, shift_pad=1)
    n = 4
    actions = rng.integers(0, N_ACTIONS, size=n)
    for _ in range(200):
        # reject draws that put a relu input near its kink or the TD error
        # near the Huber corner, where central differences carry no signal
        obs = rng.uniform(0, 1, size=(n, *cfg.in_shape))
        next_obs = rng.uniform(0, 1, size=(n, *cfg.in_shape))
        rewards = rng.normal(size=n)
        dones = (rng.uniform(size=n) < 0.3).astype(np.float64)
        batch = (obs, actions, rewards.astype(np.float64), next_obs, dones)
        draw_seed = int(rng.integers(0, 1 << 31))
        probe_rng = Prng(draw_seed)
        obs_aug = random_shift(obs, probe_rng, agent_cfg.shift_pad)
        next_aug = random_shift(next_obs, probe_rng, agent_cfg.shift_pad)
        mask = sample_active_mask(probe_rng, cfg)
        q_next, _ = qnet_forward(target, next_aug, None, Mode.EVAL)
        y = batch[2] + agent_cfg.gamma * (1.0 - dones) * q_next.max(axis=1)
        q, probe = qnet_forward(qnet, obs_aug, mask, Mode.TRAIN, probe_rng)
        err = q[np.arange(n), actions] - y
        if _min_preact(probe["enc"]) > _KINK_MARGIN and np.abs(np.abs(err) - 1.0).min() > 1e-3:
            break
    pname = ("conv0.w", "sn1.std_w2", "q.w", "conv1.b")[k % 4]

    def f_p(arr):
        params = qnet.named_params()
        saved = params[pname].copy()
        params[pname][...] = arr
        try:
            loss, grads = td_update(batch, qnet, target, agent_cfg, Prng(draw_seed))
            return loss, scale * grads[pname]
        finally:
            params[pname][...] = saved

    return _fd(f_p, qnet.named_params()[pname].copy(), max_coords=25, rng=rng)
